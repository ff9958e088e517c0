use super::int8::Int8Tensor;
use super::palettize::{default_group_axis, palettize, LutPrecision, PalettizeOptions};
use crate::checkpoint::{Checkpoint, Record};
use crate::error::{Error, Result};
use crate::model::{parse_proj_name, Model, ModelConfig, EMBED};
use crate::rng::SeedTree;
use crate::tensor::{DType, Scalar};
use indexmap::IndexMap;

/// Bit width per projection tensor plus shared palettization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantPlan {
    /// `layers.<i>.<proj>` -> 2 or 4.
    pub bits: IndexMap<String, u8>,
    pub group_size: usize,
    pub lut: LutPrecision,
    pub kmeans_iters: usize,
    /// Whether the shared embedding is stored as per-row int8.
    pub embedding_int8: bool,
    pub target_bpw: f64,
}

impl QuantPlan {
    /// Every projection at `bits`.
    pub fn uniform(cfg: &ModelConfig, bits: u8) -> Self {
        let names = cfg.param_shapes().into_iter().map(|(n, _)| n).filter(|n| parse_proj_name(n).is_some());
        Self {
            bits: names.map(|n| (n, bits)).collect(),
            group_size: 16,
            lut: LutPrecision::F16,
            kmeans_iters: 25,
            embedding_int8: true,
            target_bpw: bits as f64,
        }
    }

    fn options(&self, name: &str) -> Result<PalettizeOptions> {
        let (_, proj) = parse_proj_name(name).ok_or_else(|| Error::Invalid(format!("`{name}` is not a projection")))?;
        let bits = *self
            .bits
            .get(name)
            .ok_or_else(|| Error::Config(format!("quantization plan does not cover `{name}`")))?;
        if !matches!(bits, 2 | 4) {
            return Err(Error::Config(format!("`{name}` assigned {bits} bits; only 2 and 4 are supported")));
        }
        Ok(PalettizeOptions {
            bits,
            group_size: self.group_size,
            axis: default_group_axis(proj),
            kmeans_iters: self.kmeans_iters,
            lut: self.lut,
        })
    }
}

/// Bit accounting of a plan against a model shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpwReport {
    pub index_bits: usize,
    pub lut_bits: usize,
    pub projection_weights: usize,
    /// Codes plus per-row scale/zero of the embedding.
    pub embedding_bits: usize,
    pub embedding_weights: usize,
    /// Norm gains kept at full width.
    pub other_bits: usize,
    pub other_weights: usize,
}

impl BpwReport {
    /// Bits per projection weight, counting index and LUT bits.
    pub fn projection_bpw(&self) -> f64 {
        (self.index_bits + self.lut_bits) as f64 / self.projection_weights as f64
    }

    /// Bits per weight over every parameter of the model.
    pub fn total_bpw(&self) -> f64 {
        (self.index_bits + self.lut_bits + self.embedding_bits + self.other_bits) as f64
            / (self.projection_weights + self.embedding_weights + self.other_weights) as f64
    }
}

/// Storage cost of `plan` on a model with config `cfg`.
pub fn effective_bpw(plan: &QuantPlan, cfg: &ModelConfig) -> Result<BpwReport> {
    let mut r = BpwReport {
        index_bits: 0,
        lut_bits: 0,
        projection_weights: 0,
        embedding_bits: 0,
        embedding_weights: 0,
        other_bits: 0,
        other_weights: 0,
    };
    for (name, shape) in cfg.param_shapes() {
        let n: usize = shape.iter().product();
        if parse_proj_name(&name).is_some() {
            let o = plan.options(&name)?;
            let line = match o.axis {
                super::GroupAxis::Rows => shape[0],
                super::GroupAxis::Cols => shape[1],
            };
            r.index_bits += n * o.bits as usize;
            r.lut_bits += line.div_ceil(o.group_size) * (1 << o.bits) * o.lut.bits();
            r.projection_weights += n;
        } else if name == EMBED {
            r.embedding_weights += n;
            r.embedding_bits += if plan.embedding_int8 { n * 8 + shape[0] * 32 } else { n * 16 };
        } else {
            r.other_weights += n;
            r.other_bits += n * 32;
        }
    }
    for name in plan.bits.keys() {
        if !cfg.param_shapes().iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("quantization plan names unknown tensor `{name}`")));
        }
    }
    Ok(r)
}

/// Squared reconstruction error of one projection at both bit widths.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorQuantError {
    pub name: String,
    pub weights: usize,
    pub sq_error_4: f64,
    pub sq_error_2: f64,
}

fn tensor_seed(seeds: &SeedTree, name: &str, bits: u8) -> crate::rng::Rng {
    seeds.stream(&format!("palettize/{name}"), bits as u64)
}

/// Greedy mixed-precision plan: starting from all 4-bit, moves projections to
/// 2-bit in order of least error increase per saved bit until the
/// projection bpw is within 0.05 of `target`.
pub fn plan_mixed<T: Scalar>(
    model: &Model<T>,
    base: &QuantPlan,
    target: f64,
    seeds: &SeedTree,
) -> Result<(QuantPlan, Vec<TensorQuantError>)> {
    const TOL: f64 = 0.05;
    let mut plan = base.clone();
    for b in plan.bits.values_mut() {
        *b = 4;
    }
    plan.target_bpw = target;
    let mut errors = Vec::new();
    for name in plan.bits.keys().cloned().collect::<Vec<_>>() {
        let w = model.params.get(&name)?;
        let mut o = plan.options(&name)?;
        let e4 = palettize(w, &o, &mut tensor_seed(seeds, &name, 4))?.sq_error();
        o.bits = 2;
        let e2 = palettize(w, &o, &mut tensor_seed(seeds, &name, 2))?.sq_error();
        errors.push(TensorQuantError {
            name,
            weights: w.len(),
            sq_error_4: e4,
            sq_error_2: e2,
        });
    }
    let mut order: Vec<&TensorQuantError> = errors.iter().collect();
    order.sort_by(|a, b| {
        let ka = (a.sq_error_2 - a.sq_error_4) / a.weights as f64;
        let kb = (b.sq_error_2 - b.sq_error_4) / b.weights as f64;
        ka.total_cmp(&kb).then_with(|| a.name.cmp(&b.name))
    });
    let mut bpw = effective_bpw(&plan, &model.config)?.projection_bpw();
    for e in order {
        if bpw <= target + TOL {
            break;
        }
        plan.bits.insert(e.name.clone(), 2);
        let next = effective_bpw(&plan, &model.config)?.projection_bpw();
        if next < target - TOL {
            plan.bits.insert(e.name.clone(), 4);
        } else {
            bpw = next;
        }
    }
    if bpw > target + TOL {
        return Err(Error::Config(format!(
            "no 2/4-bit assignment reaches {target} bpw within {TOL}; best found {bpw:.4}"
        )));
    }
    Ok((plan, errors))
}

/// Compresses `model` according to `plan`. Gains stay at full width in the
/// model's element type.
pub fn quantize<T: Scalar>(model: &Model<T>, plan: &QuantPlan, seeds: &SeedTree) -> Result<Checkpoint> {
    effective_bpw(plan, &model.config)?;
    let mut ck = Checkpoint::new();
    ck.insert_config(&model.config);
    for (name, t) in model.params.iter() {
        let rec = if parse_proj_name(name).is_some() {
            let o = plan.options(name)?;
            Record::Pal(palettize(t, &o, &mut tensor_seed(seeds, name, o.bits))?)
        } else if name == EMBED && plan.embedding_int8 {
            Record::Int8(Int8Tensor::quantize(t)?)
        } else {
            match T::DTYPE {
                DType::F64 => Record::F64(t.cast()),
                DType::F32 => Record::F32(t.cast()),
            }
        };
        ck.insert(name.clone(), rec);
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(d: usize) -> ModelConfig {
        ModelConfig {
            model_dim: d,
            head_dim: 32,
            n_query_heads: d / 32,
            n_kv_heads: d / 32,
            n_layers: 1,
            vocab_size: 16,
            ffn_hidden_dim: d,
            rope_base: 10_000.0,
            max_seq_len: 16,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn bit_count_of_a_256_square_layer() {
        let cfg = square(256);
        let plan = QuantPlan::uniform(&cfg, 4);
        let r = effective_bpw(&plan, &cfg).unwrap();
        assert_eq!(r.projection_bpw(), (262_144.0 + 4096.0) / 65_536.0);
        assert_eq!(r.index_bits as f64 / r.projection_weights as f64, 4.0);
    }

    #[test]
    fn uncovered_projection_is_named() {
        let cfg = square(64);
        let mut plan = QuantPlan::uniform(&cfg, 4);
        plan.bits.shift_remove("layers.0.wv");
        let err = effective_bpw(&plan, &cfg).unwrap_err().to_string();
        assert!(err.contains("layers.0.wv"), "{err}");
    }
}
