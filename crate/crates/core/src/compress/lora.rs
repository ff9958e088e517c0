use crate::checkpoint::{Checkpoint, Record};
use crate::error::{Error, Result};
use crate::model::{parse_proj_name, proj_name, Adapters, Model, ModelConfig, ParamStore, ParamVars, Proj};
use crate::rng::SeedTree;
use crate::tensor::{Scalar, Tape, Tensor};
use half::f16;
use rand_distr::{Distribution, Normal};

/// Ranks the recovery experiments sweep.
pub const LORA_RANKS: [usize; 3] = [8, 16, 32];

/// Low-rank deltas on every projection of every layer.
///
/// Parameters are named `lora.<layer>.<proj>.A` (`[rank, in]`) and
/// `lora.<layer>.<proj>.B` (`[out, rank]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub params: ParamStore<f32>,
}

fn names(layer: usize, proj: Proj) -> (String, String) {
    let base = format!("lora.{layer}.{}", proj.key());
    (format!("{base}.A"), format!("{base}.B"))
}

impl LoraAdapter {
    /// `A ~ N(0, 1/in)`, `B = 0`.
    pub fn new(cfg: &ModelConfig, rank: usize, alpha: f64, seeds: &SeedTree) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        let mut params = ParamStore::new();
        for l in 0..cfg.n_layers {
            for (pi, p) in Proj::ALL.into_iter().enumerate() {
                let [din, dout] = cfg.proj_shape(p);
                let dist = Normal::new(0.0, 1.0 / (din as f64).sqrt()).map_err(|e| Error::Invalid(e.to_string()))?;
                let mut rng = seeds.stream("lora/init", (l * Proj::ALL.len() + pi) as u64);
                let a: Vec<f32> = (0..rank * din).map(|_| dist.sample(&mut rng) as f32).collect();
                let (na, nb) = names(l, p);
                params.insert(na, Tensor::new([rank, din], a)?);
                params.insert(nb, Tensor::zeros([dout, rank])?);
            }
        }
        Ok(Self { rank, alpha, params })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Registers the adapter on `tape`, keyed by the wrapped projection name.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> (Adapters, ParamVars) {
        let vars = self.params.cast::<T>().bind(tape, trainable);
        let mut ad = Adapters {
            scale: self.scale(),
            ..Default::default()
        };
        for (name, &a) in vars.iter() {
            if let Some(base) = name.strip_suffix(".A") {
                let b = vars.get(&format!("{base}.B")).expect("paired");
                let rest = base.strip_prefix("lora.").expect("prefixed");
                ad.pairs.insert(format!("layers.{rest}"), (a, b));
            }
        }
        (ad, vars)
    }

    /// Projections wrapped by this adapter.
    pub fn wrapped(&self) -> Vec<String> {
        self.params
            .names()
            .filter_map(|n| n.strip_suffix(".A"))
            .map(|b| format!("layers.{}", &b["lora.".len()..]))
            .collect()
    }

    /// Checks the wrapped set is every projection of `cfg` at matching shapes.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for l in 0..cfg.n_layers {
            for p in Proj::ALL {
                let [din, dout] = cfg.proj_shape(p);
                let (na, nb) = names(l, p);
                let a = self.params.get(&na)?;
                let b = self.params.get(&nb)?;
                if a.shape() != [self.rank, din] || b.shape() != [dout, self.rank] {
                    return Err(Error::Config(format!("adapter for {} has wrong shape", proj_name(l, p))));
                }
            }
        }
        for w in self.wrapped() {
            if parse_proj_name(&w).is_none_or(|(l, _)| l >= cfg.n_layers) {
                return Err(Error::Config(format!("adapter wraps unknown projection `{w}`")));
            }
        }
        Ok(())
    }

    /// Values rounded to half precision, as stored on disk.
    pub fn rounded(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.params.iter_mut() {
            *t = t.map(|v| f16::from_f32(v).to_f32());
        }
        out
    }

    /// Folds `scale * A^T B^T` into each wrapped `[in, out]` weight.
    pub fn merge_into<T: Scalar>(&self, model: &Model<T>) -> Result<Model<T>> {
        self.validate(&model.config)?;
        let mut out = model.clone();
        let s = self.scale();
        for l in 0..model.config.n_layers {
            for p in Proj::ALL {
                let [din, dout] = model.config.proj_shape(p);
                let (na, nb) = names(l, p);
                let a = self.params.get(&na)?.data();
                let b = self.params.get(&nb)?.data();
                let w = out.params.get_mut(&proj_name(l, p))?.data_mut();
                for i in 0..din {
                    for o in 0..dout {
                        let d: f64 = (0..self.rank).map(|r| a[r * din + i] as f64 * b[o * self.rank + r] as f64).sum();
                        let v = w[i * dout + o].as_f64() + s * d;
                        w[i * dout + o] = T::of(v);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("lora.rank", self.rank as f64);
        ck.set_meta("lora.alpha", self.alpha);
        for (name, t) in self.params.iter() {
            ck.insert(name.clone(), Record::F16(t.clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let rank = ck.meta("lora.rank")? as usize;
        let alpha = ck.meta("lora.alpha")?;
        let mut params = ParamStore::new();
        for (name, rec) in &ck.records {
            if name.starts_with("lora.") {
                params.insert(name.clone(), rec.to_tensor());
            }
        }
        Ok(Self { rank, alpha, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wraps_every_projection_with_zero_b() {
        let cfg = ModelConfig::toy();
        let a = LoraAdapter::new(&cfg, 8, 16.0, &SeedTree::new(1)).unwrap();
        assert_eq!(a.wrapped().len(), 7 * cfg.n_layers);
        a.validate(&cfg).unwrap();
        for (n, t) in a.params.iter() {
            if n.ends_with(".B") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
        let back = LoraAdapter::from_checkpoint(&Checkpoint::read_from(a.to_checkpoint().to_bytes().as_slice()).unwrap()).unwrap();
        assert_eq!(back, a.rounded());
    }

    #[test]
    fn merged_weights_match_adapter_forward() {
        use crate::model::ForwardCtx;
        use rand::Rng;
        let mut cfg = ModelConfig::toy();
        cfg.n_layers = 1;
        let seeds = SeedTree::new(3);
        let base = Model::<f64>::init(cfg.clone(), &seeds).unwrap();
        let mut a = LoraAdapter::new(&cfg, 4, 8.0, &seeds).unwrap();
        let mut rng = seeds.stream("b", 0);
        for (n, t) in a.params.iter_mut() {
            if n.ends_with(".B") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            }
        }
        let tokens: Vec<u32> = (0..12).map(|i| (i * 17 % 250) as u32).collect();
        let mut tape = Tape::new();
        let vars = base.bind(&mut tape, false);
        let (ad, _) = a.bind(&mut tape, false);
        let ctx = ForwardCtx {
            adapters: Some(&ad),
            ..Default::default()
        };
        let y = base.forward(&mut tape, &vars, &[&tokens], &ctx).unwrap();
        let merged = a.merge_into(&base).unwrap().logits(&tokens).unwrap();
        for (p, q) in tape.value(y).data().iter().zip(merged.data()) {
            assert!((p - q).abs() < 1e-9, "{p} vs {q}");
        }
    }
}
