use crate::error::{Error, Result};
use crate::model::{loss, proj_name, ForwardCtx, Model, ModelConfig, ParamStore, Proj};
use crate::optim::{AdamW, AdamWConfig, LrSchedule, MuParamPolicy, Optimizer, StateRecords};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::train::shift;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn stats(scores: &[f64]) -> String {
    let finite: Vec<f64> = scores.iter().copied().filter(|v| v.is_finite()).collect();
    let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    format!(
        "n={} non_finite={} min={min:.4e} max={max:.4e} mean={mean:.4e}",
        scores.len(),
        scores.len() - finite.len()
    )
}

/// Relaxed top-`k` mask `sigmoid((s - tau) / t)` with `tau` bisected so the
/// mask sums to `k`. Returns the mask and `tau`.
pub fn soft_top_k(scores: &[f64], k: usize, temperature: f64) -> Result<(Vec<f64>, f64)> {
    let n = scores.len();
    if k == 0 || k >= n {
        return Err(Error::Invalid(format!("soft top-k needs 0 < k < {n}, got k = {k}")));
    }
    if !(temperature > 0.0) || scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!(
            "soft top-k on degenerate input (temperature {temperature}; {})",
            stats(scores)
        )));
    }
    let mass = |tau: f64| scores.iter().map(|&s| sigmoid((s - tau) / temperature)).sum::<f64>();
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (min - 40.0 * temperature, max + 40.0 * temperature);
    let target = k as f64;
    let mut tau = 0.5 * (lo + hi);
    for _ in 0..200 {
        tau = 0.5 * (lo + hi);
        let m = mass(tau);
        if (m - target).abs() < 1e-9 {
            break;
        }
        if m > target {
            lo = tau;
        } else {
            hi = tau;
        }
    }
    let m = mass(tau);
    if !((m - target).abs() <= 0.5) {
        return Err(Error::Numerical(format!(
            "soft top-k bisection stalled at mass {m:.4} for k = {k} (temperature {temperature:.3e}; {})",
            stats(scores)
        )));
    }
    Ok((scores.iter().map(|&s| sigmoid((s - tau) / temperature)).collect(), tau))
}

/// Learned per-layer scores over FFN hidden units.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub scores: Vec<Vec<f64>>,
    pub temperature: f64,
    pub k: usize,
}

impl PruneMask {
    /// Relaxed mask values at the current temperature.
    pub fn relaxed(&self) -> Result<Vec<Vec<f64>>> {
        self.scores
            .iter()
            .map(|s| {
                if self.k == s.len() {
                    Ok(vec![1.0; s.len()])
                } else {
                    soft_top_k(s, self.k, self.temperature).map(|(m, _)| m)
                }
            })
            .collect()
    }

    /// Exactly `k` kept units per layer: highest scores, ties to the lower index.
    pub fn hard(&self) -> Vec<Vec<bool>> {
        self.scores
            .iter()
            .map(|s| {
                let mut order: Vec<usize> = (0..s.len()).collect();
                order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
                let mut keep = vec![false; s.len()];
                for &i in order.iter().take(self.k) {
                    keep[i] = true;
                }
                keep
            })
            .collect()
    }

    /// Hard mask as 0/1 multipliers for [`ForwardCtx::ffn_masks`].
    pub fn hard_tensors<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.hard()
            .into_iter()
            .map(|keep| {
                let n = keep.len();
                Tensor::new([n], keep.into_iter().map(|b| if b { T::one() } else { T::zero() }).collect()).expect("non-empty")
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskTrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
}

impl Default for MaskTrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.05,
            temperature_start: 1.0,
            temperature_end: 0.05,
        }
    }
}

impl MaskTrainConfig {
    /// Geometric anneal from start to end over the run.
    pub fn temperature(&self, step: u64) -> f64 {
        if self.steps <= 1 {
            return self.temperature_end;
        }
        let f = step.min(self.steps - 1) as f64 / (self.steps - 1) as f64;
        self.temperature_start * (self.temperature_end / self.temperature_start).powf(f)
    }
}

/// Stepwise mask learner, so callers can checkpoint between steps.
#[derive(Debug, Clone)]
pub struct MaskTrainer {
    pub k: usize,
    pub config: MaskTrainConfig,
    layers: usize,
    scores: ParamStore<f64>,
    opt: AdamW,
}

impl MaskTrainer {
    pub fn new(model: &ModelConfig, k: usize, cfg: &MaskTrainConfig) -> Result<Self> {
        let f = model.ffn_hidden_dim;
        if k == 0 || k > f {
            return Err(Error::Config(format!("keep count {k} outside 1..={f}")));
        }
        if !(cfg.temperature_start > 0.0 && cfg.temperature_end > 0.0) {
            return Err(Error::Config("mask temperatures must be positive".into()));
        }
        let mut scores = ParamStore::<f64>::new();
        for l in 0..model.n_layers {
            scores.insert(format!("mask.{l}"), Tensor::zeros([f])?);
        }
        let adam = AdamWConfig {
            global_clip: None,
            weight_decay: 0.0,
            ..Default::default()
        };
        Ok(Self {
            k,
            config: cfg.clone(),
            layers: model.n_layers,
            scores,
            opt: AdamW::new(adam, LrSchedule::constant(cfg.lr), MuParamPolicy::uniform())?,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        Optimizer::<f64>::steps_taken(&self.opt)
    }

    /// One update on `seqs`; returns the soft cross-entropy to the teacher.
    pub fn step<T: Scalar>(&mut self, teacher: &Model<T>, seqs: &[Vec<u32>]) -> Result<f64> {
        let (layers, k) = (self.layers, self.k);
        if teacher.config.n_layers != layers || self.scores.get("mask.0")?.len() != teacher.config.ffn_hidden_dim {
            return Err(Error::Invalid("mask trainer does not match the teacher's shape".into()));
        }
        if k == teacher.config.ffn_hidden_dim {
            return Ok(0.0);
        }
        let t = self.config.temperature(self.steps_taken());
        let (inputs, _) = shift(seqs)?;
        let target = {
            let mut tape = Tape::<T>::new();
            let vars = teacher.bind(&mut tape, false);
            let lg = teacher.forward(&mut tape, &vars, &inputs, &ForwardCtx::default())?;
            let p = tape.softmax(lg)?;
            tape.value(p).clone()
        };
        let mut tape = Tape::<T>::new();
        let vars = teacher.bind(&mut tape, false);
        let svars = self.scores.cast::<T>().bind(&mut tape, true);
        let mut masks = Vec::with_capacity(layers);
        for l in 0..layers {
            let name = format!("mask.{l}");
            let (_, tau) = soft_top_k(&self.scores.get(&name)?.to_f64(), k, t)?;
            let s = svars.get(&name)?;
            let shifted = tape.add_scalar(s, -tau);
            let z = tape.scale(shifted, 1.0 / t);
            masks.push(tape.sigmoid(z));
        }
        let ctx = ForwardCtx {
            ffn_masks: Some(&masks),
            ..Default::default()
        };
        let lg = teacher.forward(&mut tape, &vars, &inputs, &ctx)?;
        let l = loss::soft_cross_entropy(&mut tape, lg, target, None)?;
        let loss = tape.value(l).item().as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite { block: "mask loss".into() });
        }
        tape.backward(l)?;
        let grads = svars.grads(&tape).into_iter().map(|(k, g)| (k, g.cast())).collect();
        self.opt.step(&mut self.scores, &grads)?;
        Ok(loss)
    }

    pub fn mask(&self) -> PruneMask {
        PruneMask {
            scores: (0..self.layers)
                .map(|l| self.scores.get(&format!("mask.{l}")).expect("present").to_f64())
                .collect(),
            temperature: self.config.temperature(self.steps_taken()),
            k: self.k,
        }
    }

    /// Scores and optimizer moments, for checkpointing.
    pub fn state(&self) -> StateRecords {
        let mut out: StateRecords = self.scores.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
        out.extend(Optimizer::<f64>::state(&self.opt));
        out
    }

    pub fn load_state(&mut self, records: &StateRecords) -> Result<()> {
        for l in 0..self.layers {
            let name = format!("mask.{l}");
            let t = records.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))?;
            let slot = self.scores.get_mut(&name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t.clone();
        }
        let rest: StateRecords = records.iter().filter(|(k, _)| !k.starts_with("mask.")).map(|(k, v)| (k.clone(), v.clone())).collect();
        Optimizer::<f64>::load_state(&mut self.opt, &rest)
    }
}

/// Learns which `k` FFN units per layer to keep. The teacher is frozen and
/// the masked model is fit to the teacher's own next-token distribution on
/// `batch(step)`.
pub fn learn_mask<T: Scalar>(
    teacher: &Model<T>,
    mut batch: impl FnMut(u64) -> Result<Vec<Vec<u32>>>,
    k: usize,
    cfg: &MaskTrainConfig,
) -> Result<PruneMask> {
    let mut trainer = MaskTrainer::new(&teacher.config, k, cfg)?;
    if k < teacher.config.ffn_hidden_dim {
        for step in 0..cfg.steps {
            trainer.step(teacher, &batch(step)?)?;
        }
    }
    Ok(trainer.mask())
}

/// Drops the FFN units a hard mask removes: columns of the gate and up
/// projections and rows of the down projection.
pub fn prune<T: Scalar>(model: &Model<T>, mask: &PruneMask) -> Result<Model<T>> {
    let cfg = &model.config;
    let f = cfg.ffn_hidden_dim;
    if mask.scores.len() != cfg.n_layers || mask.scores.iter().any(|s| s.len() != f) {
        return Err(Error::Invalid(format!(
            "mask covers {} layers of widths {:?}; model has {} layers of width {f}",
            mask.scores.len(),
            mask.scores.iter().map(|s| s.len()).collect::<Vec<_>>(),
            cfg.n_layers
        )));
    }
    if mask.k == 0 || mask.k > f {
        return Err(Error::Invalid(format!("mask keeps {} of {f} units", mask.k)));
    }
    if mask.k == f {
        return Ok(model.clone());
    }
    let mut out = model.clone();
    out.config.ffn_hidden_dim = mask.k;
    let d = cfg.model_dim;
    for (l, keep) in mask.hard().iter().enumerate() {
        let kept: Vec<usize> = (0..f).filter(|&i| keep[i]).collect();
        for p in [Proj::Gate, Proj::Up] {
            let name = proj_name(l, p);
            let w = model.params.get(&name)?;
            let data = (0..d).flat_map(|r| kept.iter().map(move |&c| w.at2(r, c))).collect();
            out.params.insert(name, Tensor::new([d, mask.k], data)?);
        }
        let name = proj_name(l, Proj::Down);
        let w = model.params.get(&name)?;
        let data = kept.iter().flat_map(|&r| (0..d).map(move |c| w.at2(r, c))).collect();
        out.params.insert(name, Tensor::new([mask.k, d], data)?);
    }
    Model::from_params(out.config, out.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scores_hit_the_keep_count() {
        for (n, k) in [(10, 3), (64, 32), (7, 6)] {
            let (m, _) = soft_top_k(&vec![0.3; n], k, 0.5).unwrap();
            let s: f64 = m.iter().sum();
            assert!((s - k as f64).abs() <= 0.5, "{s}");
            assert!(m.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn degenerate_scores_report_stats() {
        let err = soft_top_k(&[1.0, f64::NAN, 0.0], 1, 1.0).unwrap_err().to_string();
        assert!(err.contains("non_finite=1"), "{err}");
        assert!(soft_top_k(&[1.0, 2.0], 2, 1.0).is_err());
    }

    #[test]
    fn hard_mask_keeps_exactly_k() {
        let m = PruneMask {
            scores: vec![vec![0.1, 0.9, 0.5, 0.9], vec![0.0; 4]],
            temperature: 0.1,
            k: 2,
        };
        assert_eq!(m.hard(), vec![vec![false, true, false, true], vec![true, true, false, false]]);
    }

    #[test]
    fn anneal_is_geometric() {
        let c = MaskTrainConfig {
            steps: 3,
            temperature_start: 1.0,
            temperature_end: 0.01,
            ..Default::default()
        };
        assert!((c.temperature(1) - 0.1).abs() < 1e-12);
        assert_eq!(c.temperature(2), 0.01);
    }
}
