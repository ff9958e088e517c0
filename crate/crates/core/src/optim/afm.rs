use super::{check_shapes, global_norm, read_slot, read_step, slot_tensor, LrSchedule, MuParamPolicy, Optimizer, StateRecords, StepStats};
use crate::error::{Error, Result};
use crate::model::{Grads, ParamStore};
use crate::tensor::{Scalar, Tensor};
use indexmap::IndexMap;

#[derive(Debug, Clone, PartialEq)]
pub struct AfmConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub block_clip: f64,
    /// `None` disables the global pre-clip.
    pub global_clip: Option<f64>,
    pub weight_decay: f64,
}

impl Default for AfmConfig {
    fn default() -> Self {
        Self {
            beta1: 0.95,
            beta2: 0.95,
            eps: 1e-30,
            block_clip: 1.0,
            global_clip: Some(1.0),
            weight_decay: 3.16e-4,
        }
    }
}

impl AfmConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} = {v} outside [0, 1)")));
            }
        }
        if !(self.eps >= 0.0) || !(self.block_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps and weight_decay must be >= 0, block_clip > 0".into()));
        }
        if let Some(c) = self.global_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("global_clip {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    shape: Vec<usize>,
    v: Vec<f64>,
    u: Vec<f64>,
}

/// RMSProp with momentum over per-block clipped instantaneous updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AfmOptimizer {
    pub config: AfmConfig,
    pub schedule: LrSchedule,
    pub policy: MuParamPolicy,
    steps: u64,
    blocks: IndexMap<String, Block>,
    last_inst_norms: Vec<(String, f64)>,
}

impl AfmOptimizer {
    pub fn new(config: AfmConfig, schedule: LrSchedule, policy: MuParamPolicy) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        policy.validate()?;
        Ok(Self {
            config,
            schedule,
            policy,
            steps: 0,
            blocks: IndexMap::new(),
            last_inst_norms: Vec::new(),
        })
    }

    /// Per-block L2 norms of the clipped instantaneous update from the last step.
    pub fn last_inst_norms(&self) -> &[(String, f64)] {
        &self.last_inst_norms
    }

    /// Momentum buffer `u` of a block, if it has been touched.
    pub fn momentum(&self, name: &str) -> Option<&[f64]> {
        self.blocks.get(name).map(|b| b.u.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.blocks.get(name).map(|b| b.v.as_slice())
    }
}

impl<T: Scalar> Optimizer<T> for AfmOptimizer {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) -> Result<StepStats> {
        check_shapes(params, grads)?;
        let grad_norm = global_norm(grads)?;
        let pre = match self.config.global_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let t = self.steps + 1;
        let lr = self.schedule.lr_at(t - 1);
        let AfmConfig {
            beta1,
            beta2,
            eps,
            block_clip,
            weight_decay,
            ..
        } = self.config;
        let correction = 1.0 - beta2.powi(t.min(i32::MAX as u64) as i32);
        self.last_inst_norms.clear();

        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let block = self.blocks.entry(name.clone()).or_insert_with(|| Block {
                shape: p.shape().to_vec(),
                v: vec![0.0; p.len()],
                u: vec![0.0; p.len()],
            });
            let mut inst = Vec::with_capacity(g.len());
            for (vi, gv) in block.v.iter_mut().zip(g.data()) {
                let gi = gv.as_f64() * pre;
                *vi = beta2 * *vi + (1.0 - beta2) * (gi * gi + eps);
                let vhat = *vi / correction;
                inst.push(if vhat > 0.0 { gi / vhat.sqrt() } else { 0.0 });
            }
            let norm = inst.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > block_clip {
                let s = block_clip / norm;
                inst.iter_mut().for_each(|x| *x *= s);
            }
            let clipped = inst.iter().map(|x| x * x).sum::<f64>().sqrt();
            self.last_inst_norms.push((name.clone(), clipped));
            let step_size = lr * self.policy.multiplier(name);
            for ((w, ui), ii) in p.data_mut().iter_mut().zip(block.u.iter_mut()).zip(&inst) {
                *ui = beta1 * *ui + (1.0 - beta1) * ii;
                let wf = w.as_f64();
                *w = T::of(wf - step_size * (*ui + weight_decay * wf));
            }
        }
        self.steps = t;
        Ok(StepStats { lr, grad_norm })
    }

    fn steps_taken(&self) -> u64 {
        self.steps
    }

    fn state(&self) -> StateRecords {
        let mut m = StateRecords::new();
        m.insert("opt.step".into(), Tensor::scalar(self.steps as f64));
        for (name, b) in &self.blocks {
            m.insert(format!("opt.{name}.v"), slot_tensor(&b.shape, &b.v));
            m.insert(format!("opt.{name}.u"), slot_tensor(&b.shape, &b.u));
        }
        m
    }

    fn load_state(&mut self, records: &StateRecords) -> Result<()> {
        self.steps = read_step(records)?;
        self.blocks.clear();
        for key in records.keys() {
            let Some(name) = key.strip_prefix("opt.").and_then(|k| k.strip_suffix(".v")) else {
                continue;
            };
            let shape = records[key].shape().to_vec();
            let len = records[key].len();
            self.blocks.insert(
                name.to_string(),
                Block {
                    v: read_slot(records, name, "v", len)?,
                    u: read_slot(records, name, "u", len)?,
                    shape,
                },
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(name: &str, v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::from_f64([1], &[v]).unwrap());
        p
    }

    fn grads_of(name: &str, v: &[f64]) -> Grads<f64> {
        let mut g = Grads::new();
        g.insert(name.to_string(), Tensor::from_f64([v.len()], v).unwrap());
        g
    }

    #[test]
    fn hand_trace_of_first_step() {
        let cfg = AfmConfig {
            global_clip: None,
            weight_decay: 0.0,
            ..AfmConfig::default()
        };
        let mut opt = AfmOptimizer::new(cfg, LrSchedule::constant(1.0), MuParamPolicy::uniform()).unwrap();
        let mut p = scalar_store("w", 0.0);
        opt.step(&mut p, &grads_of("w", &[2.0])).unwrap();
        let vhat = opt.second_moment("w").unwrap()[0] / (1.0 - 0.95);
        assert!((vhat - 4.0).abs() < 1e-12);
        assert!((opt.momentum("w").unwrap()[0] - 0.05).abs() < 1e-12);
        assert!((p.get("w").unwrap().item() - -0.05).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AfmConfig {
            weight_decay: 0.0,
            ..AfmConfig::default()
        };
        let mut opt = AfmOptimizer::new(cfg, LrSchedule::constant(0.1), MuParamPolicy::uniform()).unwrap();
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap());
        let before = p.clone();
        opt.step(&mut p, &grads_of("w", &[0.0; 3])).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.momentum("w").unwrap(), &[0.0; 3]);
    }

    #[test]
    fn decoupled_decay_term() {
        let mut opt =
            AfmOptimizer::new(AfmConfig::default(), LrSchedule::constant(0.01), MuParamPolicy::uniform()).unwrap();
        let mut p = scalar_store("w", 3.0);
        opt.step(&mut p, &grads_of("w", &[0.0])).unwrap();
        let delta = p.get("w").unwrap().item() - 3.0;
        let expected = -0.01 * 3.16e-4 * 3.0;
        assert!((delta - expected).abs() < 1e-9 * expected.abs());
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut opt =
            AfmOptimizer::new(AfmConfig::default(), LrSchedule::constant(0.01), MuParamPolicy::uniform()).unwrap();
        let mut p = scalar_store("layers.0.wq", 1.0);
        let err = opt.step(&mut p, &grads_of("layers.0.wq", &[f64::NAN])).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref block } if block == "layers.0.wq"));
    }

    #[test]
    fn state_round_trip() {
        let mut opt =
            AfmOptimizer::new(AfmConfig::default(), LrSchedule::constant(0.01), MuParamPolicy::uniform()).unwrap();
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        Optimizer::<f64>::step(&mut opt, &mut p, &grads_of("w", &[0.3, -0.1])).unwrap();
        let mut fresh =
            AfmOptimizer::new(AfmConfig::default(), LrSchedule::constant(0.01), MuParamPolicy::uniform()).unwrap();
        Optimizer::<f64>::load_state(&mut fresh, &Optimizer::<f64>::state(&opt)).unwrap();
        assert_eq!(fresh, AfmOptimizer { last_inst_norms: Vec::new(), ..opt });
    }
}
