use super::{check_shapes, global_norm, read_slot, read_step, slot_tensor, LrSchedule, MuParamPolicy, Optimizer, StateRecords, StepStats};
use crate::error::{Error, Result};
use crate::model::{Grads, ParamStore};
use crate::tensor::{Scalar, Tensor};
use indexmap::IndexMap;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub global_clip: Option<f64>,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    /// Baseline of the recipe ablation.
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-15,
            global_clip: Some(1.0),
            weight_decay: 1e-4,
        }
    }
}

/// Final learning-rate fraction of the baseline schedule.
pub const ADAMW_FINAL_FRACTION: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    shape: Vec<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
    pub policy: MuParamPolicy,
    steps: u64,
    moments: IndexMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, schedule: LrSchedule, policy: MuParamPolicy) -> Result<Self> {
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config("AdamW betas must lie in [0, 1)".into()));
        }
        schedule.validate()?;
        policy.validate()?;
        Ok(Self {
            config,
            schedule,
            policy,
            steps: 0,
            moments: IndexMap::new(),
        })
    }
}

impl<T: Scalar> Optimizer<T> for AdamW {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) -> Result<StepStats> {
        check_shapes(params, grads)?;
        let grad_norm = global_norm(grads)?;
        let pre = match self.config.global_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let t = self.steps + 1;
        let lr = self.schedule.lr_at(t - 1);
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let ti = t.min(i32::MAX as u64) as i32;
        let (c1, c2) = (1.0 - beta1.powi(ti), 1.0 - beta2.powi(ti));
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                shape: p.shape().to_vec(),
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            let step_size = lr * self.policy.multiplier(name);
            for (((w, m), v), gv) in p.data_mut().iter_mut().zip(mo.m.iter_mut()).zip(mo.v.iter_mut()).zip(g.data()) {
                let gi = gv.as_f64() * pre;
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let upd = (*m / c1) / ((*v / c2).sqrt() + eps);
                let wf = w.as_f64();
                *w = T::of(wf - step_size * (upd + weight_decay * wf));
            }
        }
        self.steps = t;
        Ok(StepStats { lr, grad_norm })
    }

    fn steps_taken(&self) -> u64 {
        self.steps
    }

    fn state(&self) -> StateRecords {
        let mut r = StateRecords::new();
        r.insert("opt.step".into(), Tensor::scalar(self.steps as f64));
        for (name, mo) in &self.moments {
            r.insert(format!("opt.{name}.m"), slot_tensor(&mo.shape, &mo.m));
            r.insert(format!("opt.{name}.v"), slot_tensor(&mo.shape, &mo.v));
        }
        r
    }

    fn load_state(&mut self, records: &StateRecords) -> Result<()> {
        self.steps = read_step(records)?;
        self.moments.clear();
        for key in records.keys() {
            let Some(name) = key.strip_prefix("opt.").and_then(|k| k.strip_suffix(".m")) else {
                continue;
            };
            let len = records[key].len();
            self.moments.insert(
                name.to_string(),
                Moments {
                    shape: records[key].shape().to_vec(),
                    m: read_slot(records, name, "m", len)?,
                    v: read_slot(records, name, "v", len)?,
                },
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            global_clip: None,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, LrSchedule::constant(0.1), MuParamPolicy::uniform()).unwrap();
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::from_f64([2], &[0.0, 0.0]).unwrap());
        let mut g = Grads::new();
        g.insert("w".into(), Tensor::from_f64([2], &[3.0, -0.01]).unwrap());
        opt.step(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] + 0.1).abs() < 1e-12 && (w[1] - 0.1).abs() < 1e-12);
    }
}
