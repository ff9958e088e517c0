//! Optimizers and learning-rate schedules.
//!
//! [`AfmOptimizer`] is RMSProp with momentum applied to per-block clipped
//! instantaneous updates. [`AdamW`] is the conventional baseline used by the
//! recipe ablation. Both consume named gradients and update a
//! [`ParamStore`](crate::ParamStore) in place.

mod adamw;
mod afm;
mod schedule;

pub use adamw::{AdamW, AdamWConfig, ADAMW_FINAL_FRACTION};
pub use afm::{AfmConfig, AfmOptimizer};
pub use schedule::{LrSchedule, ScheduleShape};

use crate::data::Stage;
use crate::error::{Error, Result};
use crate::model::{Grads, ParamStore, EMBED};
use crate::tensor::{Scalar, Tensor};
use indexmap::IndexMap;

/// Serialized optimizer state, keyed `opt.<param>.<slot>`.
pub type StateRecords = IndexMap<String, Tensor<f64>>;

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub trait Optimizer<T: Scalar> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) -> Result<StepStats>;

    /// Number of completed steps.
    fn steps_taken(&self) -> u64;

    fn state(&self) -> StateRecords;

    fn load_state(&mut self, records: &StateRecords) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    Hidden,
    Embedding,
    Gain,
}

pub fn classify(name: &str) -> ParamClass {
    if name == EMBED {
        ParamClass::Embedding
    } else if name.ends_with("norm") {
        ParamClass::Gain
    } else {
        ParamClass::Hidden
    }
}

/// Learning-rate multipliers per parameter class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuParamPolicy {
    pub hidden: f64,
    pub embedding: f64,
    pub gain: f64,
}

impl MuParamPolicy {
    /// Hidden linears scaled by `base_dim / model_dim`; everything else at 1.
    pub fn simple(base_dim: usize, model_dim: usize) -> Self {
        Self {
            hidden: base_dim as f64 / model_dim as f64,
            embedding: 1.0,
            gain: 1.0,
        }
    }

    pub fn uniform() -> Self {
        Self {
            hidden: 1.0,
            embedding: 1.0,
            gain: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("hidden", self.hidden), ("embedding", self.embedding), ("gain", self.gain)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("lr multiplier for {k} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn multiplier(&self, name: &str) -> f64 {
        match classify(name) {
            ParamClass::Hidden => self.hidden,
            ParamClass::Embedding => self.embedding,
            ParamClass::Gain => self.gain,
        }
    }
}

/// Published per-stage hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageHyper {
    pub peak_lr: f64,
    pub final_fraction: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

pub fn stage_hyper(stage: Stage) -> StageHyper {
    match stage {
        Stage::Core => StageHyper {
            peak_lr: 0.01,
            final_fraction: 0.005,
            weight_decay: 3.16e-4,
            warmup_steps: 5000,
        },
        Stage::Continued | Stage::Context => StageHyper {
            peak_lr: 3e-4,
            final_fraction: 0.001,
            weight_decay: 1e-5,
            warmup_steps: 1000,
        },
    }
}

/// Global L2 norm of `grads`. Errors on the first non-finite block.
pub(crate) fn global_norm<T: Scalar>(grads: &Grads<T>) -> Result<f64> {
    let mut total = 0.0;
    for (name, g) in grads {
        let mut s = 0.0;
        for v in g.data() {
            let x = v.as_f64();
            s += x * x;
        }
        if !s.is_finite() {
            return Err(Error::NonFinite { block: name.clone() });
        }
        total += s;
    }
    Ok(total.sqrt())
}

pub(crate) fn check_shapes<T: Scalar>(params: &ParamStore<T>, grads: &Grads<T>) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Invalid(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    Ok(())
}

/// Plain gradient descent, used for bandit policies and quick probes.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    steps: u64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr, steps: 0 }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) -> Result<StepStats> {
        check_shapes(params, grads)?;
        let grad_norm = global_norm(grads)?;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *w = T::of(w.as_f64() - self.lr * gv.as_f64());
            }
        }
        self.steps += 1;
        Ok(StepStats { lr: self.lr, grad_norm })
    }

    fn steps_taken(&self) -> u64 {
        self.steps
    }

    fn state(&self) -> StateRecords {
        let mut m = StateRecords::new();
        m.insert("opt.step".into(), Tensor::scalar(self.steps as f64));
        m
    }

    fn load_state(&mut self, records: &StateRecords) -> Result<()> {
        self.steps = read_step(records)?;
        Ok(())
    }
}

pub(crate) fn read_step(records: &StateRecords) -> Result<u64> {
    records
        .get("opt.step")
        .map(|t| t.item() as u64)
        .ok_or_else(|| Error::Checkpoint("optimizer state lacks `opt.step`".into()))
}

pub(crate) fn read_slot(records: &StateRecords, name: &str, slot: &str, len: usize) -> Result<Vec<f64>> {
    let key = format!("opt.{name}.{slot}");
    let t = records
        .get(&key)
        .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks `{key}`")))?;
    if t.len() != len {
        return Err(Error::Checkpoint(format!("`{key}` has {} values, expected {len}", t.len())));
    }
    Ok(t.data().to_vec())
}

pub(crate) fn slot_tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).expect("state mirrors parameter shape")
}
