use super::lora::LoraAdapter;
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig, LrSchedule, MuParamPolicy, Optimizer, StateRecords};
use crate::rng::SeedTree;
use crate::tensor::{Scalar, Tape};
use crate::train::lm_loss;

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryConfig {
    pub rank: usize,
    pub alpha: f64,
    pub steps: u64,
    pub lr: f64,
    pub warmup_steps: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 16.0,
            steps: 200,
            lr: 2e-3,
            warmup_steps: 10,
        }
    }
}

/// Stepwise recovery-adapter training, so callers can checkpoint between
/// steps.
#[derive(Debug, Clone)]
pub struct RecoveryTrainer {
    adapter: LoraAdapter,
    opt: AdamW,
}

impl RecoveryTrainer {
    pub fn new(base: &ModelConfig, cfg: &RecoveryConfig, seeds: &SeedTree) -> Result<Self> {
        if cfg.steps == 0 {
            return Err(Error::Config("recovery needs at least one step".into()));
        }
        let adam = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let schedule = LrSchedule::cosine(cfg.lr, cfg.warmup_steps, cfg.steps, 0.1);
        Ok(Self {
            adapter: LoraAdapter::new(base, cfg.rank, cfg.alpha, seeds)?,
            opt: AdamW::new(adam, schedule, MuParamPolicy::uniform())?,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        Optimizer::<f32>::steps_taken(&self.opt)
    }

    /// One update on `seqs`; returns the loss before the update.
    pub fn step<T: Scalar>(&mut self, base: &Model<T>, seqs: &[Vec<u32>]) -> Result<f64> {
        let mut tape = Tape::<T>::new();
        let base_vars = base.bind(&mut tape, false);
        let (ad, ad_vars) = self.adapter.bind(&mut tape, true);
        let ctx = ForwardCtx {
            adapters: Some(&ad),
            ..Default::default()
        };
        let l = lm_loss(&mut tape, base, &base_vars, seqs, None, &ctx)?;
        let loss = tape.value(l).item().as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite { block: "recovery loss".into() });
        }
        tape.backward(l)?;
        if let Some((name, _)) = base_vars.iter().find(|(_, &v)| tape.grad(v).is_some()) {
            return Err(Error::Invalid(format!("gradient reached frozen base weight `{name}`")));
        }
        let grads = ad_vars.grads(&tape).into_iter().map(|(k, g)| (k, g.cast::<f32>())).collect();
        self.opt.step(&mut self.adapter.params, &grads)?;
        Ok(loss)
    }

    /// The adapter at training precision.
    pub fn adapter(&self) -> &LoraAdapter {
        &self.adapter
    }

    /// The adapter rounded to its stored precision.
    pub fn finish(&self) -> LoraAdapter {
        self.adapter.rounded()
    }

    /// Adapter weights and optimizer moments, for checkpointing.
    pub fn state(&self) -> StateRecords {
        let mut out: StateRecords = self.adapter.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect();
        out.extend(Optimizer::<f32>::state(&self.opt));
        out
    }

    pub fn load_state(&mut self, records: &StateRecords) -> Result<()> {
        for (name, slot) in self.adapter.params.iter_mut() {
            let t = records.get(name).ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t.cast();
        }
        let rest: StateRecords = records.iter().filter(|(k, _)| k.starts_with("opt.")).map(|(k, v)| (k.clone(), v.clone())).collect();
        Optimizer::<f32>::load_state(&mut self.opt, &rest)
    }
}

/// Trains a LoRA adapter on top of a frozen (typically dequantized) model with
/// the next-token objective. Returns the adapter rounded to its stored
/// precision and the per-step losses.
pub fn train_recovery_adapter<T: Scalar>(
    base: &Model<T>,
    cfg: &RecoveryConfig,
    seeds: &SeedTree,
    mut batch: impl FnMut(u64) -> Result<Vec<Vec<u32>>>,
) -> Result<(LoraAdapter, Vec<f64>)> {
    let mut trainer = RecoveryTrainer::new(&base.config, cfg, seeds)?;
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        losses.push(trainer.step(base, &batch(step)?)?);
    }
    Ok((trainer.finish(), losses))
}

