use crate::error::{Error, Result};
use std::sync::atomic::{AtomicBool, Ordering};

static CLAMP_LOGGED: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleShape {
    Cosine,
    Constant,
}

/// Linear warmup then cosine (or flat) decay to `final_fraction * peak_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub final_fraction: f64,
    pub shape: ScheduleShape,
}

impl LrSchedule {
    pub fn cosine(peak_lr: f64, warmup_steps: u64, total_steps: u64, final_fraction: f64) -> Self {
        Self {
            peak_lr,
            warmup_steps,
            total_steps,
            final_fraction,
            shape: ScheduleShape::Cosine,
        }
    }

    pub fn constant(lr: f64) -> Self {
        Self {
            peak_lr: lr,
            warmup_steps: 0,
            total_steps: u64::MAX,
            final_fraction: 1.0,
            shape: ScheduleShape::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr {} must be finite and non-negative", self.peak_lr)));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.final_fraction) {
            return Err(Error::Config(format!("final_fraction {} outside [0, 1]", self.final_fraction)));
        }
        Ok(())
    }

    /// Learning rate at `step`; steps past `total_steps` clamp to the final value.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = if step > self.total_steps {
            if !CLAMP_LOGGED.swap(true, Ordering::Relaxed) {
                log::warn!(
                    "learning-rate step {step} beyond schedule length {}; clamping",
                    self.total_steps
                );
            }
            self.total_steps
        } else {
            step
        };
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        match self.shape {
            ScheduleShape::Constant => self.peak_lr,
            ScheduleShape::Cosine => {
                let span = self.total_steps - self.warmup_steps;
                if span == 0 {
                    return self.peak_lr;
                }
                let p = (step - self.warmup_steps) as f64 / span as f64;
                let floor = self.final_fraction;
                let c = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
                self.peak_lr * (floor + (1.0 - floor) * c)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::cosine(0.01, 100, 1000, 0.005);
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(100), 0.01);
        assert!((s.lr_at(1000) - 0.005 * 0.01).abs() < 1e-18);
        assert_eq!(s.lr_at(5000), s.lr_at(1000));
        assert!(s.lr_at(50) > 0.0 && s.lr_at(50) < 0.01);
        for t in 100..1000 {
            assert!(s.lr_at(t + 1) <= s.lr_at(t));
        }
        assert_eq!(LrSchedule::constant(0.2).lr_at(77), 0.2);
        assert!(LrSchedule::cosine(0.1, 10, 5, 0.1).validate().is_err());
    }
}
