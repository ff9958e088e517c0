//! Token-level losses built from tape primitives.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Weighted mean next-token cross-entropy of `logits` `[N, V]` against hard targets.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
    weights: Option<&[f64]>,
) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    let picked = tape.take_along(logp, targets)?;
    weighted_mean_neg(tape, picked, weights)
}

/// Weighted mean cross-entropy against per-row target distributions `[N, V]`.
pub fn soft_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: Tensor<T>,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    let t = tape.constant(targets);
    let prod = tape.mul(logp, t)?;
    let rows = tape.sum_axis(prod, 1)?;
    weighted_mean_neg(tape, rows, weights)
}

fn weighted_mean_neg<T: Scalar>(tape: &mut Tape<T>, per_row: Var, weights: Option<&[f64]>) -> Result<Var> {
    let n = tape.shape(per_row)[0];
    match weights {
        None => {
            let s = tape.sum(per_row);
            Ok(tape.scale(s, -1.0 / n as f64))
        }
        Some(w) => {
            if w.len() != n {
                return Err(Error::Invalid(format!("{} loss weights for {n} rows", w.len())));
            }
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Invalid("loss weights sum to zero".into()));
            }
            let wt = tape.constant(Tensor::from_f64([n], w)?);
            let prod = tape.mul(per_row, wt)?;
            let s = tape.sum(prod);
            Ok(tape.scale(s, -1.0 / total))
        }
    }
}
