//! Next-token training and evaluation loops shared by every stage.

use crate::error::{Error, Result};
use crate::model::{loss, Dropout, ForwardCtx, Model, ParamVars};
use crate::optim::{Optimizer, StepStats};
use crate::tensor::{Scalar, Tape, Var};

/// Splits each sequence into its input prefix and shifted targets.
pub fn shift(seqs: &[Vec<u32>]) -> Result<(Vec<&[u32]>, Vec<usize>)> {
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut targets = Vec::new();
    for s in seqs {
        if s.len() < 2 {
            return Err(Error::Invalid(format!("sequence of {} tokens has no next-token target", s.len())));
        }
        inputs.push(&s[..s.len() - 1]);
        targets.extend(s[1..].iter().map(|&t| t as usize));
    }
    Ok((inputs, targets))
}

/// Mean next-token loss over `seqs`, optionally weighted per target.
pub fn lm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    vars: &ParamVars,
    seqs: &[Vec<u32>],
    weights: Option<&[f64]>,
    ctx: &ForwardCtx,
) -> Result<Var> {
    let (inputs, targets) = shift(seqs)?;
    let logits = model.forward(tape, vars, &inputs, ctx)?;
    loss::cross_entropy(tape, logits, &targets, weights)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub stats: StepStats,
}

/// One optimizer step on the mean next-token loss of `seqs`.
pub fn train_step<T: Scalar, O: Optimizer<T> + ?Sized>(
    model: &mut Model<T>,
    opt: &mut O,
    seqs: &[Vec<u32>],
    dropout: Option<Dropout>,
) -> Result<StepReport> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let ctx = ForwardCtx {
        dropout,
        ..Default::default()
    };
    let l = lm_loss(&mut tape, model, &vars, seqs, None, &ctx)?;
    let loss = tape.value(l).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite { block: "loss".into() });
    }
    tape.backward(l)?;
    let grads = vars.grads(&tape);
    let stats = opt.step(&mut model.params, &grads)?;
    Ok(StepReport { loss, stats })
}

/// Token-weighted mean next-token loss, evaluated `chunk` sequences at a time.
pub fn eval_loss<T: Scalar>(model: &Model<T>, seqs: &[Vec<u32>], ctx: &ForwardCtx) -> Result<f64> {
    eval_loss_weighted(model, seqs, None, ctx)
}

/// Like [`eval_loss`] with one weight per target token of each sequence.
pub fn eval_loss_weighted<T: Scalar>(
    model: &Model<T>,
    seqs: &[Vec<u32>],
    weights: Option<&[Vec<f64>]>,
    ctx: &ForwardCtx,
) -> Result<f64> {
    const CHUNK: usize = 16;
    if seqs.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    if let Some(w) = weights {
        if w.len() != seqs.len() || w.iter().zip(seqs).any(|(w, s)| w.len() + 1 != s.len()) {
            return Err(Error::Invalid("evaluation weights do not match sequence targets".into()));
        }
    }
    let (mut total, mut mass) = (0.0, 0.0);
    for (ci, chunk) in seqs.chunks(CHUNK).enumerate() {
        let w: Vec<f64> = match weights {
            Some(w) => w[ci * CHUNK..ci * CHUNK + chunk.len()].concat(),
            None => vec![1.0; chunk.iter().map(|s| s.len() - 1).sum()],
        };
        let m: f64 = w.iter().sum();
        if m == 0.0 {
            continue;
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let l = lm_loss(&mut tape, model, &vars, chunk, Some(&w), ctx)?;
        total += tape.value(l).item().as_f64() * m;
        mass += m;
    }
    if mass == 0.0 {
        return Err(Error::Invalid("evaluation weights are all zero".into()));
    }
    Ok(total / mass)
}
