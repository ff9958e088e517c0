use crate::data::SEP;
use crate::error::{Error, Result};
use crate::model::{Dropout, ForwardCtx, Model};
use crate::optim::Optimizer;
use crate::tensor::{Scalar, Tape};
use crate::train::{eval_loss_weighted, lm_loss, StepReport};
use serde::{Deserialize, Serialize};

pub const SFT_DROPOUT: f64 = 0.1;

/// A prompt with its demonstrated response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
}

/// `prompt ++ response ++ SEP` per demo with target weights on the response
/// and terminator only. Demos with an empty prompt or response are skipped.
pub fn sft_sequences(demos: &[Demo]) -> (Vec<Vec<u32>>, Vec<Vec<f64>>) {
    let mut seqs = Vec::new();
    let mut weights = Vec::new();
    let mut skipped = 0;
    for d in demos {
        if d.response.is_empty() || d.prompt.is_empty() {
            skipped += 1;
            continue;
        }
        let mut s = d.prompt.clone();
        s.extend(&d.response);
        s.push(SEP);
        let w = (1..s.len()).map(|j| if j >= d.prompt.len() { 1.0 } else { 0.0 }).collect();
        seqs.push(s);
        weights.push(w);
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} demonstrations with an empty prompt or response");
    }
    (seqs, weights)
}

/// One step on response-only cross-entropy. `None` when every demo was skipped.
pub fn sft_step<T: Scalar, O: Optimizer<T> + ?Sized>(
    model: &mut Model<T>,
    opt: &mut O,
    demos: &[Demo],
    dropout: Option<Dropout>,
) -> Result<Option<StepReport>> {
    let (seqs, weights) = sft_sequences(demos);
    if seqs.is_empty() {
        return Ok(None);
    }
    let flat: Vec<f64> = weights.concat();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let ctx = ForwardCtx {
        dropout,
        ..Default::default()
    };
    let l = lm_loss(&mut tape, model, &vars, &seqs, Some(&flat), &ctx)?;
    let loss = tape.value(l).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite { block: "sft loss".into() });
    }
    tape.backward(l)?;
    let stats = opt.step(&mut model.params, &vars.grads(&tape))?;
    Ok(Some(StepReport { loss, stats }))
}

/// Response-token cross-entropy without dropout.
pub fn sft_eval_loss<T: Scalar>(model: &Model<T>, demos: &[Demo]) -> Result<f64> {
    let (seqs, weights) = sft_sequences(demos);
    eval_loss_weighted(model, &seqs, Some(&weights), &ForwardCtx::default())
}
