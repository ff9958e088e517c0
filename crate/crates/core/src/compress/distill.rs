use crate::error::{Error, Result};
use crate::model::{loss, ForwardCtx, Model};
use crate::optim::Optimizer;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::train::{shift, StepReport};

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Sparse target: `w_teacher` on the teacher's top-1 token and the rest on
/// the true label.
pub fn distill_target(true_label: usize, teacher_logits: &[f64], w_teacher: f64) -> Result<Vec<(usize, f64)>> {
    if !(0.0..=1.0).contains(&w_teacher) {
        return Err(Error::Invalid(format!("teacher weight {w_teacher} outside [0, 1]")));
    }
    if teacher_logits.is_empty() || true_label >= teacher_logits.len() {
        return Err(Error::Invalid(format!(
            "label {true_label} out of range for {} teacher logits",
            teacher_logits.len()
        )));
    }
    let top = argmax(teacher_logits);
    Ok(if top == true_label {
        vec![(top, 1.0)]
    } else {
        vec![(top, w_teacher), (true_label, 1.0 - w_teacher)]
    })
}

/// Dense `[N, V]` target rows for a block of teacher logits.
pub fn dense_distill_targets<T: Scalar>(targets: &[usize], teacher_logits: &Tensor<f64>, w_teacher: f64) -> Result<Tensor<T>> {
    let v = teacher_logits.cols();
    if teacher_logits.rows() != targets.len() {
        return Err(Error::Invalid(format!(
            "{} teacher rows for {} targets",
            teacher_logits.rows(),
            targets.len()
        )));
    }
    let mut data = vec![T::zero(); targets.len() * v];
    for (i, (&t, row)) in targets.iter().zip(teacher_logits.data().chunks(v)).enumerate() {
        for (j, p) in distill_target(t, row, w_teacher)? {
            data[i * v + j] = data[i * v + j] + T::of(p);
        }
    }
    Ok(Tensor::new([targets.len(), v], data)?)
}

/// Cross-entropy of `logits` against the distillation mixture.
pub fn distill_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
    teacher_logits: &Tensor<f64>,
    w_teacher: f64,
) -> Result<Var> {
    let dense = dense_distill_targets(targets, teacher_logits, w_teacher)?;
    loss::soft_cross_entropy(tape, logits, dense, None)
}

/// Teacher logits for the shifted inputs of `seqs`, stacked.
fn teacher_logits<U: Scalar>(teacher: &Model<U>, inputs: &[&[u32]]) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let vars = teacher.bind(&mut tape, false);
    let out = teacher.forward(&mut tape, &vars, inputs, &ForwardCtx::default())?;
    Ok(tape.value(out).cast())
}

/// One student step on the distillation objective.
pub fn distill_step<T: Scalar, U: Scalar, O: Optimizer<T> + ?Sized>(
    student: &mut Model<T>,
    teacher: &Model<U>,
    opt: &mut O,
    seqs: &[Vec<u32>],
    w_teacher: f64,
) -> Result<StepReport> {
    let (inputs, targets) = shift(seqs)?;
    let tl = teacher_logits(teacher, &inputs)?;
    let mut tape = Tape::new();
    let vars = student.bind(&mut tape, true);
    let logits = student.forward(&mut tape, &vars, &inputs, &ForwardCtx::default())?;
    let l = distill_loss(&mut tape, logits, &targets, &tl, w_teacher)?;
    let loss = tape.value(l).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite { block: "loss".into() });
    }
    tape.backward(l)?;
    let stats = opt.step(&mut student.params, &vars.grads(&tape))?;
    Ok(StepReport { loss, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn target_examples() {
        let mut logits = vec![0.0; 10];
        logits[7] = 3.0;
        assert_eq!(distill_target(5, &logits, 0.9).unwrap(), vec![(7, 0.9), (5, 1.0 - 0.9)]);
        assert_eq!(distill_target(7, &logits, 0.9).unwrap(), vec![(7, 1.0)]);
        assert!(distill_target(5, &logits, 1.5).is_err());
    }

    #[test]
    fn zero_teacher_weight_is_plain_cross_entropy() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (n, v) = (12, 9);
        let lg: Vec<f64> = (0..n * v).map(|_| r.random_range(-2.0..2.0)).collect();
        let tl: Vec<f64> = (0..n * v).map(|_| r.random_range(-2.0..2.0)).collect();
        let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..v)).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([n, v], lg).unwrap());
        let a = distill_loss(&mut tape, x, &targets, &Tensor::new([n, v], tl).unwrap(), 0.0).unwrap();
        let b = loss::cross_entropy(&mut tape, x, &targets, None).unwrap();
        assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-7);
    }
}
