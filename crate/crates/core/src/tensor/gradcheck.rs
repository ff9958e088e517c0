//! Central finite-difference oracle for tape gradients.

use super::{Tape, Tensor, Var};

/// Comparison of one input's analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradReport {
    /// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
    pub fn rel_error(&self) -> f64 {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (a, n) in self.analytic.iter().zip(&self.numeric) {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
        }
        let denom = na.max(nn).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            diff.sqrt() / denom
        }
    }

    /// Largest elementwise `|a - n| / max(|a|, |n|, floor)`.
    pub fn max_rel_error(&self, floor: f64) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

/// Builds `f` on a fresh tape for every evaluation and compares
/// `d f / d inputs[i]` against central differences with step `h`.
///
/// `f` receives one tracked variable per input and must return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Vec<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).expect("scalar output");

    let mut work = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).expect("tracked").to_f64();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work);
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work);
            work[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
        reports.push(GradReport { analytic, numeric });
    }
    reports
}
