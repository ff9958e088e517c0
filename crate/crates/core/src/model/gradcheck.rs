//! Finite-difference check of a full model's loss gradient.

use super::loss::cross_entropy;
use super::{ForwardCtx, Model, ParamStore};
use crate::error::Result;
use crate::rng::SeedTree;
use crate::tensor::Tape;
use rand::seq::index::sample;
use rand::Rng;

/// Outcome for one parameter block.
#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub name: String,
    pub coords_checked: usize,
    /// Normwise relative error over the checked coordinates.
    pub coord_rel_error: f64,
    /// Worst relative error of directional derivatives along random directions
    /// spanning the whole block.
    pub dir_rel_error: f64,
}

impl BlockCheck {
    pub fn max_error(&self) -> f64 {
        self.coord_rel_error.max(self.dir_rel_error)
    }
}

fn loss_grads(model: &Model<f64>, params: &ParamStore<f64>, seqs: &[Vec<u32>]) -> Result<super::Grads<f64>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let inputs: Vec<&[u32]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
    let targets: Vec<usize> = seqs.iter().flat_map(|s| s[1..].iter().map(|&t| t as usize)).collect();
    let logits = super::forward::hidden(&mut tape, &model.config, &vars, &inputs, &ForwardCtx::default())
        .and_then(|h| super::forward::unembed(&mut tape, &vars, h))?;
    let loss = cross_entropy(&mut tape, logits, &targets, None)?;
    tape.backward(loss)?;
    Ok(vars.grads(&tape))
}

fn loss_only(model: &Model<f64>, params: &ParamStore<f64>, seqs: &[Vec<u32>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let inputs: Vec<&[u32]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
    let targets: Vec<usize> = seqs.iter().flat_map(|s| s[1..].iter().map(|&t| t as usize)).collect();
    let h = super::forward::hidden(&mut tape, &model.config, &vars, &inputs, &ForwardCtx::default())?;
    let logits = super::forward::unembed(&mut tape, &vars, h)?;
    let loss = cross_entropy(&mut tape, logits, &targets, None)?;
    Ok(tape.value(loss).item())
}

fn rel(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = na.max(nn);
    if d == 0.0 {
        0.0
    } else {
        diff / d
    }
}

/// Compares the next-token cross-entropy gradient of every block against
/// central differences with step `h`.
///
/// Blocks with at most `max_coords` entries are checked entry by entry; larger
/// blocks use a seeded sample of `max_coords` entries. Every block also gets
/// `directions` directional-derivative checks along random unit vectors.
pub fn check_model_gradients(
    model: &Model<f64>,
    seqs: &[Vec<u32>],
    h: f64,
    max_coords: usize,
    directions: usize,
    seed: u64,
) -> Result<Vec<BlockCheck>> {
    let grads = loss_grads(model, &model.params, seqs)?;
    let seeds = SeedTree::new(seed);
    let mut work = model.params.clone();
    let mut out = Vec::new();
    for (bi, name) in model.params.names().cloned().collect::<Vec<_>>().into_iter().enumerate() {
        let g = grads[&name].to_f64();
        let n = g.len();
        let mut rng = seeds.stream("gradcheck", bi as u64);
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_coords).into_vec()
        };
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for &j in &coords {
            let x0 = work.get(&name)?.data()[j];
            work.get_mut(&name)?.data_mut()[j] = x0 + h;
            let up = loss_only(model, &work, seqs)?;
            work.get_mut(&name)?.data_mut()[j] = x0 - h;
            let down = loss_only(model, &work, seqs)?;
            work.get_mut(&name)?.data_mut()[j] = x0;
            a.push(g[j]);
            num.push((up - down) / (2.0 * h));
        }
        let mut dir_err: f64 = 0.0;
        for _ in 0..directions {
            let mut d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            d.iter_mut().for_each(|x| *x /= norm);
            let base = model.params.get(&name)?.clone();
            let shift = |sign: f64, w: &mut ParamStore<f64>| -> Result<()> {
                let t = w.get_mut(&name)?;
                for ((v, b), dv) in t.data_mut().iter_mut().zip(base.data()).zip(&d) {
                    *v = b + sign * h * dv;
                }
                Ok(())
            };
            shift(1.0, &mut work)?;
            let up = loss_only(model, &work, seqs)?;
            shift(-1.0, &mut work)?;
            let down = loss_only(model, &work, seqs)?;
            *work.get_mut(&name)? = base;
            let numeric = (up - down) / (2.0 * h);
            let analytic: f64 = g.iter().zip(&d).map(|(x, y)| x * y).sum();
            dir_err = dir_err.max(rel(&[analytic], &[numeric]));
        }
        out.push(BlockCheck {
            name,
            coords_checked: coords.len(),
            coord_rel_error: rel(&a, &num),
            dir_rel_error: dir_err,
        });
    }
    Ok(out)
}
