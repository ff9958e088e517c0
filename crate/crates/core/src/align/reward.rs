use crate::checkpoint::Checkpoint;
use crate::data::{Level, PreferenceExample, GRADE_CLASSES, SEP};
use crate::error::{Error, Result};
use crate::model::{loss, ForwardCtx, Model, ParamVars};
use crate::optim::Optimizer;
use crate::rng::SeedTree;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};

/// Single-sided grade heads, in the order of [`crate::data::Grades`].
pub const GRADE_HEADS: [&str; 4] = ["if", "verb", "truth", "harm"];

/// Default weight of the grading regularizer.
pub const REWARD_LAMBDA: f64 = 0.1;

/// Target preference probability for a level.
pub fn level_probability(level: Level) -> f64 {
    match level {
        Level::Significantly => 0.95,
        Level::Better => 0.85,
        Level::Slightly => 0.75,
        Level::Negligibly => 0.65,
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `-p log s(d) - (1 - p) log s(-d)`.
pub fn ranking_loss(delta: f64, p: f64) -> f64 {
    -p * log_sigmoid(delta) - (1.0 - p) * log_sigmoid(-delta)
}

/// Decoder backbone plus a scalar reward head and four 3-class MLP grade
/// heads, all reading the final embedding of the last token.
///
/// Head parameters live next to the backbone's in `model.params` under
/// `rm.value.*` and `rm.<grade>.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel<T: Scalar> {
    pub model: Model<T>,
    pub lambda: f64,
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy)]
pub struct RewardLoss {
    pub total: Var,
    pub ranking: Var,
    pub regularizer: Var,
}

fn normal_tensor<T: Scalar>(shape: [usize; 2], std: f64, seeds: &SeedTree, label: &str) -> Result<Tensor<T>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = seeds.stream(label, 0);
    Ok(Tensor::new(shape, (0..shape[0] * shape[1]).map(|_| T::of(dist.sample(&mut rng))).collect())?)
}

impl<T: Scalar> RewardModel<T> {
    pub const VALUE_W: &'static str = "rm.value.w";
    pub const VALUE_B: &'static str = "rm.value.b";

    /// Attaches freshly initialized heads to `backbone`.
    pub fn new(mut backbone: Model<T>, mlp_hidden: usize, lambda: f64, seeds: &SeedTree) -> Result<Self> {
        let d = backbone.config.model_dim;
        let p = &mut backbone.params;
        p.insert(Self::VALUE_W, normal_tensor([d, 1], 1.0 / (d as f64).sqrt(), seeds, "rm/value")?);
        p.insert(Self::VALUE_B, Tensor::zeros([1])?);
        for g in GRADE_HEADS {
            p.insert(format!("rm.{g}.w1"), normal_tensor([d, mlp_hidden], 1.0 / (d as f64).sqrt(), seeds, &format!("rm/{g}/1"))?);
            p.insert(format!("rm.{g}.b1"), Tensor::zeros([mlp_hidden])?);
            p.insert(
                format!("rm.{g}.w2"),
                normal_tensor([mlp_hidden, GRADE_CLASSES], 1.0 / (mlp_hidden as f64).sqrt(), seeds, &format!("rm/{g}/2"))?,
            );
            p.insert(format!("rm.{g}.b2"), Tensor::zeros([GRADE_CLASSES])?);
        }
        Ok(Self { model: backbone, lambda })
    }

    /// Last-token embeddings `[B, D]` of `x ++ y ++ SEP` per pair.
    fn embed(&self, tape: &mut Tape<T>, vars: &ParamVars, pairs: &[(&[u32], &[u32])]) -> Result<Var> {
        let seqs: Vec<Vec<u32>> = pairs
            .iter()
            .map(|(x, y)| {
                let mut s = x.to_vec();
                s.extend_from_slice(y);
                s.push(SEP);
                s
            })
            .collect();
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        let h = self.model.hidden(tape, vars, &refs, &ForwardCtx::default())?;
        let mut last = Vec::with_capacity(seqs.len());
        let mut end = 0;
        for s in &seqs {
            end += s.len();
            last.push(end - 1);
        }
        Ok(tape.gather(h, &last)?)
    }

    fn affine(tape: &mut Tape<T>, vars: &ParamVars, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = tape.matmul(x, vars.get(w)?)?;
        Ok(tape.add(y, vars.get(b)?)?)
    }

    /// `[B]` rewards and one `[B, 3]` logit block per grade head.
    fn heads(&self, tape: &mut Tape<T>, vars: &ParamVars, e: Var) -> Result<(Var, Vec<Var>)> {
        let b = tape.shape(e)[0];
        let r = Self::affine(tape, vars, e, Self::VALUE_W, Self::VALUE_B)?;
        let r = tape.reshape(r, &[b])?;
        let mut grades = Vec::with_capacity(4);
        for g in GRADE_HEADS {
            let h = Self::affine(tape, vars, e, &format!("rm.{g}.w1"), &format!("rm.{g}.b1"))?;
            let h = tape.silu(h)?;
            grades.push(Self::affine(tape, vars, h, &format!("rm.{g}.w2"), &format!("rm.{g}.b2"))?);
        }
        Ok((r, grades))
    }

    /// Rewards of `(prompt, response)` pairs, evaluated in chunks.
    pub fn scores(&self, pairs: &[(&[u32], &[u32])]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(32) {
            let mut tape = Tape::new();
            let vars = self.model.bind(&mut tape, false);
            let e = self.embed(&mut tape, &vars, chunk)?;
            let (r, _) = self.heads(&mut tape, &vars, e)?;
            out.extend(tape.value(r).to_f64());
        }
        Ok(out)
    }

    /// Soft-label ranking loss plus `lambda` times the grading cross-entropies,
    /// averaged over the batch.
    pub fn loss(&self, tape: &mut Tape<T>, vars: &ParamVars, batch: &[PreferenceExample]) -> Result<RewardLoss> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty preference batch".into()));
        }
        for ex in batch {
            ex.validate()?;
        }
        let n = batch.len();
        let mut pairs: Vec<(&[u32], &[u32])> = batch.iter().map(|e| (e.x.as_slice(), e.y_c.as_slice())).collect();
        pairs.extend(batch.iter().map(|e| (e.x.as_slice(), e.y_r.as_slice())));
        let e = self.embed(tape, vars, &pairs)?;
        let (r, grades) = self.heads(tape, vars, e)?;
        let rc = tape.slice(r, 0, 0, n)?;
        let rr = tape.slice(r, 0, n, n)?;
        let delta = tape.sub(rc, rr)?;
        let delta = tape.reshape(delta, &[n, 1])?;
        let zeros = tape.constant(Tensor::zeros([n, 1])?);
        let logits = tape.concat(&[delta, zeros], 1)?;
        let mut target = Vec::with_capacity(2 * n);
        for ex in batch {
            let p = level_probability(ex.level);
            target.extend([T::of(p), T::of(1.0 - p)]);
        }
        let ranking = loss::soft_cross_entropy(tape, logits, Tensor::new([n, 2], target)?, None)?;

        let mut regu: Option<Var> = None;
        for (h, g) in grades.into_iter().enumerate() {
            let labels: Vec<usize> = batch
                .iter()
                .map(|e| e.grades_c[h] as usize)
                .chain(batch.iter().map(|e| e.grades_r[h] as usize))
                .collect();
            let ce = loss::cross_entropy(tape, g, &labels, None)?;
            regu = Some(match regu {
                None => ce,
                Some(acc) => tape.add(acc, ce)?,
            });
        }
        // Mean over 2n rows times 2 is the per-example sum over both responses.
        let regularizer = tape.scale(regu.expect("four heads"), 2.0);
        let weighted = tape.scale(regularizer, self.lambda);
        let total = tape.add(ranking, weighted)?;
        Ok(RewardLoss {
            total,
            ranking,
            regularizer,
        })
    }

    /// One optimizer step on a preference batch; returns the total loss.
    pub fn train_step<O: Optimizer<T> + ?Sized>(&mut self, opt: &mut O, batch: &[PreferenceExample]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, true);
        let l = self.loss(&mut tape, &vars, batch)?;
        let v = tape.value(l.total).item().as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite { block: "reward loss".into() });
        }
        tape.backward(l.total)?;
        opt.step(&mut self.model.params, &vars.grads(&tape))?;
        Ok(v)
    }

    /// Fraction of pairs where the chosen response outscores the rejected one.
    pub fn accuracy(&self, data: &[PreferenceExample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Invalid("empty preference set".into()));
        }
        let mut pairs: Vec<(&[u32], &[u32])> = data.iter().map(|e| (e.x.as_slice(), e.y_c.as_slice())).collect();
        pairs.extend(data.iter().map(|e| (e.x.as_slice(), e.y_r.as_slice())));
        let s = self.scores(&pairs)?;
        let n = data.len();
        Ok((0..n).filter(|&i| s[i] > s[n + i]).count() as f64 / n as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.set_meta("rm.lambda", self.lambda);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = ck.model::<T>()?;
        for (name, rec) in &ck.records {
            if name.starts_with("rm.") {
                model.params.insert(name.clone(), rec.to_tensor());
            }
        }
        model.params.get(Self::VALUE_W)?;
        Ok(Self {
            model,
            lambda: ck.meta("rm.lambda")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn level_probabilities() {
        let p: Vec<f64> = Level::ALL.iter().map(|&l| level_probability(l)).collect();
        assert_eq!(p, vec![0.65, 0.75, 0.85, 0.95]);
        for l in Level::ALL {
            assert!((ranking_loss(0.0, level_probability(l)) - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn certain_label_is_bradley_terry() {
        for d in [-30.0, -3.2, -0.1, 0.0, 0.7, 5.0, 40.0] {
            let btl = -(1.0 / (1.0 + f64::exp(-d))).ln();
            assert!((ranking_loss(d, 1.0) - btl).abs() < 1e-9, "{d}");
            assert!((ranking_loss(d, 0.8) - ranking_loss(-d, 0.2)).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_loss_matches_scalar_formula() {
        let cfg = ModelConfig {
            model_dim: 16,
            head_dim: 8,
            n_query_heads: 2,
            n_kv_heads: 1,
            n_layers: 1,
            vocab_size: crate::data::VOCAB_SIZE,
            ffn_hidden_dim: 24,
            rope_base: 10_000.0,
            max_seq_len: 32,
            norm_eps: 1e-5,
        };
        let seeds = SeedTree::new(3);
        let rm = RewardModel::new(Model::<f64>::init(cfg, &seeds).unwrap(), 8, 0.0, &seeds).unwrap();
        let ex = vec![
            PreferenceExample {
                x: vec![1, 2],
                y_c: vec![97, 97],
                y_r: vec![120],
                level: Level::Better,
                grades_c: [2, 1, 1, 2],
                grades_r: [0, 0, 0, 1],
            },
            PreferenceExample {
                x: vec![3],
                y_c: vec![46],
                y_r: vec![120, 120],
                level: Level::Negligibly,
                grades_c: [2, 0, 0, 2],
                grades_r: [0, 0, 0, 0],
            },
        ];
        let mut tape = Tape::new();
        let vars = rm.model.bind(&mut tape, false);
        let l = rm.loss(&mut tape, &vars, &ex).unwrap();
        let s = rm.scores(&[(&[1, 2], &[97, 97]), (&[1, 2], &[120]), (&[3], &[46]), (&[3], &[120, 120])]).unwrap();
        let want = 0.5 * (ranking_loss(s[0] - s[1], 0.85) + ranking_loss(s[2] - s[3], 0.65));
        assert!((tape.value(l.total).item() - want).abs() < 1e-12);
    }
}
