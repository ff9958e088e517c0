use crate::data::SEP;
use crate::error::{Error, Result};
use crate::model::{generate, sample_token, ForwardCtx, Grads, Model, ParamStore, ParamVars};
use crate::optim::Optimizer;
use crate::rng::{Rng, SeedTree};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// `rm_score - beta * (logp_policy - logp_ref)` on sequence log-probs.
pub fn combined_reward(rm_score: f64, logp_policy: f64, logp_ref: f64, beta: f64) -> f64 {
    rm_score - beta * (logp_policy - logp_ref)
}

/// Each reward minus the mean of the other `K - 1`.
pub fn loo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::Invalid(format!("leave-one-out needs K >= 2 responses, got {k}")));
    }
    let total: f64 = rewards.iter().sum();
    let kf = k as f64;
    // R_i - (S - R_i)/(K-1) = (K R_i - S)/(K-1)
    Ok(rewards.iter().map(|&r| (kf * r - total) / (kf - 1.0)).collect())
}

/// Non-negative KL estimate `r - 1 - log r` from `log r`.
pub fn k3(log_ratio: f64) -> f64 {
    log_ratio.exp_m1() - log_ratio
}

/// Scores a batch of `(prompt, response)` pairs.
pub type BatchScorer<'a> = dyn FnMut(&[(&[u32], &[u32])]) -> Result<Vec<f64>> + 'a;

/// A stochastic policy whose sequence log-probabilities are differentiable.
pub trait Policy: Clone {
    type Elem: Scalar;

    fn params(&self) -> &ParamStore<Self::Elem>;
    fn params_mut(&mut self) -> &mut ParamStore<Self::Elem>;

    /// `[N]` log-probabilities of each response given its prompt.
    fn seq_logprobs(&self, tape: &mut Tape<Self::Elem>, vars: &ParamVars, items: &[(&[u32], &[u32])]) -> Result<Var>;

    fn sample(&self, prompt: &[u32], rng: &mut Rng) -> Result<Vec<u32>>;
}

/// Log-probabilities without gradient tracking.
pub fn logprobs<P: Policy>(policy: &P, items: &[(&[u32], &[u32])]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(32) {
        let mut tape = Tape::new();
        let vars = policy.params().bind(&mut tape, false);
        let lp = policy.seq_logprobs(&mut tape, &vars, chunk)?;
        out.extend(tape.value(lp).to_f64());
    }
    Ok(out)
}

/// Decoder policy sampling whole responses terminated by [`SEP`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerPolicy<T: Scalar> {
    pub model: Model<T>,
    pub max_response: usize,
    pub temperature: f64,
}

impl<T: Scalar> TransformerPolicy<T> {
    pub fn new(model: Model<T>, max_response: usize) -> Self {
        Self {
            model,
            max_response,
            temperature: 1.0,
        }
    }
}

impl<T: Scalar> Policy for TransformerPolicy<T> {
    type Elem = T;

    fn params(&self) -> &ParamStore<T> {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.model.params
    }

    fn seq_logprobs(&self, tape: &mut Tape<T>, vars: &ParamVars, items: &[(&[u32], &[u32])]) -> Result<Var> {
        let mut inputs = Vec::with_capacity(items.len());
        let mut targets = Vec::new();
        let mut owner = Vec::new();
        for (i, (x, y)) in items.iter().enumerate() {
            if x.is_empty() || y.is_empty() {
                return Err(Error::Invalid("policy log-prob needs a non-empty prompt and response".into()));
            }
            let mut s = x.to_vec();
            s.extend_from_slice(y);
            for (j, &t) in s.iter().enumerate().skip(1) {
                targets.push(t as usize);
                owner.push(if j >= x.len() { Some(i) } else { None });
            }
            s.pop();
            inputs.push(s);
        }
        let refs: Vec<&[u32]> = inputs.iter().map(|s| s.as_slice()).collect();
        let logits = self.model.forward(tape, vars, &refs, &ForwardCtx::default())?;
        let logp = tape.log_softmax(logits)?;
        let picked = tape.take_along(logp, &targets)?;
        let total = targets.len();
        let mut sel = vec![T::zero(); items.len() * total];
        for (j, o) in owner.iter().enumerate() {
            if let Some(i) = o {
                sel[i * total + j] = T::one();
            }
        }
        let sel = tape.constant(Tensor::new([items.len(), total], sel)?);
        let col = tape.reshape(picked, &[total, 1])?;
        let sums = tape.matmul(sel, col)?;
        Ok(tape.reshape(sums, &[items.len()])?)
    }

    fn sample(&self, prompt: &[u32], rng: &mut Rng) -> Result<Vec<u32>> {
        generate(&self.model, prompt, self.max_response, Some(SEP), self.temperature, rng)
    }
}

/// One-token responses from a softmax over `arms`; the prompt is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditPolicy {
    pub params: ParamStore<f64>,
}

impl BanditPolicy {
    pub const LOGITS: &'static str = "logits";

    pub fn new(logits: &[f64]) -> Result<Self> {
        let mut params = ParamStore::new();
        params.insert(Self::LOGITS, Tensor::from_f64([logits.len()], logits)?);
        Ok(Self { params })
    }

    pub fn probs(&self) -> Vec<f64> {
        let l = self.params.get(Self::LOGITS).expect("present").to_f64();
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Exact `KL(self || other)`.
    pub fn kl(&self, other: &BanditPolicy) -> f64 {
        self.probs().iter().zip(other.probs()).map(|(p, q)| if *p > 0.0 { p * (p / q).ln() } else { 0.0 }).sum()
    }
}

impl Policy for BanditPolicy {
    type Elem = f64;

    fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }

    fn seq_logprobs(&self, tape: &mut Tape<f64>, vars: &ParamVars, items: &[(&[u32], &[u32])]) -> Result<Var> {
        let l = vars.get(Self::LOGITS)?;
        let n_arms = tape.shape(l)[0];
        let row = tape.reshape(l, &[1, n_arms])?;
        let logp = tape.log_softmax(row)?;
        let rows = tape.gather(logp, &vec![0; items.len()])?;
        let arms = items
            .iter()
            .map(|(_, y)| match y {
                [a] => Ok(*a as usize),
                _ => Err(Error::Invalid(format!("bandit responses are one token, got {}", y.len()))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.take_along(rows, &arms)?)
    }

    fn sample(&self, _prompt: &[u32], rng: &mut Rng) -> Result<Vec<u32>> {
        let logits = self.params.get(Self::LOGITS)?.to_f64();
        Ok(vec![sample_token(&logits, 1.0, rng)])
    }
}

/// One sampled response with everything the update needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt_index: usize,
    pub tokens: Vec<u32>,
    pub logp_k: f64,
    pub logp_ref: f64,
    pub rm_score: f64,
    pub reward: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub prompts: Vec<Vec<u32>>,
    /// `K` rollouts per prompt.
    pub groups: Vec<Vec<Rollout>>,
}

impl RolloutBatch {
    pub fn iter(&self) -> impl Iterator<Item = &Rollout> {
        self.groups.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn items(&self) -> Vec<(&[u32], &[u32])> {
        self.iter().map(|r| (self.prompts[r.prompt_index].as_slice(), r.tokens.as_slice())).collect()
    }
}

/// Samples `k` responses per prompt from `policy` (the snapshot), scores
/// them, and fills in combined rewards and LOO advantages.
pub fn collect_rollouts<P: Policy>(
    policy: &P,
    reference: &P,
    rm: &mut BatchScorer,
    prompts: &[Vec<u32>],
    k: usize,
    beta: f64,
    rng: &mut Rng,
) -> Result<RolloutBatch> {
    if k < 2 {
        return Err(Error::Config(format!("rollouts need K >= 2 responses per prompt, got {k}")));
    }
    let mut samples = Vec::with_capacity(prompts.len() * k);
    for (pi, x) in prompts.iter().enumerate() {
        for _ in 0..k {
            samples.push((pi, policy.sample(x, rng)?));
        }
    }
    let items: Vec<(&[u32], &[u32])> = samples.iter().map(|(pi, y)| (prompts[*pi].as_slice(), y.as_slice())).collect();
    let lp_k = logprobs(policy, &items)?;
    let lp_ref = logprobs(reference, &items)?;
    let scores = rm(&items)?;
    if scores.len() != items.len() {
        return Err(Error::Invalid(format!("reward model returned {} scores for {} responses", scores.len(), items.len())));
    }
    let mut groups: Vec<Vec<Rollout>> = vec![Vec::with_capacity(k); prompts.len()];
    for (i, (pi, y)) in samples.into_iter().enumerate() {
        groups[pi].push(Rollout {
            prompt_index: pi,
            tokens: y,
            logp_k: lp_k[i],
            logp_ref: lp_ref[i],
            rm_score: scores[i],
            reward: combined_reward(scores[i], lp_k[i], lp_ref[i], beta),
            advantage: 0.0,
        });
    }
    for g in &mut groups {
        let rewards: Vec<f64> = g.iter().map(|r| r.reward).collect();
        for (r, a) in g.iter_mut().zip(loo_advantages(&rewards)?) {
            r.advantage = a;
        }
    }
    Ok(RolloutBatch {
        prompts: prompts.to_vec(),
        groups,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdlooConfig {
    /// Reference-KL weight inside the reward.
    pub beta: f64,
    /// Trust-region weight toward the snapshot.
    pub gamma: f64,
    pub k: usize,
    pub inner_epochs: usize,
    /// Samples whose importance ratio exceeds this are dropped.
    pub ratio_ceiling: f64,
}

impl Default for MdlooConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            gamma: 0.01,
            k: 8,
            inner_epochs: 1,
            ratio_ceiling: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub dropped: usize,
    pub objective: f64,
    /// Mean k3 estimate of the snapshot-to-policy KL before the last step.
    pub kl_snapshot: f64,
}

/// Gradient of `(1/N) sum_i w_i log pi(y_i | x_i)`.
pub fn policy_gradient<P: Policy>(policy: &P, items: &[(&[u32], &[u32])], weights: &[f64]) -> Result<Grads<P::Elem>> {
    let mut tape = Tape::new();
    let vars = policy.params().bind(&mut tape, true);
    let lp = policy.seq_logprobs(&mut tape, &vars, items)?;
    let w = tape.constant(Tensor::from_f64([items.len()], weights)?);
    let prod = tape.mul(lp, w)?;
    let s = tape.sum(prod);
    let obj = tape.scale(s, 1.0 / items.len() as f64);
    tape.backward(obj)?;
    Ok(vars.grads(&tape))
}

/// Descent direction of the negated sample objective
/// `mean_i [ r_i A_i - gamma * k3(log r_i) ]` with `r_i = pi / pi_k`.
pub fn mdloo_gradient<P: Policy>(policy: &P, batch: &RolloutBatch, cfg: &MdlooConfig) -> Result<(Grads<P::Elem>, UpdateStats)> {
    let items = batch.items();
    let rollouts: Vec<&Rollout> = batch.iter().collect();
    let current = logprobs(policy, &items)?;
    let mut keep = Vec::new();
    let mut kl = 0.0;
    for (i, r) in rollouts.iter().enumerate() {
        let log_ratio = current[i] - r.logp_k;
        kl += k3(log_ratio);
        if log_ratio.exp() > cfg.ratio_ceiling || !log_ratio.is_finite() {
            continue;
        }
        keep.push(i);
    }
    let mut stats = UpdateStats {
        dropped: rollouts.len() - keep.len(),
        objective: 0.0,
        kl_snapshot: kl / rollouts.len().max(1) as f64,
    };
    if stats.dropped > 0 {
        log::debug!("dropped {} rollouts above ratio ceiling {}", stats.dropped, cfg.ratio_ceiling);
    }
    if keep.is_empty() {
        return Ok((Grads::new(), stats));
    }
    let kept_items: Vec<(&[u32], &[u32])> = keep.iter().map(|&i| items[i]).collect();
    let n = keep.len();
    let mut tape = Tape::new();
    let vars = policy.params().bind(&mut tape, true);
    let lp = policy.seq_logprobs(&mut tape, &vars, &kept_items)?;
    let lpk = tape.constant(Tensor::from_f64([n], &keep.iter().map(|&i| rollouts[i].logp_k).collect::<Vec<_>>())?);
    let adv = tape.constant(Tensor::from_f64([n], &keep.iter().map(|&i| rollouts[i].advantage).collect::<Vec<_>>())?);
    let log_ratio = tape.sub(lp, lpk)?;
    let ratio = tape.exp(log_ratio);
    let pg = tape.mul(ratio, adv)?;
    let k3v = tape.sub(ratio, log_ratio)?;
    let k3v = tape.add_scalar(k3v, -1.0);
    let pen = tape.scale(k3v, cfg.gamma);
    let per = tape.sub(pg, pen)?;
    let total = tape.sum(per);
    let loss = tape.scale(total, -1.0 / n as f64);
    stats.objective = -tape.value(loss).item().as_f64();
    tape.backward(loss)?;
    Ok((vars.grads(&tape), stats))
}

/// `inner_epochs` optimizer steps on one rollout batch.
pub fn mdloo_update<P: Policy, O: Optimizer<P::Elem> + ?Sized>(
    policy: &mut P,
    batch: &RolloutBatch,
    cfg: &MdlooConfig,
    opt: &mut O,
) -> Result<UpdateStats> {
    let mut last = UpdateStats::default();
    let mut dropped = 0;
    for _ in 0..cfg.inner_epochs.max(1) {
        let (grads, stats) = mdloo_gradient(policy, batch, cfg)?;
        dropped += stats.dropped;
        last = stats;
        if !grads.is_empty() {
            opt.step(policy.params_mut(), &grads)?;
        }
    }
    last.dropped = dropped;
    Ok(last)
}

/// Per-iteration summary of an RL run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterStats {
    pub iteration: u64,
    pub mean_rm: f64,
    pub mean_reward: f64,
    /// Mean `log pi_k - log pi_ref` over the iteration's samples.
    pub kl_ref: f64,
    pub dropped: usize,
    pub objective: f64,
}

/// Full loop: snapshot, sample, score, update. Randomness for iteration `i`
/// comes from `seeds.stream("rollout", i)` so runs can resume mid-way.
#[allow(clippy::too_many_arguments)]
pub fn mdloo_train<P: Policy, O: Optimizer<P::Elem> + ?Sized>(
    policy: &mut P,
    reference: &P,
    rm: &mut BatchScorer,
    prompts: &mut dyn FnMut(u64) -> Vec<Vec<u32>>,
    cfg: &MdlooConfig,
    iterations: std::ops::Range<u64>,
    opt: &mut O,
    seeds: &SeedTree,
    on_iter: &mut dyn FnMut(&IterStats, &RolloutBatch) -> Result<()>,
) -> Result<()> {
    for it in iterations {
        let snapshot = policy.clone();
        let mut rng = seeds.stream("rollout", it);
        let batch = collect_rollouts(&snapshot, reference, rm, &prompts(it), cfg.k, cfg.beta, &mut rng)?;
        let u = mdloo_update(policy, &batch, cfg, opt)?;
        let n = batch.len() as f64;
        let stats = IterStats {
            iteration: it,
            mean_rm: batch.iter().map(|r| r.rm_score).sum::<f64>() / n,
            mean_reward: batch.iter().map(|r| r.reward).sum::<f64>() / n,
            kl_ref: batch.iter().map(|r| r.logp_k - r.logp_ref).sum::<f64>() / n,
            dropped: u.dropped,
            objective: u.objective,
        };
        on_iter(&stats, &batch)?;
    }
    Ok(())
}

/// Trace of the covariance of the REINFORCE gradient estimate at fixed
/// parameters, using LOO advantages or the raw rewards as weights.
pub fn estimator_variance<P: Policy>(
    policy: &P,
    reward: &dyn Fn(&[u32], &[u32]) -> f64,
    prompt: &[u32],
    k: usize,
    resamples: usize,
    use_loo: bool,
    seeds: &SeedTree,
) -> Result<f64> {
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(resamples);
    for s in 0..resamples {
        let mut rng = seeds.stream("variance", s as u64);
        let ys: Vec<Vec<u32>> = (0..k).map(|_| policy.sample(prompt, &mut rng)).collect::<Result<_>>()?;
        let rewards: Vec<f64> = ys.iter().map(|y| reward(prompt, y)).collect();
        let w = if use_loo { loo_advantages(&rewards)? } else { rewards };
        let items: Vec<(&[u32], &[u32])> = ys.iter().map(|y| (prompt, y.as_slice())).collect();
        let g = policy_gradient(policy, &items, &w)?;
        samples.push(g.values().flat_map(|t| t.to_f64()).collect());
    }
    let dim = samples.first().map_or(0, |v| v.len());
    let mean: Vec<f64> = (0..dim).map(|j| samples.iter().map(|v| v[j]).sum::<f64>() / resamples as f64).collect();
    Ok(samples.iter().map(|v| v.iter().zip(&mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>()).sum::<f64>() / (resamples as f64 - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Sgd;

    #[test]
    fn loo_examples() {
        let a = loo_advantages(&[1.0, 2.0, 3.0, 6.0]).unwrap();
        assert!(a[2].abs() < 1e-15);
        assert!(a.iter().sum::<f64>().abs() < 1e-12);
        assert_eq!(loo_advantages(&[0.4; 5]).unwrap(), vec![0.0; 5]);
        assert!(loo_advantages(&[1.0]).is_err());
    }

    #[test]
    fn combined_reward_examples() {
        assert!((combined_reward(1.0, 0.5, 0.0, 0.1) - 0.95).abs() < 1e-15);
        assert_eq!(combined_reward(0.3, -2.0, -2.0, 0.4), 0.3);
        assert_eq!(combined_reward(0.3, -1.0, -2.0, 0.0), 0.3);
        assert_eq!(k3(0.0), 0.0);
        assert!(k3(-0.7) > 0.0 && k3(0.7) > 0.0);
    }

    fn arm_reward(_: &[u32], y: &[u32]) -> f64 {
        if y == [0] {
            1.0
        } else {
            0.0
        }
    }

    #[test]
    fn zero_advantage_at_snapshot_is_a_fixed_point() {
        let mut p = BanditPolicy::new(&[0.3, -0.2]).unwrap();
        let before = p.clone();
        let mut rm = |items: &[(&[u32], &[u32])]| Ok(vec![0.5; items.len()]);
        let mut rng = SeedTree::new(1).stream("t", 0);
        let cfg = MdlooConfig {
            beta: 0.0,
            inner_epochs: 3,
            ..Default::default()
        };
        let batch = collect_rollouts(&before, &before, &mut rm, &[vec![1]], 8, 0.0, &mut rng).unwrap();
        mdloo_update(&mut p, &batch, &cfg, &mut Sgd::new(0.5)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_vanilla_loo_gradient() {
        let p = BanditPolicy::new(&[0.1, 0.4]).unwrap();
        let mut rm = |items: &[(&[u32], &[u32])]| Ok(items.iter().map(|(x, y)| arm_reward(x, y)).collect());
        let mut rng = SeedTree::new(2).stream("t", 0);
        let batch = collect_rollouts(&p, &p, &mut rm, &[vec![1], vec![2]], 8, 0.1, &mut rng).unwrap();
        let (g, stats) = mdloo_gradient(&p, &batch, &MdlooConfig::default()).unwrap();
        assert_eq!(stats.dropped, 0);
        let adv: Vec<f64> = batch.iter().map(|r| r.advantage).collect();
        let reference = policy_gradient(&p, &batch.items(), &adv).unwrap();
        let a = g[BanditPolicy::LOGITS].to_f64();
        let b = reference[BanditPolicy::LOGITS].to_f64();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let cos = -dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt());
        assert!((cos - 1.0).abs() < 1e-6, "{cos}");
    }

    #[test]
    fn transformer_logprob_matches_token_sum() {
        use crate::model::ModelConfig;
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
        let p = TransformerPolicy::new(Model::<f64>::init(cfg, &SeedTree::new(4)).unwrap(), 6);
        let (x, y): (&[u32], &[u32]) = (&[5, 6, 7], &[8, 9]);
        let got = logprobs(&p, &[(x, y), (y, x)]).unwrap();
        let logits = p.model.logits(&[5, 6, 7, 8]).unwrap();
        let v = logits.cols();
        let lsm = |row: usize, t: usize| {
            let r = &logits.data()[row * v..(row + 1) * v];
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            r[t] - m - r.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
        };
        assert!((got[0] - (lsm(2, 8) + lsm(3, 9))).abs() < 1e-10);
        let mut rng = SeedTree::new(5).stream("s", 0);
        let y = p.sample(x, &mut rng).unwrap();
        assert!(!y.is_empty() && y.len() <= 6);
    }
}
