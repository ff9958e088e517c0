use crate::common::{cfg_err, init_model, load_model, optimizer, BoxedOptimizer, OptSpec, StepLoop, StepOut};
use crate::error::{CliResult, CliError};
use crate::run::{stamp, FINAL_CHECKPOINT};
use crate::Ctx;
use lmstack_core::align::{
    committee_rejection_sample, mdloo_train, sft_eval_loss, sft_step, Demo, MdlooConfig, RewardModel, Sampler, ScriptedSkillModel,
    TransformerPolicy, TwoSkillTask,
};
use lmstack_core::data::{decode_string, encode, random_response, synth_preferences, PreferenceExample, SyntheticScorer, TrueScorer};
use lmstack_core::model::Dropout;
use lmstack_core::{Checkpoint, Model};
use rand::Rng;
use serde::Deserialize;
use serde_json::json;
use std::io::BufRead;
use std::path::Path;

fn read_jsonl<T: for<'de> Deserialize<'de>>(key: &str, path: &Path) -> CliResult<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| cfg_err(key, format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| cfg_err(key, format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

fn task(ctx: &Ctx) -> CliResult<TwoSkillTask> {
    Ok(TwoSkillTask {
        max_operand: ctx.cfg.positive("committee.max_operand")? as u32,
        word_len: ctx.cfg.positive("committee.word_len")?,
    })
}

#[derive(Deserialize)]
struct TextDemo {
    prompt: String,
    response: String,
}

/// Demonstrations from `sft.data`, else answers to the two-skill task.
fn demos(ctx: &Ctx) -> CliResult<Vec<Demo>> {
    if let Some(p) = ctx.cfg.path("sft.data") {
        let rows: Vec<TextDemo> = read_jsonl("sft.data", &p)?;
        return Ok(rows
            .into_iter()
            .map(|d| Demo {
                prompt: encode(d.prompt.as_bytes()),
                response: encode(d.response.as_bytes()),
            })
            .collect());
    }
    let t = task(ctx)?;
    let mut rng = ctx.seeds.stream("sft/demos", 0);
    (0..ctx.cfg.positive("sft.demos")?)
        .map(|_| {
            let prompt = t.prompt(&mut rng);
            Ok(Demo {
                response: t.answer(&prompt)?,
                prompt,
            })
        })
        .collect()
}

fn model_opt_checkpoint(model: &Model<f32>, opt: &BoxedOptimizer) -> Checkpoint {
    let mut ck = Checkpoint::from_model(model);
    ck.insert_optimizer_state(&opt.state());
    ck
}

fn finish_model(ctx: &Ctx, run: &crate::run::RunDir, model: &Model<f32>, steps: u64) -> CliResult<()> {
    let mut ck = Checkpoint::from_model(model);
    stamp(&mut ck, ctx.id(), steps, run.tokens_seen);
    run.save(FINAL_CHECKPOINT, &ck)?;
    Ok(())
}

pub fn sft(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let mut all = demos(ctx)?;
    if all.len() < 2 {
        return Err(cfg_err("sft.data", "need at least two demonstrations"));
    }
    let held = all.split_off(all.len() - (all.len() / 10).max(1));
    let steps = cfg.positive("sft.steps")? as u64;
    let bs = cfg.positive("sft.batch_size")?;
    let p = cfg.f64("sft.dropout");
    if !(0.0..1.0).contains(&p) {
        return Err(cfg_err("sft.dropout", format!("{p} outside [0, 1)")));
    }
    let spec = OptSpec {
        kind: cfg.str("sft.optim").to_string(),
        peak_lr: cfg.f64("sft.lr"),
        warmup: steps / 10,
        total: steps,
        final_fraction: 0.1,
        weight_decay: cfg.opt_f64("optim.weight_decay"),
        source: "sft".into(),
    };
    let resume = ctx.resume()?;
    let model = match &resume {
        Some(r) => r.ck.model().map_err(|e| r.err(e))?,
        None => init_model(cfg, &ctx.seeds)?,
    };
    let mut opt = optimizer(cfg, "sft.optim", &spec, model.config.model_dim)?;
    let done = resume.as_ref().map_or(0, |r| r.step).min(steps);
    if let Some(r) = &resume {
        opt.load_state(&r.ck.optimizer_state()).map_err(|e| r.err(e))?;
    }
    let before = sft_eval_loss(&model, &held)?;
    let mut run = ctx.open(resume.as_ref())?;
    let seeds = ctx.seeds;
    let mut state = (model, opt);
    StepLoop {
        run: &mut run,
        command_id: ctx.id(),
        every: ctx.every(),
    }
    .run(
        &mut state,
        "sft",
        0,
        done..steps,
        |(m, o), s| {
            let mut rng = seeds.stream("sft/batch", s);
            let batch: Vec<Demo> = (0..bs).map(|_| all[rng.random_range(0..all.len())].clone()).collect();
            let dropout = (p > 0.0).then(|| Dropout { p, seed: seeds.child("sft/dropout").seed() ^ s });
            let n: usize = batch.iter().map(|d| d.prompt.len() + d.response.len() + 1).sum();
            match sft_step(m, &mut **o, &batch, dropout)? {
                Some(r) => Ok(StepOut::new(r.loss).lr(r.stats.lr, r.stats.grad_norm).tokens(n)),
                None => Err(CliError::Config {
                    key: "sft.data".into(),
                    reason: "a batch had no usable demonstrations".into(),
                }),
            }
        },
        |(m, o)| Ok(model_opt_checkpoint(m, o)),
    )?;
    let (model, _) = state;
    let after = sft_eval_loss(&model, &held)?;
    finish_model(ctx, &run, &model, steps)?;
    run.finish(&json!({
        "command": "sft",
        "steps": steps,
        "train_demos": all.len(),
        "heldout_demos": held.len(),
        "heldout_loss_before": before,
        "heldout_loss_after": after,
        "checkpoint": run.path(FINAL_CHECKPOINT),
    }))
}

/// Preference pairs from `reward.data`, else from the synthetic scorer.
fn preferences(ctx: &Ctx) -> CliResult<Vec<PreferenceExample>> {
    if let Some(p) = ctx.cfg.path("reward.data") {
        let rows: Vec<PreferenceExample> = read_jsonl("reward.data", &p)?;
        for (i, r) in rows.iter().enumerate() {
            r.validate().map_err(|e| cfg_err("reward.data", format!("row {}: {e}", i + 1)))?;
        }
        return Ok(rows);
    }
    let prompts: Vec<Vec<u32>> = (0..ctx.cfg.positive("reward.prompts")?)
        .map(|i| encode(format!("p{}:", i % 37).as_bytes()))
        .collect();
    let k = ctx.cfg.usize("reward.responses_per_prompt");
    if k < 2 {
        return Err(cfg_err("reward.responses_per_prompt", "need at least 2"));
    }
    let mut rng = ctx.seeds.stream("prefs", 0);
    Ok(synth_preferences(&SyntheticScorer::default(), &prompts, |_, r| random_response(r, 3, 14), k, &mut rng)?)
}

pub fn train_reward(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let mut train = preferences(ctx)?;
    let frac = cfg.f64("reward.test_fraction");
    if !(0.0..1.0).contains(&frac) {
        return Err(cfg_err("reward.test_fraction", format!("{frac} outside [0, 1)")));
    }
    let test = train.split_off(train.len() - (train.len() as f64 * frac).round() as usize);
    if train.is_empty() {
        return Err(cfg_err("reward.data", "no training pairs"));
    }
    let steps = cfg.u64("reward.steps");
    let bs = cfg.positive("reward.batch_size")?;
    let spec = OptSpec {
        kind: cfg.str("reward.optim").to_string(),
        peak_lr: cfg.f64("reward.lr"),
        warmup: 10.min(steps / 10),
        total: steps,
        final_fraction: 0.1,
        weight_decay: Some(cfg.opt_f64("optim.weight_decay").unwrap_or(0.0)),
        source: "reward".into(),
    };
    let resume = ctx.resume()?;
    let rm = match &resume {
        Some(r) => RewardModel::from_checkpoint(&r.ck).map_err(|e| r.err(e))?,
        None => RewardModel::new(
            init_model(cfg, &ctx.seeds.child("backbone"))?,
            cfg.positive("reward.mlp_hidden")?,
            cfg.f64("reward.lambda"),
            &ctx.seeds.child("heads"),
        )?,
    };
    let mut opt = optimizer(cfg, "reward.optim", &spec, rm.model.config.model_dim)?;
    let done = resume.as_ref().map_or(0, |r| r.step).min(steps);
    if let Some(r) = &resume {
        opt.load_state(&r.ck.optimizer_state()).map_err(|e| r.err(e))?;
    }
    let mut run = ctx.open(resume.as_ref())?;
    let chunks: Vec<&[PreferenceExample]> = train.chunks(bs).collect();
    let mut state = (rm, opt);
    StepLoop {
        run: &mut run,
        command_id: ctx.id(),
        every: ctx.every(),
    }
    .run(
        &mut state,
        "reward",
        0,
        done..steps,
        |(rm, o), s| {
            let batch = chunks[(s as usize) % chunks.len()];
            let loss = rm.train_step(&mut **o, batch)?;
            let n: usize = batch.iter().map(|e| 2 * e.x.len() + e.y_c.len() + e.y_r.len()).sum();
            Ok(StepOut::new(loss).tokens(n))
        },
        |(rm, o)| {
            let mut ck = rm.to_checkpoint();
            ck.insert_optimizer_state(&o.state());
            Ok(ck)
        },
    )?;
    let (rm, _) = state;
    let train_acc = rm.accuracy(&train)?;
    let test_acc = if test.is_empty() { None } else { Some(rm.accuracy(&test)?) };
    let mut ck = rm.to_checkpoint();
    stamp(&mut ck, ctx.id(), steps, run.tokens_seen);
    run.save(FINAL_CHECKPOINT, &ck)?;
    run.finish(&json!({
        "command": "train-reward",
        "steps": steps,
        "train_pairs": train.len(),
        "test_pairs": test.len(),
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "lambda": rm.lambda,
        "checkpoint": run.path(FINAL_CHECKPOINT),
    }))
}

pub fn rlhf(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let iterations = cfg.u64("rlhf.iterations");
    let per_iter = cfg.positive("rlhf.prompts_per_iter")?;
    let mcfg = MdlooConfig {
        beta: cfg.f64("rlhf.beta"),
        gamma: cfg.f64("rlhf.gamma"),
        k: cfg.usize("rlhf.k"),
        inner_epochs: cfg.positive("rlhf.inner_epochs")?,
        ratio_ceiling: cfg.f64("rlhf.ratio_ceiling"),
    };
    if mcfg.k < 2 {
        return Err(cfg_err("rlhf.k", "need at least 2 responses per prompt"));
    }
    let rm = match cfg.path("rlhf.reward") {
        Some(p) => {
            let ck = crate::run::load_checkpoint(&p)?;
            Some(RewardModel::<f32>::from_checkpoint(&ck).map_err(|e| crate::error::checkpoint_err(&p, e))?)
        }
        None => None,
    };
    let max_response = cfg.positive("rlhf.max_response")?;
    let temperature = cfg.f64("rlhf.temperature");
    if !(temperature > 0.0) {
        return Err(cfg_err("rlhf.temperature", "must be positive"));
    }
    let mut reference = TransformerPolicy::new(init_model(cfg, &ctx.seeds)?, max_response);
    reference.temperature = temperature;
    let spec = OptSpec {
        kind: cfg.str("rlhf.optim").to_string(),
        peak_lr: cfg.f64("rlhf.lr"),
        warmup: 0,
        total: iterations,
        final_fraction: 0.1,
        weight_decay: Some(cfg.opt_f64("optim.weight_decay").unwrap_or(0.0)),
        source: "rlhf".into(),
    };
    let mut opt = optimizer(cfg, "rlhf.optim", &spec, reference.model.config.model_dim)?;
    let resume = ctx.resume()?;
    let mut policy = reference.clone();
    if let Some(r) = &resume {
        policy.model = r.ck.model().map_err(|e| r.err(e))?;
        if policy.model.config != reference.model.config {
            return Err(r.err("policy shape differs from the reference model"));
        }
        opt.load_state(&r.ck.optimizer_state()).map_err(|e| r.err(e))?;
    }
    let done = resume.as_ref().map_or(0, |r| r.step).min(iterations);
    let mut run = ctx.open(resume.as_ref())?;
    let scorer = SyntheticScorer::default();
    let mut score = |items: &[(&[u32], &[u32])]| -> lmstack_core::Result<Vec<f64>> {
        match &rm {
            Some(rm) => rm.scores(items),
            None => Ok(items.iter().map(|(x, y)| scorer.score(x, y)).collect()),
        }
    };
    let seeds = ctx.seeds;
    let rl_seeds = seeds.child("rlhf");
    let mut last = None;
    let mut state = (policy, opt);
    StepLoop {
        run: &mut run,
        command_id: ctx.id(),
        every: ctx.every(),
    }
    .run(
        &mut state,
        "rlhf",
        0,
        done..iterations,
        |(pol, o), it| {
            let mut prompts = |i: u64| {
                let mut rng = seeds.stream("rlhf/prompts", i);
                (0..per_iter).map(|_| encode(format!("p{}:", rng.random_range(0..37u32)).as_bytes())).collect()
            };
            let mut stats = None;
            let mut tokens = 0;
            mdloo_train(pol, &reference, &mut score, &mut prompts, &mcfg, it..it + 1, &mut **o, &rl_seeds, &mut |st, b| {
                tokens = b.iter().map(|r| r.tokens.len()).sum::<usize>();
                stats = Some(st.clone());
                Ok(())
            })?;
            let st = stats.expect("one iteration ran");
            last = Some(st.clone());
            Ok(StepOut::new(-st.objective)
                .tokens(tokens)
                .field("mean_rm", st.mean_rm)
                .field("mean_reward", st.mean_reward)
                .field("kl", st.kl_ref)
                .field("dropped", st.dropped as u64))
        },
        |(pol, o)| Ok(model_opt_checkpoint(&pol.model, o)),
    )?;
    let (policy, _) = state;
    finish_model(ctx, &run, &policy.model, iterations)?;
    run.finish(&json!({
        "command": "rlhf",
        "iterations": iterations,
        "reward": if rm.is_some() { "reward-model" } else { "synthetic-scorer" },
        "last": last,
        "checkpoint": run.path(FINAL_CHECKPOINT),
    }))
}

/// Committee members: checkpoints from `committee.policies`, else two
/// scripted experts with mirrored skills.
fn committee(ctx: &Ctx, t: &TwoSkillTask) -> CliResult<Vec<Box<dyn Sampler>>> {
    let cfg = &ctx.cfg;
    let paths = cfg.list("committee.policies");
    if paths.is_empty() {
        let (a, b) = (cfg.f64("committee.math_skill"), cfg.f64("committee.writing_skill"));
        for (k, v) in [("committee.math_skill", a), ("committee.writing_skill", b)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(cfg_err(k, format!("{v} outside [0, 1]")));
            }
        }
        return Ok(vec![
            Box::new(ScriptedSkillModel { name: "math-expert".into(), task: t.clone(), math_skill: a, writing_skill: b }),
            Box::new(ScriptedSkillModel { name: "writing-expert".into(), task: t.clone(), math_skill: b, writing_skill: a }),
        ]);
    }
    let max_len = cfg.positive("committee.max_len")?;
    paths
        .iter()
        .map(|p| {
            let m = load_model(Path::new(p))?;
            Ok(Box::new(TransformerPolicy::new(m, max_len)) as Box<dyn Sampler>)
        })
        .collect()
}

pub fn committee_rs(ctx: &Ctx) -> CliResult<()> {
    ctx.one_pass_resume()?;
    let cfg = &ctx.cfg;
    let t = task(ctx)?;
    let members = committee(ctx, &t)?;
    let n = cfg.positive("committee.prompts")?;
    let per = cfg.positive("committee.samples_per_model")?;
    let max_len = cfg.positive("committee.max_len")?;
    let mut rng = ctx.seeds.stream("committee/prompts", 0);
    let prompts: Vec<Vec<u32>> = (0..n).map(|_| t.prompt(&mut rng)).collect();
    let mut score = |x: &[u32], y: &[u32]| Ok(t.true_score(x, y));
    // Dropped prompts count as zero so every mean is over the same prompts.
    let mean = |recs: &[lmstack_core::align::RsRecord]| recs.iter().map(|r| r.score).sum::<f64>() / n as f64;
    let refs: Vec<&dyn Sampler> = members.iter().map(|m| m.as_ref()).collect();
    let run = ctx.open_one_pass()?;
    let picked = committee_rejection_sample(&refs, &mut score, &prompts, per, max_len, &mut ctx.seeds.stream("committee/rs", 0))?;
    let mut singles = serde_json::Map::new();
    for (i, m) in refs.iter().enumerate() {
        let recs = committee_rejection_sample(&[*m], &mut score, &prompts, per, max_len, &mut ctx.seeds.stream("committee/single", i as u64))?;
        singles.insert(m.name(), json!(mean(&recs)));
    }
    run.write_jsonl(
        "rs.jsonl",
        picked.iter().map(|r| {
            json!({
                "prompt": decode_string(&r.prompt),
                "response": decode_string(&r.response),
                "source": r.source,
                "score": r.score,
            })
        }),
    )?;
    let mut sources = serde_json::Map::new();
    for r in &picked {
        let e = sources.entry(r.source.clone()).or_insert(json!(0));
        *e = json!(e.as_u64().unwrap_or(0) + 1);
    }
    run.finish(&json!({
        "command": "committee-rs",
        "prompts": n,
        "kept": picked.len(),
        "committee_mean_score": mean(&picked),
        "single_mean_score": singles,
        "sources": sources,
    }))
}
