use crate::common::{cfg_err, eval_components, init_model, load_data, mixture, optimizer, BoxedOptimizer, OptSpec, StepLoop, StepOut};
use crate::error::CliResult;
use crate::run::{stamp, FINAL_CHECKPOINT};
use crate::Ctx;
use indexmap::IndexMap;
use lmstack_core::data::{sample_batch, stage_preset, MixtureSpec, Stage, BASE_ROPE};
use lmstack_core::train::train_step;
use lmstack_core::{Checkpoint, Model};
use serde_json::json;

struct StagePlan {
    stage: Stage,
    steps: u64,
    seq_len: usize,
    batch: usize,
    rope_base: f64,
    mixture: MixtureSpec,
    opt: OptSpec,
}

struct State {
    model: Model<f32>,
    opt: BoxedOptimizer,
    /// `eval.<stage>.<component>` for every finished stage.
    evals: IndexMap<String, f64>,
}

impl State {
    fn checkpoint(&self, with_opt: bool) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        if with_opt {
            ck.insert_optimizer_state(&self.opt.state());
        }
        for (k, v) in &self.evals {
            ck.set_meta(k, *v);
        }
        ck
    }
}

fn plans(ctx: &Ctx, data: &crate::common::Data) -> CliResult<Vec<StagePlan>> {
    let cfg = &ctx.cfg;
    let names = cfg.list("pretrain.stages");
    if names.is_empty() {
        return Err(cfg_err("pretrain.stages", "no stages listed"));
    }
    let base_len = cfg.positive("train.seq_len")?;
    let base_batch = cfg.positive("train.batch_size")?;
    let max_len = cfg.usize("model.max_seq_len");
    let mut out: Vec<StagePlan> = Vec::new();
    for n in &names {
        let stage = Stage::parse(n).map_err(|e| cfg_err("pretrain.stages", e))?;
        if out.iter().any(|p| p.stage == stage) {
            return Err(cfg_err("pretrain.stages", format!("`{n}` listed twice")));
        }
        let preset = stage_preset(stage);
        let seq_len = base_len * preset.seq_len_multiplier;
        if seq_len > max_len {
            return Err(cfg_err(
                "train.seq_len",
                format!("{n} stage runs at {seq_len} tokens, above model.max_seq_len {max_len}"),
            ));
        }
        let key = |k: &str| format!("stage.{n}.{k}");
        let steps = cfg.u64(&key("steps"));
        out.push(StagePlan {
            stage,
            steps,
            seq_len,
            // Longer sequences at a fixed token budget per step.
            batch: (base_batch / preset.seq_len_multiplier).max(1),
            rope_base: cfg.f64("model.rope_base") * preset.rope_base / BASE_ROPE,
            mixture: mixture(cfg, stage, data)?,
            opt: OptSpec {
                kind: cfg.str("optim.kind").to_string(),
                peak_lr: cfg.f64(&key("peak_lr")),
                warmup: cfg.u64(&key("warmup_steps")),
                total: steps,
                final_fraction: cfg.f64(&key("final_fraction")),
                weight_decay: Some(cfg.f64(&key("weight_decay"))),
                source: format!("stage.{n}"),
            },
        });
    }
    Ok(out)
}

pub fn run(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let data = load_data(cfg, &ctx.seeds)?;
    let plans = plans(ctx, &data)?;
    let eval_tags = cfg.list("eval.components");
    let eval_len = cfg.positive("eval.max_len")?;
    let resume = ctx.resume()?;
    let mut model = match &resume {
        Some(r) => r.ck.model().map_err(|e| r.err(e))?,
        None => init_model(cfg, &ctx.seeds)?,
    };
    let dim = model.config.model_dim;
    // Validate every stage's optimizer before any compute.
    for p in &plans {
        optimizer(cfg, "optim.kind", &p.opt, dim)?;
    }
    let total: u64 = plans.iter().map(|p| p.steps).sum();
    let done = resume.as_ref().map_or(0, |r| r.step);
    if done > total {
        return Err(resume.as_ref().expect("done > 0").err(format!("at step {done}, past this run's {total} steps")));
    }
    let mut evals = IndexMap::new();
    if let Some(r) = &resume {
        for (k, _) in r.ck.records.iter().filter(|(k, _)| k.starts_with("meta.eval.")) {
            let k = k.trim_start_matches("meta.");
            evals.insert(k.to_string(), r.ck.meta(k).map_err(|e| r.err(e))?);
        }
    }
    model.config.rope_base = plans[0].rope_base;
    let mut run = ctx.open(resume.as_ref())?;
    let mut state = State {
        opt: optimizer(cfg, "optim.kind", &plans[0].opt, dim)?,
        model,
        evals,
    };

    let mut offset = 0;
    for p in &plans {
        let name = p.stage.name();
        let end = offset + p.steps;
        if done >= end && state.evals.keys().any(|k| k.starts_with(&format!("eval.{name}."))) {
            offset = end;
            continue;
        }
        let start = done.saturating_sub(offset).min(p.steps);
        state.model.config.rope_base = p.rope_base;
        state.opt = optimizer(cfg, "optim.kind", &p.opt, dim)?;
        if start > 0 && start < p.steps {
            let r = resume.as_ref().expect("mid-stage start implies resume");
            state.opt.load_state(&r.ck.optimizer_state()).map_err(|e| r.err(e))?;
        }
        log::info!("stage {name}: steps {start}..{} seq_len {} batch {} rope_base {}", p.steps, p.seq_len, p.batch, p.rope_base);
        let seeds = ctx.seeds;
        let corpus = &data.train;
        StepLoop {
            run: &mut run,
            command_id: ctx.id(),
            every: ctx.every(),
        }
        .run(
            &mut state,
            name,
            offset,
            start..p.steps,
            |st, s| {
                let b = sample_batch(corpus, &p.mixture, p.seq_len, p.batch, &mut seeds.stream(&format!("batch/{name}"), s))?;
                let r = train_step(&mut st.model, &mut *st.opt, &b.sequences, None)?;
                let n: usize = b.sequences.iter().map(Vec::len).sum();
                Ok(StepOut::new(r.loss).lr(r.stats.lr, r.stats.grad_norm).tokens(n))
            },
            |st| Ok(st.checkpoint(true)),
        )?;
        for (tag, l) in eval_components(&state.model, &data.eval, &eval_tags, eval_len)? {
            state.evals.insert(format!("eval.{name}.{tag}"), l);
        }
        let mut rec = crate::run::MetricsRecord::new(end, name);
        for (k, v) in &state.evals {
            if k.starts_with(&format!("eval.{name}.")) {
                rec = rec.field(k, *v);
            }
        }
        run.log(rec)?;
        offset = end;
    }

    let mut ck = state.checkpoint(false);
    stamp(&mut ck, ctx.id(), total, run.tokens_seen);
    run.save(FINAL_CHECKPOINT, &ck)?;
    run.finish(&json!({
        "command": "pretrain",
        "steps": total,
        "tokens_seen": run.tokens_seen,
        "rope_base": state.model.config.rope_base,
        "eval": state.evals,
        "checkpoint": run.path(FINAL_CHECKPOINT),
    }))
}
