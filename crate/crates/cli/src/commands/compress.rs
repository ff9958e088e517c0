use crate::common::{cfg_err, eval_all, init_model, load_data, load_model, mixture, optimizer, Data, OptSpec, StepLoop, StepOut};
use crate::error::CliResult;
use crate::run::{load_checkpoint, stamp, FINAL_CHECKPOINT};
use crate::Ctx;
use lmstack_core::compress::{
    distill_step, effective_bpw, plan_mixed, prune, quantize as quantize_model, LoraAdapter, LutPrecision, MaskTrainConfig, MaskTrainer,
    QuantPlan, RecoveryConfig, RecoveryTrainer,
};
use lmstack_core::data::{sample_batch, MixtureSpec, Stage};
use lmstack_core::optim::StateRecords;
use lmstack_core::{Checkpoint, Model, ModelConfig, SeedTree};
use serde_json::json;

/// Every record of `ck` whose name starts with one of `prefixes`, as f64.
pub(crate) fn records(ck: &Checkpoint, prefixes: &[&str]) -> StateRecords {
    ck.records
        .iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
        .map(|(k, r)| (k.clone(), r.to_tensor()))
        .collect()
}

/// Batches of `seq_len` tokens from the core mixture.
pub(crate) struct Batches<'a> {
    pub data: &'a Data,
    pub mixture: MixtureSpec,
    pub seq_len: usize,
    pub batch: usize,
    pub seeds: SeedTree,
}

impl<'a> Batches<'a> {
    pub fn new(ctx: &Ctx, data: &'a Data, seeds: SeedTree) -> CliResult<Self> {
        Ok(Self {
            mixture: mixture(&ctx.cfg, Stage::Core, data)?,
            seq_len: ctx.cfg.positive("train.seq_len")?,
            batch: ctx.cfg.positive("train.batch_size")?,
            data,
            seeds,
        })
    }

    pub fn get(&self, label: &str, step: u64) -> CliResult<Vec<Vec<u32>>> {
        Ok(sample_batch(&self.data.train, &self.mixture, self.seq_len, self.batch, &mut self.seeds.stream(label, step))?.sequences)
    }
}

fn tokens(seqs: &[Vec<u32>]) -> usize {
    seqs.iter().map(Vec::len).sum()
}

pub fn distill(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let teacher = load_model(&cfg.required_path("distill.teacher")?)?;
    let w = cfg.f64("distill.w_teacher");
    if !(0.0..=1.0).contains(&w) {
        return Err(cfg_err("distill.w_teacher", format!("{w} outside [0, 1]")));
    }
    let steps = cfg.u64("distill.steps");
    let spec = OptSpec {
        kind: cfg.str("optim.kind").to_string(),
        peak_lr: cfg.f64("distill.peak_lr"),
        warmup: cfg.u64("stage.core.warmup_steps").min(steps / 10),
        total: steps,
        final_fraction: cfg.f64("stage.core.final_fraction"),
        weight_decay: cfg.opt_f64("optim.weight_decay"),
        source: "distill".into(),
    };
    let data = load_data(cfg, &ctx.seeds)?;
    let batches = Batches::new(ctx, &data, ctx.seeds)?;
    let resume = ctx.resume()?;
    let student = match &resume {
        Some(r) => r.ck.model().map_err(|e| r.err(e))?,
        None => init_model(cfg, &ctx.seeds.child("student"))?,
    };
    if student.config.vocab_size != teacher.config.vocab_size {
        return Err(cfg_err("distill.teacher", "teacher and student vocabularies differ"));
    }
    let mut opt = optimizer(cfg, "optim.kind", &spec, student.config.model_dim)?;
    if let Some(r) = &resume {
        opt.load_state(&r.ck.optimizer_state()).map_err(|e| r.err(e))?;
    }
    let done = resume.as_ref().map_or(0, |r| r.step).min(steps);
    let mut run = ctx.open(resume.as_ref())?;
    let mut state = (student, opt);
    StepLoop {
        run: &mut run,
        command_id: ctx.id(),
        every: ctx.every(),
    }
    .run(
        &mut state,
        "distill",
        0,
        done..steps,
        |(m, o), s| {
            let b = batches.get("distill/batch", s)?;
            let r = distill_step(m, &teacher, &mut **o, &b, w)?;
            Ok(StepOut::new(r.loss).lr(r.stats.lr, r.stats.grad_norm).tokens(tokens(&b)))
        },
        |(m, o)| {
            let mut ck = Checkpoint::from_model(m);
            ck.insert_optimizer_state(&o.state());
            Ok(ck)
        },
    )?;
    let (student, _) = state;
    let tags = cfg.list("eval.components");
    let len = cfg.positive("eval.max_len")?;
    let (te, se) = (eval_all(&teacher, &data.eval, &tags, len)?, eval_all(&student, &data.eval, &tags, len)?);
    let mut ck = Checkpoint::from_model(&student);
    stamp(&mut ck, ctx.id(), steps, run.tokens_seen);
    run.save(FINAL_CHECKPOINT, &ck)?;
    run.finish(&json!({
        "command": "distill",
        "steps": steps,
        "teacher_eval": te,
        "student_eval": se,
        "student_params": student.config.param_counts().total(),
        "checkpoint": run.path(FINAL_CHECKPOINT),
    }))
}

pub fn prune_cmd(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let teacher = load_model(&cfg.required_path("init")?)?;
    let k = cfg.positive("prune.keep")?;
    let f = teacher.config.ffn_hidden_dim;
    if k > f {
        return Err(cfg_err("prune.keep", format!("{k} exceeds the model's ffn width {f}")));
    }
    let mcfg = MaskTrainConfig {
        steps: cfg.u64("prune.mask_steps"),
        lr: cfg.f64("prune.mask_lr"),
        temperature_start: cfg.f64("prune.temperature_start"),
        temperature_end: cfg.f64("prune.temperature_end"),
    };
    let mut trainer = MaskTrainer::new(&teacher.config, k, &mcfg).map_err(|e| cfg_err("prune", e))?;
    let data = load_data(cfg, &ctx.seeds)?;
    let batches = Batches::new(ctx, &data, ctx.seeds)?;
    let resume = ctx.resume()?;
    if let Some(r) = &resume {
        trainer.load_state(&records(&r.ck, &["mask.", "opt."])).map_err(|e| r.err(e))?;
    }
    let done = resume.as_ref().map_or(0, |r| r.step).min(mcfg.steps);
    let mut run = ctx.open(resume.as_ref())?;
    let steps = if k == f { 0 } else { mcfg.steps };
    StepLoop {
        run: &mut run,
        command_id: ctx.id(),
        every: ctx.every(),
    }
    .run(
        &mut trainer,
        "prune",
        0,
        done.min(steps)..steps,
        |t, s| {
            let b = batches.get("prune/batch", s)?;
            let loss = t.step(&teacher, &b)?;
            Ok(StepOut::new(loss).tokens(tokens(&b)).field("temperature", mcfg.temperature(s)))
        },
        |t| {
            let mut ck = Checkpoint::new();
            ck.insert_optimizer_state(&t.state());
            Ok(ck)
        },
    )?;
    let mask = trainer.mask();
    let pruned = prune(&teacher, &mask)?;
    let tags = cfg.list("eval.components");
    let len = cfg.positive("eval.max_len")?;
    let kept: Vec<Vec<usize>> = mask
        .hard()
        .iter()
        .map(|l| l.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect())
        .collect();
    run.write_json("mask.json", &json!({ "k": k, "kept_units": kept }))?;
    let mut ck = Checkpoint::from_model(&pruned);
    stamp(&mut ck, ctx.id(), mcfg.steps, run.tokens_seen);
    run.save(FINAL_CHECKPOINT, &ck)?;
    run.finish(&json!({
        "command": "prune",
        "keep": k,
        "params_before": teacher.config.param_counts().total(),
        "params_after": pruned.config.param_counts().total(),
        "eval_before": eval_all(&teacher, &data.eval, &tags, len)?,
        "eval_after": eval_all(&pruned, &data.eval, &tags, len)?,
        "checkpoint": run.path(FINAL_CHECKPOINT),
    }))
}

/// Every projection at `bits` with the `quant.*` palettization settings.
pub(crate) fn base_plan(ctx: &Ctx, mcfg: &ModelConfig, bits: u8) -> CliResult<QuantPlan> {
    let cfg = &ctx.cfg;
    let mut plan = QuantPlan::uniform(mcfg, bits);
    plan.group_size = cfg.positive("quant.group_size")?;
    plan.kmeans_iters = cfg.positive("quant.kmeans_iters")?;
    plan.embedding_int8 = cfg.bool("quant.embedding_int8");
    plan.lut = match cfg.str("quant.lut") {
        "f16" => LutPrecision::F16,
        "f32" => LutPrecision::F32,
        other => return Err(cfg_err("quant.lut", format!("`{other}` is not f16 or f32"))),
    };
    Ok(plan)
}

/// Uniform plan at `quant.bits`, or a mixed plan when `quant.target_bpw` is set.
fn quant_plan(ctx: &Ctx, model: &Model<f32>, seeds: &SeedTree) -> CliResult<QuantPlan> {
    let bits = ctx.cfg.usize("quant.bits");
    if !matches!(bits, 2 | 4) {
        return Err(cfg_err("quant.bits", format!("{bits} bits; only 2 and 4 are supported")));
    }
    let plan = base_plan(ctx, &model.config, bits as u8)?;
    let target = ctx.cfg.f64("quant.target_bpw");
    if target > 0.0 {
        return Ok(plan_mixed(model, &plan, target, seeds).map_err(|e| cfg_err("quant.target_bpw", e))?.0);
    }
    Ok(plan)
}

pub fn quantize(ctx: &Ctx) -> CliResult<()> {
    ctx.one_pass_resume()?;
    let model = load_model(&ctx.cfg.required_path("init")?)?;
    let seeds = ctx.seeds.child("quantize");
    let plan = quant_plan(ctx, &model, &seeds)?;
    let rep = effective_bpw(&plan, &model.config)?;
    let mut run = ctx.open_one_pass()?;
    let mut ck = quantize_model(&model, &plan, &seeds)?;
    stamp(&mut ck, ctx.id(), 0, 0);
    run.save(FINAL_CHECKPOINT, &ck)?;
    let bits: serde_json::Map<_, _> = plan.bits.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    run.write_json("plan.json", &json!({ "bits": bits, "group_size": plan.group_size }))?;
    run.log(crate::run::MetricsRecord::new(0, "quantize").field("bpw", rep.projection_bpw()).field("total_bpw", rep.total_bpw()))?;
    let q = ck.model::<f32>()?;
    let data = load_data(&ctx.cfg, &ctx.seeds)?;
    let tags = ctx.cfg.list("eval.components");
    let len = ctx.cfg.positive("eval.max_len")?;
    run.finish(&json!({
        "command": "quantize",
        "projection_bpw": rep.projection_bpw(),
        "total_bpw": rep.total_bpw(),
        "two_bit_tensors": plan.bits.values().filter(|&&b| b == 2).count(),
        "eval_float": eval_all(&model, &data.eval, &tags, len)?,
        "eval_quantized": eval_all(&q, &data.eval, &tags, len)?,
        "checkpoint": run.path(FINAL_CHECKPOINT),
    }))
}

pub(crate) fn recovery_config(ctx: &Ctx) -> CliResult<RecoveryConfig> {
    let cfg = &ctx.cfg;
    let steps = cfg.positive("recover.steps")? as u64;
    let warmup_steps = cfg.u64("recover.warmup_steps");
    if warmup_steps > steps {
        return Err(cfg_err("recover.warmup_steps", format!("{warmup_steps} exceeds recover.steps {steps}")));
    }
    Ok(RecoveryConfig {
        rank: cfg.positive("recover.rank")?,
        alpha: cfg.f64("recover.alpha"),
        steps,
        lr: cfg.f64("recover.lr"),
        warmup_steps,
    })
}

pub fn recover(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let base = load_model(&cfg.required_path("init")?)?;
    let reference = cfg.path("recover.reference").map(|p| load_model(&p)).transpose()?;
    let rc = recovery_config(ctx)?;
    let mut trainer = RecoveryTrainer::new(&base.config, &rc, &ctx.seeds.child("recover")).map_err(|e| cfg_err("recover", e))?;
    let data = load_data(cfg, &ctx.seeds)?;
    let batches = Batches::new(ctx, &data, ctx.seeds)?;
    let resume = ctx.resume()?;
    if let Some(r) = &resume {
        trainer.load_state(&records(&r.ck, &["lora.", "opt."])).map_err(|e| r.err(e))?;
    }
    let done = resume.as_ref().map_or(0, |r| r.step).min(rc.steps);
    let mut run = ctx.open(resume.as_ref())?;
    StepLoop {
        run: &mut run,
        command_id: ctx.id(),
        every: ctx.every(),
    }
    .run(
        &mut trainer,
        "recover",
        0,
        done..rc.steps,
        |t, s| {
            let b = batches.get("recover/batch", s)?;
            Ok(StepOut::new(t.step(&base, &b)?).tokens(tokens(&b)))
        },
        |t| {
            let mut ck = Checkpoint::new();
            ck.insert_optimizer_state(&t.state());
            Ok(ck)
        },
    )?;
    let adapter = trainer.finish();
    let tags = cfg.list("eval.components");
    let len = cfg.positive("eval.max_len")?;
    let q = eval_all(&base, &data.eval, &tags, len)?;
    let rec = eval_all(&adapter.merge_into(&base)?, &data.eval, &tags, len)?;
    let float = reference.as_ref().map(|m| eval_all(m, &data.eval, &tags, len)).transpose()?;
    let mut ck = adapter.to_checkpoint();
    stamp(&mut ck, ctx.id(), rc.steps, run.tokens_seen);
    run.save(FINAL_CHECKPOINT, &ck)?;
    run.finish(&json!({
        "command": "recover",
        "steps": rc.steps,
        "eval_quantized": q,
        "eval_recovered": rec,
        "eval_float": float,
        "gap_closed": q - rec,
        "fraction_closed": float.map(|f| (q - rec) / (q - f)),
        "adapter": run.path(FINAL_CHECKPOINT),
    }))
}

/// Loads a LoRA adapter written by `recover`.
pub(crate) fn load_adapter(path: &std::path::Path, cfg: &ModelConfig) -> CliResult<LoraAdapter> {
    let ck = load_checkpoint(path)?;
    let a = LoraAdapter::from_checkpoint(&ck).map_err(|e| crate::error::checkpoint_err(path, e))?;
    a.validate(cfg).map_err(|e| crate::error::checkpoint_err(path, e))?;
    Ok(a)
}

