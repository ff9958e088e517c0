//! Ablation harnesses. Each runs a fixed sequence of phases (one training
//! run or one evaluation each); results and any models later phases need
//! are kept in one checkpoint, saved after every phase, so a resumed run
//! skips finished phases.

use super::compress::{base_plan, recovery_config, Batches};
use crate::common::{cfg_err, eval_all, load_data, mixture, model_config, optimizer, put_params, take_params, OptSpec};
use crate::error::CliResult;
use crate::run::{stamp, step_checkpoint, MetricsRecord, RunDir, FINAL_CHECKPOINT};
use crate::Ctx;
use lmstack_core::compress::{distill_step, effective_bpw, learn_mask, plan_mixed, prune, quantize, MaskTrainConfig, RecoveryTrainer};
use lmstack_core::data::{answer_weighted_docs, sample_batch, Component, Corpus, MixtureSpec, Stage};
use lmstack_core::model::ForwardCtx;
use lmstack_core::optim::ADAMW_FINAL_FRACTION;
use lmstack_core::train::{eval_loss_weighted, train_step};
use lmstack_core::{Checkpoint, Model, ModelConfig, SeedTree};
use serde_json::json;
use std::fmt::Write as _;

struct Phases {
    run: RunDir,
    ck: Checkpoint,
    command_id: u32,
    done: u64,
    index: u64,
}

impl Phases {
    fn open(ctx: &Ctx) -> CliResult<Self> {
        let resume = ctx.resume()?;
        let run = ctx.open(resume.as_ref())?;
        let (ck, done) = match resume {
            Some(r) => (r.ck, r.step),
            None => (Checkpoint::new(), 0),
        };
        Ok(Self {
            run,
            ck,
            command_id: ctx.id(),
            done,
            index: 0,
        })
    }

    /// Runs `f` unless a resumed checkpoint already covers this phase.
    /// `f` returns the phase's metric fields.
    fn phase(&mut self, name: &str, f: impl FnOnce(&mut Checkpoint) -> CliResult<Vec<(String, f64)>>) -> CliResult<()> {
        self.index += 1;
        if self.index <= self.done {
            return Ok(());
        }
        log::info!("phase {}: {name}", self.index);
        let fields = f(&mut self.ck)?;
        let mut rec = MetricsRecord::new(self.index, name);
        for (k, v) in fields {
            rec = rec.field(&k, v);
        }
        self.run.log(rec)?;
        stamp(&mut self.ck, self.command_id, self.index, 0);
        self.run.save(&step_checkpoint(self.index), &self.ck)?;
        Ok(())
    }

    fn meta(&self, key: &str) -> CliResult<f64> {
        Ok(self.ck.meta(key)?)
    }

    fn finish(mut self, table: &str, summary: serde_json::Value) -> CliResult<()> {
        stamp(&mut self.ck, self.command_id, self.index, 0);
        self.run.save(FINAL_CHECKPOINT, &self.ck)?;
        std::fs::write(self.run.path("table.tsv"), table)?;
        print!("{table}");
        self.run.finish(&summary)
    }
}

fn seeds_list(ctx: &Ctx) -> CliResult<Vec<u64>> {
    let s = ctx.cfg.u64_list("ablate.seeds");
    if s.is_empty() {
        return Err(cfg_err("ablate.seeds", "no seeds listed"));
    }
    Ok(s)
}

/// Plain LM training of `model` for `steps` on the seeded batch stream.
fn lm_train(
    ctx: &Ctx,
    model: &mut Model<f32>,
    spec: &OptSpec,
    key: &str,
    steps: u64,
    batch: &dyn Fn(u64) -> CliResult<Vec<Vec<u32>>>,
) -> CliResult<f64> {
    let mut opt = optimizer(&ctx.cfg, key, spec, model.config.model_dim)?;
    let mut last = f64::NAN;
    for s in 0..steps {
        last = train_step(model, &mut *opt, &batch(s)?, None)?.loss;
    }
    Ok(last)
}

fn core_spec(ctx: &Ctx, kind: &str, steps: u64, warmup: u64) -> OptSpec {
    let cfg = &ctx.cfg;
    OptSpec {
        kind: kind.to_string(),
        peak_lr: cfg.f64("stage.core.peak_lr"),
        warmup,
        total: steps,
        final_fraction: cfg.f64("stage.core.final_fraction"),
        weight_decay: Some(cfg.f64("stage.core.weight_decay")),
        source: "stage.core".into(),
    }
}

/// AFM recipe against the AdamW baseline on identical data, init and batches.
pub fn recipe(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let seeds = seeds_list(ctx)?;
    let steps = cfg.positive("recipe.steps")? as u64;
    let warmup = cfg.u64("recipe.warmup_steps");
    let mcfg = model_config(cfg)?;
    let afm = core_spec(ctx, "afm", steps, warmup);
    let adamw = OptSpec {
        kind: "adamw".into(),
        peak_lr: cfg.f64("recipe.adamw_lr"),
        final_fraction: ADAMW_FINAL_FRACTION,
        weight_decay: None,
        source: "recipe".into(),
        ..afm.clone()
    };
    for (key, s) in [("stage.core.peak_lr", &afm), ("recipe.adamw_lr", &adamw)] {
        optimizer(cfg, key, s, mcfg.model_dim)?;
    }
    let tags = cfg.list("eval.components");
    let len = cfg.positive("eval.max_len")?;
    let mut ph = Phases::open(ctx)?;
    for &seed in &seeds {
        let st = SeedTree::new(seed);
        let data = std::cell::OnceCell::new();
        for (name, spec) in [("afm", &afm), ("adamw", &adamw)] {
            ph.phase(&format!("{name}/seed-{seed}"), |ck| {
                let d = match data.get() {
                    Some(d) => d,
                    None => {
                        let _ = data.set(load_data(cfg, &st)?);
                        data.get().expect("just set")
                    }
                };
                let b = Batches::new(ctx, d, st)?;
                let mut m = Model::init(mcfg.clone(), &st.child("init"))?;
                let train = lm_train(ctx, &mut m, spec, "optim.kind", steps, &|s| b.get("batch/core", s))?;
                let e = eval_all(&m, &d.eval, &tags, len)?;
                ck.set_meta(&format!("recipe.{seed}.{name}"), e);
                Ok(vec![("train_loss".into(), train), ("eval_loss".into(), e)])
            })?;
        }
    }
    let mut table = String::from("seed\tafm\tadamw\trel_diff\n");
    let mut rows = Vec::new();
    for &seed in &seeds {
        let (a, w) = (ph.meta(&format!("recipe.{seed}.afm"))?, ph.meta(&format!("recipe.{seed}.adamw"))?);
        let rel = (a - w).abs() / a.min(w);
        let _ = writeln!(table, "{seed}\t{a:.6}\t{w:.6}\t{rel:.4}");
        rows.push(json!({ "seed": seed, "afm": a, "adamw": w, "rel_diff": rel }));
    }
    ph.finish(&table, json!({ "command": "ablate-recipe", "steps": steps, "rows": rows }))
}

fn afm_spec(ctx: &Ctx, lr: f64, steps: u64) -> OptSpec {
    OptSpec {
        kind: ctx.cfg.str("optim.kind").to_string(),
        peak_lr: lr,
        warmup: 20.min(steps / 10),
        total: steps,
        final_fraction: 0.01,
        weight_decay: None,
        source: "apd".into(),
    }
}

/// Scratch training against distillation and prune-then-distill at an equal
/// step budget, evaluated on clean arithmetic answers.
pub fn prune_distill(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let seeds = seeds_list(ctx)?;
    let tcfg = model_config(cfg)?;
    let keep = cfg.positive("apd.keep")?;
    if keep >= tcfg.ffn_hidden_dim {
        return Err(cfg_err("apd.keep", format!("must be below model.ffn_hidden_dim {}", tcfg.ffn_hidden_dim)));
    }
    let scfg = ModelConfig {
        ffn_hidden_dim: keep,
        ..tcfg.clone()
    };
    let budget = cfg.positive("apd.budget")? as u64;
    let mask_steps = cfg.u64("apd.mask_steps");
    if mask_steps >= budget {
        return Err(cfg_err("apd.mask_steps", format!("{mask_steps} leaves no distillation steps in a budget of {budget}")));
    }
    let teacher_steps = cfg.positive("apd.teacher_steps")? as u64;
    let noise = cfg.f64("apd.label_noise");
    if !(0.0..=1.0).contains(&noise) {
        return Err(cfg_err("apd.label_noise", format!("{noise} outside [0, 1]")));
    }
    let lr = cfg.f64("apd.lr");
    let w = cfg.f64("distill.w_teacher");
    let maths = lmstack_core::data::MathOptions {
        label_noise: noise,
        ..crate::common::math_options(cfg)?
    };
    let docs = cfg.positive("apd.docs")?;
    let eval_docs = cfg.positive("apd.eval_docs")?;
    let (seq_len, bs) = (cfg.positive("train.seq_len")?, cfg.positive("train.batch_size")?);
    optimizer(cfg, "apd.lr", &afm_spec(ctx, lr, budget), tcfg.model_dim)?;
    let mix = MixtureSpec::new(Stage::Core, vec![("math".into(), 1.0)])?;

    let mut ph = Phases::open(ctx)?;
    for &seed in &seeds {
        let st = SeedTree::new(seed);
        let corpus = Corpus::synthesize(&[Component::Math(maths)], docs, &st, "train")?;
        let batch = |label: &str, s: u64| -> CliResult<Vec<Vec<u32>>> {
            Ok(sample_batch(&corpus, &mix, seq_len, bs, &mut st.stream(label, s))?.sequences)
        };
        let (es, ew) = answer_weighted_docs(&mut st.stream("eval-eq", 0), &maths, eval_docs);
        let ev = |m: &Model<f32>| -> CliResult<f64> { Ok(eval_loss_weighted(m, &es, Some(&ew), &ForwardCtx::default())?) };
        let tkey = format!("teacher-{seed}");
        let spec = |steps| afm_spec(ctx, lr, steps);

        ph.phase(&format!("teacher/seed-{seed}"), |ck| {
            let mut t = Model::init(tcfg.clone(), &st.child("teacher"))?;
            lm_train(ctx, &mut t, &spec(teacher_steps), "apd.lr", teacher_steps, &|s| batch("teacher", s))?;
            put_params(ck, &tkey, &t);
            let e = ev(&t)?;
            ck.set_meta(&format!("apd.{seed}.teacher"), e);
            Ok(vec![("eval_loss".into(), e)])
        })?;
        ph.phase(&format!("scratch/seed-{seed}"), |ck| {
            let mut m = Model::init(scfg.clone(), &st.child("student"))?;
            lm_train(ctx, &mut m, &spec(budget), "apd.lr", budget, &|s| batch("student", s))?;
            let e = ev(&m)?;
            ck.set_meta(&format!("apd.{seed}.scratch"), e);
            Ok(vec![("eval_loss".into(), e)])
        })?;
        ph.phase(&format!("distill/seed-{seed}"), |ck| {
            let t = take_params(ck, &tkey, &tcfg)?;
            let mut m = Model::init(scfg.clone(), &st.child("student"))?;
            let mut opt = optimizer(cfg, "apd.lr", &spec(budget), scfg.model_dim)?;
            for s in 0..budget {
                distill_step(&mut m, &t, &mut *opt, &batch("student", s)?, w)?;
            }
            let e = ev(&m)?;
            ck.set_meta(&format!("apd.{seed}.distill"), e);
            Ok(vec![("eval_loss".into(), e)])
        })?;
        ph.phase(&format!("prune-distill/seed-{seed}"), |ck| {
            let t = take_params(ck, &tkey, &tcfg)?;
            let mc = MaskTrainConfig {
                steps: mask_steps,
                ..Default::default()
            };
            let mask = learn_mask(&t, |s| batch("mask", s).map_err(|e| lmstack_core::Error::Invalid(e.to_string())), keep, &mc)?;
            let mut m = prune(&t, &mask)?;
            let pruned = ev(&m)?;
            let rest = budget - mask_steps;
            let mut opt = optimizer(cfg, "apd.lr", &spec(rest), scfg.model_dim)?;
            for s in 0..rest {
                distill_step(&mut m, &t, &mut *opt, &batch("student", s)?, w)?;
            }
            let e = ev(&m)?;
            ck.set_meta(&format!("apd.{seed}.prune_distill"), e);
            Ok(vec![("pruned_eval_loss".into(), pruned), ("eval_loss".into(), e)])
        })?;
    }
    let mut table = String::from("seed\tteacher\tprune_distill\tdistill\tscratch\n");
    let mut rows = Vec::new();
    for &seed in &seeds {
        let g = |k: &str| ph.meta(&format!("apd.{seed}.{k}"));
        let (t, pd, d, s) = (g("teacher")?, g("prune_distill")?, g("distill")?, g("scratch")?);
        let _ = writeln!(table, "{seed}\t{t:.6}\t{pd:.6}\t{d:.6}\t{s:.6}");
        rows.push(json!({ "seed": seed, "teacher": t, "prune_distill": pd, "distill": d, "scratch": s }));
    }
    ph.finish(
        &table,
        json!({ "command": "ablate-prune-distill", "budget": budget, "mask_steps": mask_steps, "keep": keep, "rows": rows }),
    )
}

/// Float model, then 4-bit, mixed and 2-bit palettization each followed by
/// a recovery adapter.
pub fn recovery(ctx: &Ctx) -> CliResult<()> {
    let mut cfg = ctx.cfg.clone();
    cfg.set("data.eval_docs", &ctx.cfg.positive("arec.eval_docs")?.to_string())?;
    let mcfg = model_config(&cfg)?;
    let steps = cfg.positive("arec.pretrain_steps")? as u64;
    let target = cfg.f64("arec.target_bpw");
    let rc = recovery_config(ctx)?;
    let warmup = cfg.u64("stage.core.warmup_steps");
    let spec = core_spec(ctx, cfg.str("optim.kind"), steps, warmup);
    optimizer(&cfg, "optim.kind", &spec, mcfg.model_dim)?;
    let tags = cfg.list("eval.components");
    let len = cfg.positive("eval.max_len")?;
    let st = ctx.seeds;
    let data = load_data(&cfg, &st)?;
    mixture(&cfg, Stage::Core, &data)?;
    let b = Batches::new(ctx, &data, st)?;
    let qseeds = st.child("quantize");

    let mut ph = Phases::open(ctx)?;
    ph.phase("pretrain", |ck| {
        let mut m = Model::init(mcfg.clone(), &st.child("init"))?;
        let train = lm_train(ctx, &mut m, &spec, "optim.kind", steps, &|s| b.get("batch/core", s))?;
        put_params(ck, "float", &m);
        let e = eval_all(&m, &data.eval, &tags, len)?;
        ck.set_meta("arec.float", e);
        Ok(vec![("train_loss".into(), train), ("eval_loss".into(), e)])
    })?;
    let names = ["4bit", "mixed", "2bit"];
    for name in names {
        ph.phase(name, |ck| {
            let m = take_params(ck, "float", &mcfg)?;
            let plan = match name {
                "4bit" => base_plan(ctx, &mcfg, 4)?,
                "2bit" => base_plan(ctx, &mcfg, 2)?,
                _ => plan_mixed(&m, &base_plan(ctx, &mcfg, 4)?, target, &qseeds).map_err(|e| cfg_err("arec.target_bpw", e))?.0,
            };
            let bpw = effective_bpw(&plan, &mcfg)?.projection_bpw();
            let q = quantize(&m, &plan, &qseeds)?.model::<f32>()?;
            let qe = eval_all(&q, &data.eval, &tags, len)?;
            let mut t = RecoveryTrainer::new(&mcfg, &rc, &st.child("recover"))?;
            for s in 0..rc.steps {
                t.step(&q, &b.get("recover/batch", s)?)?;
            }
            let re = eval_all(&t.finish().merge_into(&q)?, &data.eval, &tags, len)?;
            for (k, v) in [("bpw", bpw), ("quant", qe), ("recovered", re)] {
                ck.set_meta(&format!("arec.{name}.{k}"), v);
            }
            Ok(vec![("bpw".into(), bpw), ("eval_quantized".into(), qe), ("eval_recovered".into(), re)])
        })?;
    }
    let f = ph.meta("arec.float")?;
    let mut table = String::from("plan\tbpw\tfloat\tquantized\trecovered\tgap_closed\tfraction_closed\n");
    let mut rows = Vec::new();
    for name in names {
        let g = |k: &str| ph.meta(&format!("arec.{name}.{k}"));
        let (bpw, q, r) = (g("bpw")?, g("quant")?, g("recovered")?);
        let (closed, frac) = (q - r, (q - r) / (q - f));
        let _ = writeln!(table, "{name}\t{bpw:.4}\t{f:.6}\t{q:.6}\t{r:.6}\t{closed:.6}\t{frac:.4}");
        rows.push(json!({ "plan": name, "bpw": bpw, "float": f, "quantized": q, "recovered": r, "gap_closed": closed, "fraction_closed": frac }));
    }
    ph.finish(
        &table,
        json!({ "command": "ablate-recovery", "pretrain_steps": steps, "recovery_steps": rc.steps, "rows": rows }),
    )
}
