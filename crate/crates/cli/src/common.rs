//! Pieces shared by the commands: config-to-library translation, data,
//! optimizers, evaluation and the checkpointing step loop.

use crate::config::{RunConfig, COMPONENTS};
use crate::error::{CliError, CliResult};
use crate::run::{load_checkpoint, stamp, step_checkpoint, MetricsRecord, RunDir};
use indexmap::IndexMap;
use lmstack_core::data::{document_sequences, Component, Corpus, MathOptions, MixtureSpec, Stage, VOCAB_SIZE};
use lmstack_core::model::ForwardCtx;
use lmstack_core::optim::{AdamW, AdamWConfig, AfmConfig, AfmOptimizer, LrSchedule, MuParamPolicy, Optimizer, Sgd};
use lmstack_core::train::eval_loss;
use lmstack_core::{Checkpoint, Model, ModelConfig, SeedTree};
use std::io::BufReader;
use std::ops::Range;
use std::path::Path;

pub fn cfg_err(key: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

pub fn model_config(cfg: &RunConfig) -> CliResult<ModelConfig> {
    let m = ModelConfig {
        model_dim: cfg.usize("model.model_dim"),
        head_dim: cfg.usize("model.head_dim"),
        n_query_heads: cfg.usize("model.n_query_heads"),
        n_kv_heads: cfg.usize("model.n_kv_heads"),
        n_layers: cfg.usize("model.n_layers"),
        vocab_size: VOCAB_SIZE,
        ffn_hidden_dim: cfg.usize("model.ffn_hidden_dim"),
        rope_base: cfg.f64("model.rope_base"),
        max_seq_len: cfg.usize("model.max_seq_len"),
        norm_eps: cfg.f64("model.norm_eps"),
    };
    m.validate().map_err(|e| cfg_err("model", e))?;
    Ok(m)
}

pub fn load_model(path: &Path) -> CliResult<Model<f32>> {
    let ck = load_checkpoint(path)?;
    ck.model().map_err(|e| crate::error::checkpoint_err(path, e))
}

/// Model from `init` when set, else a fresh init from the model keys.
pub fn init_model(cfg: &RunConfig, seeds: &SeedTree) -> CliResult<Model<f32>> {
    match cfg.path("init") {
        Some(p) => load_model(&p),
        None => Ok(Model::init(model_config(cfg)?, &seeds.child("init"))?),
    }
}

pub fn components(cfg: &RunConfig) -> CliResult<Vec<Component>> {
    let tags = cfg.list("data.components");
    if tags.is_empty() {
        return Err(cfg_err("data.components", "no components listed"));
    }
    tags.iter()
        .map(|t| {
            Ok(match Component::from_tag(t).map_err(|e| cfg_err("data.components", e))? {
                Component::Math(_) => Component::Math(math_options(cfg)?),
                Component::LongCtx { .. } => Component::LongCtx {
                    pairs: cfg.positive("data.longctx_pairs")?,
                },
                c => c,
            })
        })
        .collect()
}

pub fn math_options(cfg: &RunConfig) -> CliResult<MathOptions> {
    let noise = cfg.f64("data.math_label_noise");
    if !(0.0..=1.0).contains(&noise) {
        return Err(cfg_err("data.math_label_noise", format!("{noise} outside [0, 1]")));
    }
    Ok(MathOptions {
        max_operand: cfg.positive("data.math_max_operand")? as u32,
        label_noise: noise,
        ..Default::default()
    })
}

#[derive(Debug, Clone)]
pub struct Data {
    pub train: Corpus,
    pub eval: Corpus,
}

fn read_corpus(key: &str, path: &Path) -> CliResult<Corpus> {
    let f = std::fs::File::open(path).map_err(|e| cfg_err(key, format!("{}: {e}", path.display())))?;
    Corpus::read_jsonl(BufReader::new(f)).map_err(|e| cfg_err(key, format!("{}: {e}", path.display())))
}

/// Training and held-out corpora: files when configured, else synthesized
/// from the seed.
pub fn load_data(cfg: &RunConfig, seeds: &SeedTree) -> CliResult<Data> {
    let comps = components(cfg)?;
    let train = match cfg.path("data.corpus") {
        Some(p) => read_corpus("data.corpus", &p)?,
        None => Corpus::synthesize(&comps, cfg.positive("data.docs_per_component")?, seeds, "train")?,
    };
    let eval = match cfg.path("data.eval_corpus") {
        Some(p) => read_corpus("data.eval_corpus", &p)?,
        None => Corpus::synthesize(&comps, cfg.positive("data.eval_docs")?, seeds, "eval")?,
    };
    Ok(Data { train, eval })
}

/// Stage mixture from the `mixture.<stage>.*` keys.
pub fn mixture(cfg: &RunConfig, stage: Stage, data: &Data) -> CliResult<MixtureSpec> {
    let mut weights = Vec::new();
    for c in COMPONENTS {
        let key = format!("mixture.{}.{c}", stage.name());
        let w = cfg.f64(&key);
        if w < 0.0 {
            return Err(cfg_err(&key, "weights must be non-negative"));
        }
        if w > 0.0 {
            if data.train.components.get(c).is_none_or(|d| d.is_empty()) {
                return Err(cfg_err(&key, format!("weight {w} but the corpus has no `{c}` documents")));
            }
            weights.push((c.to_string(), w));
        }
    }
    MixtureSpec::new(stage, weights).map_err(|e| cfg_err(&format!("mixture.{}", stage.name()), e))
}

/// Learning-rate schedule and decay for one optimizer instance.
#[derive(Debug, Clone, PartialEq)]
pub struct OptSpec {
    pub kind: String,
    pub peak_lr: f64,
    pub warmup: u64,
    pub total: u64,
    pub final_fraction: f64,
    /// `None` keeps the optimizer's default.
    pub weight_decay: Option<f64>,
    /// Config key or prefix the schedule values came from, for errors.
    pub source: String,
}

pub type BoxedOptimizer = Box<dyn Optimizer<f32>>;

/// Builds an optimizer; `key` names the config entry that chose `spec.kind`.
pub fn optimizer(cfg: &RunConfig, key: &str, spec: &OptSpec, model_dim: usize) -> CliResult<BoxedOptimizer> {
    if !(spec.peak_lr > 0.0) {
        return Err(cfg_err(&spec.source, format!("learning rate {} must be positive", spec.peak_lr)));
    }
    let schedule = LrSchedule::cosine(spec.peak_lr, spec.warmup, spec.total.max(1), spec.final_fraction);
    schedule.validate().map_err(|e| cfg_err(&spec.source, e))?;
    let global_clip = Some(cfg.f64("optim.global_clip")).filter(|&c| c > 0.0);
    let policy = MuParamPolicy::simple(cfg.positive("optim.mu_base_dim")?, model_dim);
    Ok(match spec.kind.as_str() {
        "afm" => {
            let d = AfmConfig::default();
            let c = AfmConfig {
                beta1: cfg.opt_f64("optim.beta1").unwrap_or(d.beta1),
                beta2: cfg.opt_f64("optim.beta2").unwrap_or(d.beta2),
                eps: cfg.opt_f64("optim.eps").unwrap_or(d.eps),
                block_clip: cfg.f64("optim.block_clip"),
                global_clip,
                weight_decay: spec.weight_decay.unwrap_or(d.weight_decay),
            };
            Box::new(AfmOptimizer::new(c, schedule, policy).map_err(|e| cfg_err("optim", e))?)
        }
        "adamw" => {
            let d = AdamWConfig::default();
            let c = AdamWConfig {
                beta1: cfg.opt_f64("optim.beta1").unwrap_or(d.beta1),
                beta2: cfg.opt_f64("optim.beta2").unwrap_or(d.beta2),
                eps: cfg.opt_f64("optim.eps").unwrap_or(d.eps),
                global_clip,
                weight_decay: spec.weight_decay.unwrap_or(d.weight_decay),
            };
            Box::new(AdamW::new(c, schedule, policy).map_err(|e| cfg_err("optim", e))?)
        }
        "sgd" => Box::new(Sgd::new(spec.peak_lr)),
        other => return Err(cfg_err(key, format!("unknown optimizer `{other}` (afm, adamw, sgd)"))),
    })
}

/// Held-out loss per component tag.
pub fn eval_components(model: &Model<f32>, eval: &Corpus, tags: &[String], max_len: usize) -> CliResult<IndexMap<String, f64>> {
    let mut out = IndexMap::new();
    for t in tags {
        let Some(docs) = eval.components.get(t.as_str()) else {
            continue;
        };
        let seqs = document_sequences(docs, max_len);
        if seqs.is_empty() {
            continue;
        }
        out.insert(t.clone(), eval_loss(model, &seqs, &ForwardCtx::default())?);
    }
    Ok(out)
}

/// Token-weighted loss over every listed component.
pub fn eval_all(model: &Model<f32>, eval: &Corpus, tags: &[String], max_len: usize) -> CliResult<f64> {
    let seqs: Vec<Vec<u32>> = tags
        .iter()
        .filter_map(|t| eval.components.get(t.as_str()))
        .flat_map(|docs| document_sequences(docs, max_len))
        .collect();
    Ok(eval_loss(model, &seqs, &ForwardCtx::default())?)
}

/// What a step reports back to the loop.
#[derive(Debug, Clone)]
pub struct StepOut {
    pub record: MetricsRecord,
    pub tokens: u64,
}

impl StepOut {
    pub fn new(loss: f64) -> Self {
        Self {
            record: MetricsRecord::new(0, "").loss(loss),
            tokens: 0,
        }
    }

    pub fn lr(mut self, lr: f64, grad_norm: f64) -> Self {
        self.record = self.record.lr(lr).grad_norm(grad_norm);
        self
    }

    pub fn tokens(mut self, n: usize) -> Self {
        self.tokens = n as u64;
        self
    }

    pub fn field(mut self, k: &str, v: impl Into<serde_json::Value>) -> Self {
        self.record = self.record.field(k, v);
        self
    }
}

/// Drives a phase step by step, logging each one and writing periodic
/// checkpoints that [`crate::run::Resume`] can continue from.
pub struct StepLoop<'a> {
    pub run: &'a mut RunDir,
    pub command_id: u32,
    /// Save every this many global steps; 0 disables periodic saves.
    pub every: u64,
}

impl StepLoop<'_> {
    /// Runs local steps `range` of a phase whose step 0 is global step
    /// `offset + 1`.
    pub fn run<S>(
        &mut self,
        state: &mut S,
        stage: &str,
        offset: u64,
        range: Range<u64>,
        mut step: impl FnMut(&mut S, u64) -> CliResult<StepOut>,
        snapshot: impl Fn(&S) -> CliResult<Checkpoint>,
    ) -> CliResult<()> {
        for s in range {
            let out = step(state, s)?;
            let global = offset + s + 1;
            self.run.tokens_seen += out.tokens;
            let mut rec = out.record;
            rec.step = global;
            rec.stage = stage.to_string();
            self.run.log(rec)?;
            if self.every > 0 && global.is_multiple_of(self.every) {
                let mut ck = snapshot(state)?;
                stamp(&mut ck, self.command_id, global, self.run.tokens_seen);
                self.run.save(&step_checkpoint(global), &ck)?;
            }
        }
        Ok(())
    }
}

/// Model parameters stored under `prefix/` inside a larger checkpoint.
pub fn put_params(ck: &mut Checkpoint, prefix: &str, model: &Model<f32>) {
    for (name, t) in model.params.iter() {
        ck.insert(format!("{prefix}/{name}"), lmstack_core::Record::F32(t.clone()));
    }
}

pub fn take_params(ck: &Checkpoint, prefix: &str, config: &ModelConfig) -> CliResult<Model<f32>> {
    let mut params = lmstack_core::ParamStore::new();
    let p = format!("{prefix}/");
    for (name, rec) in &ck.records {
        if let Some(n) = name.strip_prefix(&p) {
            params.insert(n.to_string(), rec.to_tensor());
        }
    }
    Model::from_params(config.clone(), params).map_err(|e| CliError::Checkpoint(format!("`{prefix}` model: {e}")))
}
