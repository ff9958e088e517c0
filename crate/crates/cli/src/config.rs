//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment line, and
//! `include <path>` splices another file in place (relative to the including
//! file). Later assignments override earlier ones. Every key has a type and a
//! default; anything else is rejected.

use crate::error::{CliError, CliResult};
use indexmap::IndexMap;
use lmstack_core::data::{stage_preset, Stage};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Str,
    /// Comma-separated strings.
    List,
    /// Comma-separated unsigned integers.
    IntList,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeySpec {
    pub key: String,
    pub kind: Kind,
    pub default: String,
}

pub const COMPONENTS: [&str; 6] = ["web", "qa", "copy", "math", "code", "longctx"];

fn spec(key: &str, kind: Kind, default: &str) -> KeySpec {
    KeySpec {
        key: key.to_string(),
        kind,
        default: default.to_string(),
    }
}

/// Toy-scale stage defaults: steps, peak lr, warmup, final fraction, decay.
fn stage_defaults(stage: Stage) -> [&'static str; 5] {
    match stage {
        Stage::Core => ["1000", "0.3", "30", "0.005", "3.16e-4"],
        Stage::Continued => ["800", "0.1", "10", "0.001", "1e-5"],
        Stage::Context => ["200", "0.1", "10", "0.001", "1e-5"],
    }
}

/// Every recognized key, in the order the resolved config is written.
pub fn schema() -> Vec<KeySpec> {
    use Kind::*;
    let mut s = vec![
        spec("seed", Int, "0"),
        spec("out", Str, ""),
        spec("init", Str, ""),
        spec("checkpoint.every", Int, "0"),
        spec("model.model_dim", Int, "64"),
        spec("model.head_dim", Int, "16"),
        spec("model.n_query_heads", Int, "4"),
        spec("model.n_kv_heads", Int, "2"),
        spec("model.n_layers", Int, "2"),
        spec("model.ffn_hidden_dim", Int, "128"),
        spec("model.rope_base", Float, "500000"),
        spec("model.max_seq_len", Int, "512"),
        spec("model.norm_eps", Float, "1e-5"),
        spec("data.corpus", Str, ""),
        spec("data.eval_corpus", Str, ""),
        spec("data.components", List, "web,qa,copy,math,code,longctx"),
        spec("data.docs_per_component", Int, "300"),
        spec("data.eval_docs", Int, "60"),
        spec("data.math_max_operand", Int, "20"),
        spec("data.math_label_noise", Float, "0"),
        spec("data.longctx_pairs", Int, "12"),
        spec("train.batch_size", Int, "8"),
        spec("train.seq_len", Int, "64"),
        spec("optim.kind", Str, "afm"),
        spec("optim.beta1", Float, ""),
        spec("optim.beta2", Float, ""),
        spec("optim.eps", Float, ""),
        spec("optim.block_clip", Float, "1.0"),
        spec("optim.global_clip", Float, "1.0"),
        spec("optim.mu_base_dim", Int, "64"),
        spec("optim.weight_decay", Float, ""),
        spec("pretrain.stages", List, "core"),
    ];
    for stage in Stage::ALL {
        let n = stage.name();
        let d = stage_defaults(stage);
        for (k, v) in ["steps", "peak_lr", "warmup_steps", "final_fraction", "weight_decay"].iter().zip(d) {
            let kind = if matches!(*k, "steps" | "warmup_steps") { Int } else { Float };
            s.push(spec(&format!("stage.{n}.{k}"), kind, v));
        }
    }
    for stage in Stage::ALL {
        let preset = stage_preset(stage);
        for c in COMPONENTS {
            let w = preset.mixture.weight(c);
            s.push(spec(&format!("mixture.{}.{c}", stage.name()), Float, &w.to_string()));
        }
    }
    s.extend([
        spec("eval.components", List, "web,qa,copy,math,code"),
        spec("eval.adapter", Str, ""),
        spec("eval.max_len", Int, "128"),
        spec("sft.data", Str, ""),
        spec("sft.demos", Int, "2000"),
        spec("sft.steps", Int, "300"),
        spec("sft.batch_size", Int, "16"),
        spec("sft.optim", Str, "afm"),
        spec("sft.lr", Float, "0.1"),
        spec("sft.dropout", Float, "0.1"),
        spec("reward.data", Str, ""),
        spec("reward.prompts", Int, "1000"),
        spec("reward.test_fraction", Float, "0.2"),
        spec("reward.responses_per_prompt", Int, "4"),
        spec("reward.lambda", Float, "0.1"),
        spec("reward.mlp_hidden", Int, "32"),
        spec("reward.steps", Int, "200"),
        spec("reward.batch_size", Int, "32"),
        spec("reward.optim", Str, "adamw"),
        spec("reward.lr", Float, "0.003"),
        spec("rlhf.reward", Str, ""),
        spec("rlhf.iterations", Int, "50"),
        spec("rlhf.prompts_per_iter", Int, "4"),
        spec("rlhf.k", Int, "8"),
        spec("rlhf.beta", Float, "0.1"),
        spec("rlhf.gamma", Float, "0.01"),
        spec("rlhf.inner_epochs", Int, "1"),
        spec("rlhf.ratio_ceiling", Float, "10"),
        spec("rlhf.optim", Str, "adamw"),
        spec("rlhf.lr", Float, "0.001"),
        spec("rlhf.max_response", Int, "12"),
        spec("rlhf.temperature", Float, "1.0"),
        spec("distill.teacher", Str, ""),
        spec("distill.w_teacher", Float, "0.9"),
        spec("distill.steps", Int, "400"),
        spec("distill.peak_lr", Float, "0.3"),
        spec("prune.keep", Int, "64"),
        spec("prune.mask_steps", Int, "100"),
        spec("prune.mask_lr", Float, "0.05"),
        spec("prune.temperature_start", Float, "1.0"),
        spec("prune.temperature_end", Float, "0.05"),
        spec("quant.bits", Int, "4"),
        spec("quant.target_bpw", Float, "0"),
        spec("quant.group_size", Int, "16"),
        spec("quant.kmeans_iters", Int, "25"),
        spec("quant.lut", Str, "f16"),
        spec("quant.embedding_int8", Bool, "true"),
        spec("recover.rank", Int, "16"),
        spec("recover.alpha", Float, "16"),
        spec("recover.steps", Int, "200"),
        spec("recover.lr", Float, "0.002"),
        spec("recover.warmup_steps", Int, "10"),
        spec("recover.reference", Str, ""),
        spec("committee.prompts", Int, "200"),
        spec("committee.samples_per_model", Int, "4"),
        spec("committee.max_len", Int, "16"),
        spec("committee.policies", List, ""),
        spec("committee.math_skill", Float, "0.9"),
        spec("committee.writing_skill", Float, "0.3"),
        spec("committee.max_operand", Int, "49"),
        spec("committee.word_len", Int, "5"),
        spec("sample.prompt", Str, ""),
        spec("sample.max_tokens", Int, "64"),
        spec("sample.temperature", Float, "1.0"),
        spec("sample.count", Int, "1"),
        spec("decontam.benchmark", Str, ""),
        spec("decontam.corpus", Str, ""),
        spec("decontam.threshold", Int, "1000"),
        spec("ablate.seeds", IntList, "1,2,3"),
        spec("recipe.steps", Int, "1000"),
        spec("recipe.adamw_lr", Float, "0.01"),
        spec("recipe.warmup_steps", Int, "30"),
        spec("apd.teacher_steps", Int, "2000"),
        spec("apd.budget", Int, "400"),
        spec("apd.mask_steps", Int, "100"),
        spec("apd.keep", Int, "32"),
        spec("apd.label_noise", Float, "0.2"),
        spec("apd.docs", Int, "2000"),
        spec("apd.eval_docs", Int, "100"),
        spec("apd.lr", Float, "0.3"),
        spec("arec.pretrain_steps", Int, "400"),
        spec("arec.target_bpw", Float, "3.7"),
        spec("arec.eval_docs", Int, "40"),
    ]);
    s
}

/// A validated key/value map covering every schema key.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: IndexMap<String, String>,
    kinds: IndexMap<String, Kind>,
}

fn err(key: &str, reason: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn check_value(key: &str, kind: Kind, v: &str) -> CliResult<()> {
    let bad = |what: &str| err(key, format!("`{v}` is not {what}"));
    match kind {
        Kind::Int => {
            v.parse::<u64>().map_err(|_| bad("a non-negative integer"))?;
        }
        Kind::Float => {
            if !v.is_empty() {
                let x = v.parse::<f64>().map_err(|_| bad("a number"))?;
                if !x.is_finite() {
                    return Err(bad("a finite number"));
                }
            }
        }
        Kind::Bool => {
            if !matches!(v, "true" | "false") {
                return Err(bad("true or false"));
            }
        }
        Kind::IntList => {
            for part in v.split(',').filter(|p| !p.trim().is_empty()) {
                part.trim().parse::<u64>().map_err(|_| bad("a comma-separated list of integers"))?;
            }
        }
        Kind::Str | Kind::List => {}
    }
    Ok(())
}

impl Default for RunConfig {
    fn default() -> Self {
        let sch = schema();
        Self {
            values: sch.iter().map(|s| (s.key.clone(), s.default.clone())).collect(),
            kinds: sch.iter().map(|s| (s.key.clone(), s.kind)).collect(),
        }
    }
}

impl RunConfig {
    /// Reads `path` and everything it includes on top of the defaults.
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let mut cfg = Self::default();
        let mut stack = Vec::new();
        cfg.apply_file(path, &mut stack)?;
        Ok(cfg)
    }

    fn apply_file(&mut self, path: &Path, stack: &mut Vec<PathBuf>) -> CliResult<()> {
        let canon = path
            .canonicalize()
            .map_err(|e| err("include", format!("cannot open {}: {e}", path.display())))?;
        if stack.contains(&canon) {
            return Err(err("include", format!("{} includes itself", path.display())));
        }
        let text = std::fs::read_to_string(&canon).map_err(|e| err("include", format!("cannot read {}: {e}", path.display())))?;
        stack.push(canon.clone());
        let base = canon.parent().unwrap_or(Path::new(".")).to_path_buf();
        self.apply_text(&text, &path.display().to_string(), &base, stack)?;
        stack.pop();
        Ok(())
    }

    fn apply_text(&mut self, text: &str, origin: &str, base: &Path, stack: &mut Vec<PathBuf>) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let here = format!("{origin}:{}", i + 1);
            if let Some(rest) = line.strip_prefix("include") {
                if rest.starts_with(char::is_whitespace) {
                    self.apply_file(&base.join(rest.trim()), stack)?;
                    continue;
                }
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(line, format!("{here}: expected `key = value` or `include <path>`")))?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                CliError::Config { key, reason } => err(&key, format!("{here}: {reason}")),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Parses config text on top of the defaults; includes resolve against `dir`.
    pub fn parse_str(text: &str, dir: &Path) -> CliResult<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, "<inline>", dir, &mut Vec::new())?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let kind = *self.kinds.get(key).ok_or_else(|| err(key, "unknown key"))?;
        check_value(key, kind, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key `{key}` is not in the schema"))
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.raw(key).parse().expect("validated on set")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.u64(key) as usize
    }

    /// A positive integer, or a config error naming the key.
    pub fn positive(&self, key: &str) -> CliResult<usize> {
        match self.usize(key) {
            0 => Err(err(key, "must be positive")),
            n => Ok(n),
        }
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.opt_f64(key).unwrap_or_else(|| panic!("config key `{key}` has no value"))
    }

    /// `None` when the key is left empty.
    pub fn opt_f64(&self, key: &str) -> Option<f64> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| v.parse().expect("validated on set"))
    }

    pub fn bool(&self, key: &str) -> bool {
        self.raw(key) == "true"
    }

    pub fn str(&self, key: &str) -> &str {
        self.raw(key)
    }

    /// `None` when the key is empty.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn required_path(&self, key: &str) -> CliResult<PathBuf> {
        self.path(key).ok_or_else(|| err(key, "required by this command"))
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    pub fn u64_list(&self, key: &str) -> Vec<u64> {
        self.list(key).iter().map(|s| s.parse().expect("validated on set")).collect()
    }

    /// The fully resolved configuration in the input syntax.
    pub fn render(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.values.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_the_schema() {
        let c = RunConfig::default();
        assert_eq!(c.u64("model.model_dim"), 64);
        assert_eq!(c.opt_f64("optim.beta1"), None);
        assert_eq!(c.f64("mixture.core.web"), 0.5);
        assert_eq!(c.f64("mixture.core.longctx"), 0.0);
        assert_eq!(c.list("pretrain.stages"), vec!["core"]);
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_key() {
        let mut c = RunConfig::default();
        match c.set("model.widht", "3") {
            Err(CliError::Config { key, .. }) => assert_eq!(key, "model.widht"),
            other => panic!("{other:?}"),
        }
        match c.set("train.batch_size", "-1") {
            Err(CliError::Config { key, reason }) => {
                assert_eq!(key, "train.batch_size");
                assert!(reason.contains("-1"));
            }
            other => panic!("{other:?}"),
        }
        assert!(c.set("quant.embedding_int8", "yes").is_err());
        assert!(c.set("ablate.seeds", "1,x").is_err());
    }

    #[test]
    fn includes_resolve_relative_and_later_lines_win() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/base.conf"), "# base\nseed = 4\nmodel.n_layers = 3\n").unwrap();
        std::fs::write(dir.path().join("run.conf"), "include sub/base.conf\nseed = 9\n").unwrap();
        let c = RunConfig::from_file(&dir.path().join("run.conf")).unwrap();
        assert_eq!(c.u64("seed"), 9);
        assert_eq!(c.u64("model.n_layers"), 3);
        let back = RunConfig::parse_str(&c.render(), dir.path()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn include_cycles_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.conf"), "include b.conf\n").unwrap();
        std::fs::write(dir.path().join("b.conf"), "include a.conf\n").unwrap();
        assert!(matches!(RunConfig::from_file(&dir.path().join("a.conf")), Err(CliError::Config { .. })));
    }
}
