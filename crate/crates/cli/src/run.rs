//! Output directory ownership: lock file, resolved config, metrics stream,
//! checkpoints and the final summary.

use crate::config::RunConfig;
use crate::error::{checkpoint_err, CliError, CliResult};
use lmstack_core::Checkpoint;
use serde::Serialize;
use serde_json::{Map, Value};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const LOCK_FILE: &str = ".lock";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.resolved";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Releases the output-directory lock on drop.
#[derive(Debug)]
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> CliResult<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.display().to_string())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    pub tokens_seen: u64,
    pub wall_ms: u64,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl MetricsRecord {
    pub fn new(step: u64, stage: impl Into<String>) -> Self {
        Self {
            step,
            stage: stage.into(),
            loss: None,
            lr: None,
            grad_norm: None,
            tokens_seen: 0,
            wall_ms: 0,
            extra: Map::new(),
        }
    }

    pub fn loss(mut self, v: f64) -> Self {
        self.loss = Some(v);
        self
    }

    pub fn lr(mut self, v: f64) -> Self {
        self.lr = Some(v);
        self
    }

    pub fn grad_norm(mut self, v: f64) -> Self {
        self.grad_norm = Some(v);
        self
    }

    pub fn field(mut self, k: &str, v: impl Into<Value>) -> Self {
        self.extra.insert(k.to_string(), v.into());
        self
    }
}

/// A command's view of its output directory.
#[derive(Debug)]
pub struct RunDir {
    pub dir: PathBuf,
    metrics: BufWriter<File>,
    last_step: u64,
    pub tokens_seen: u64,
    started: Instant,
    _lock: Lock,
}

impl RunDir {
    /// Locks `dir`, writes the resolved config and opens the metrics stream.
    /// When resuming at `resume_step`, metrics lines past it are discarded.
    pub fn open(dir: &Path, cfg: &RunConfig, resume_step: Option<u64>) -> CliResult<Self> {
        std::fs::create_dir_all(dir)?;
        let lock = Lock::acquire(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), cfg.render())?;
        let mpath = dir.join(METRICS_FILE);
        let mut kept = Vec::new();
        if let (Some(step), Ok(f)) = (resume_step, File::open(&mpath)) {
            for line in BufReader::new(f).lines() {
                let line = line?;
                let v: Value = match serde_json::from_str(&line) {
                    Ok(v) => v,
                    Err(_) => continue,
                };
                if v.get("step").and_then(Value::as_u64).is_some_and(|s| s <= step) {
                    kept.push(line);
                }
            }
        }
        let mut metrics = BufWriter::new(File::create(&mpath)?);
        for line in &kept {
            writeln!(metrics, "{line}")?;
        }
        metrics.flush()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            last_step: resume_step.unwrap_or(0),
            tokens_seen: 0,
            started: Instant::now(),
            _lock: lock,
        })
    }

    /// Appends one record. Steps never decrease within a run.
    pub fn log(&mut self, mut rec: MetricsRecord) -> CliResult<()> {
        if rec.step < self.last_step {
            return Err(CliError::Io(std::io::Error::other(format!(
                "metrics step went backwards: {} after {}",
                rec.step, self.last_step
            ))));
        }
        self.last_step = rec.step;
        rec.tokens_seen = self.tokens_seen;
        rec.wall_ms = self.started.elapsed().as_millis() as u64;
        serde_json::to_writer(&mut self.metrics, &rec)?;
        self.metrics.write_all(b"\n")?;
        self.metrics.flush()?;
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn save(&self, name: &str, ck: &Checkpoint) -> CliResult<PathBuf> {
        let p = self.path(name);
        ck.save(&p).map_err(|e| checkpoint_err(&p, e))?;
        Ok(p)
    }

    pub fn write_json(&self, name: &str, v: &impl Serialize) -> CliResult<PathBuf> {
        let p = self.path(name);
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        std::fs::write(&p, s)?;
        Ok(p)
    }

    pub fn write_jsonl<S: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = S>) -> CliResult<PathBuf> {
        let p = self.path(name);
        let mut w = BufWriter::new(File::create(&p)?);
        for r in rows {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(p)
    }

    /// Writes `summary.json` and prints it.
    pub fn finish(&self, summary: &Value) -> CliResult<()> {
        self.write_json(SUMMARY_FILE, summary)?;
        println!("{}", serde_json::to_string_pretty(summary)?);
        Ok(())
    }
}

/// Checkpoint file name for a periodic save.
pub fn step_checkpoint(step: u64) -> String {
    format!("step-{step:06}.ckpt")
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| checkpoint_err(path, e))
}

/// Run bookkeeping stored in every checkpoint a command writes.
pub const META_COMMAND: &str = "run.command";
pub const META_STEP: &str = "run.step";
pub const META_TOKENS: &str = "run.tokens";

/// A checkpoint to continue from, checked against the running command.
#[derive(Debug, Clone)]
pub struct Resume {
    pub path: PathBuf,
    pub ck: Checkpoint,
    pub step: u64,
    pub tokens: u64,
}

impl Resume {
    pub fn load(path: &Path, command_id: u32) -> CliResult<Self> {
        let ck = load_checkpoint(path)?;
        let bad = |m: String| CliError::Checkpoint(format!("{}: {m}", path.display()));
        let id = ck.meta(META_COMMAND).map_err(|_| bad("not written by an lmstack command".into()))?;
        if id != command_id as f64 {
            return Err(bad(format!("written by command #{id}, cannot resume command #{command_id}")));
        }
        let step = ck.meta(META_STEP).map_err(|e| bad(e.to_string()))? as u64;
        let tokens = ck.meta(META_TOKENS).unwrap_or(0.0) as u64;
        Ok(Self {
            path: path.to_path_buf(),
            ck,
            step,
            tokens,
        })
    }

    pub fn err(&self, m: impl std::fmt::Display) -> CliError {
        CliError::Checkpoint(format!("{}: {m}", self.path.display()))
    }
}

/// Stamps run bookkeeping into `ck`.
pub fn stamp(ck: &mut Checkpoint, command_id: u32, step: u64, tokens: u64) {
    ck.set_meta(META_COMMAND, command_id as f64);
    ck.set_meta(META_STEP, step as f64);
    ck.set_meta(META_TOKENS, tokens as f64);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_blocks_a_second_writer_and_is_released() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let a = RunDir::open(dir.path(), &cfg, None).unwrap();
        assert!(matches!(RunDir::open(dir.path(), &cfg, None), Err(CliError::Locked(_))));
        drop(a);
        assert!(RunDir::open(dir.path(), &cfg, None).is_ok());
    }

    #[test]
    fn steps_are_monotone_and_resume_trims_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        {
            let mut r = RunDir::open(dir.path(), &cfg, None).unwrap();
            for s in 1..=5 {
                r.log(MetricsRecord::new(s, "core").loss(1.0)).unwrap();
            }
            assert!(r.log(MetricsRecord::new(2, "core")).is_err());
        }
        let mut r = RunDir::open(dir.path(), &cfg, Some(3)).unwrap();
        r.log(MetricsRecord::new(4, "core").loss(0.5)).unwrap();
        drop(r);
        let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let steps: Vec<u64> = text
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap())
            .collect();
        assert_eq!(steps, vec![1, 2, 3, 4]);
    }
}
