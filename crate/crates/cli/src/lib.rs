//! The `lmstack` command line: one command per lifecycle step, each owning an
//! output directory with its resolved config, a JSONL metrics stream,
//! checkpoints and a summary.

pub mod commands;
pub mod common;
pub mod config;
pub mod error;
pub mod run;

use clap::{Parser, ValueEnum};
use config::RunConfig;
use error::{CliError, CliResult};
use lmstack_core::{Checkpoint, SeedTree};
use run::{stamp, step_checkpoint, Resume, RunDir};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Pretrain,
    Sft,
    TrainReward,
    Rlhf,
    Distill,
    Prune,
    Quantize,
    Recover,
    CommitteeRs,
    Sample,
    Eval,
    Decontaminate,
    AblateRecipe,
    AblatePruneDistill,
    AblateRecovery,
}

impl Command {
    /// Stable id stamped into checkpoints so a resume cannot cross commands.
    pub fn id(self) -> u32 {
        Self::value_variants().iter().position(|c| *c == self).expect("listed") as u32 + 1
    }

    pub fn name(self) -> String {
        self.to_possible_value().expect("no skipped variants").get_name().to_string()
    }

    /// Config keys that `--steps` overrides.
    fn step_keys(self, cfg: &RunConfig) -> Vec<String> {
        let one = |k: &str| vec![k.to_string()];
        match self {
            Command::Pretrain => cfg.list("pretrain.stages").iter().map(|s| format!("stage.{s}.steps")).collect(),
            Command::Sft => one("sft.steps"),
            Command::TrainReward => one("reward.steps"),
            Command::Rlhf => one("rlhf.iterations"),
            Command::Distill => one("distill.steps"),
            Command::Prune => one("prune.mask_steps"),
            Command::Recover => one("recover.steps"),
            Command::AblateRecipe => one("recipe.steps"),
            Command::AblatePruneDistill => one("apd.budget"),
            Command::AblateRecovery => one("arec.pretrain_steps"),
            Command::Quantize | Command::CommitteeRs | Command::Sample | Command::Eval | Command::Decontaminate => vec![],
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lmstack", version, about = "Train, align and compress small decoder-only language models")]
pub struct Args {
    pub command: Command,
    /// Run configuration (`key = value` lines, `include <path>`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by the same command.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory; defaults to `out`, then `runs/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the command's step count.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Overrides `decontam.benchmark`.
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    /// Overrides `decontam.corpus`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Extra `key=value` assignments applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

/// Everything a command needs before it starts computing.
#[derive(Debug)]
pub struct Ctx {
    pub command: Command,
    pub cfg: RunConfig,
    pub seeds: SeedTree,
    pub out: PathBuf,
    pub resume_path: Option<PathBuf>,
}

impl Ctx {
    pub fn from_args(args: &Args) -> CliResult<Self> {
        let mut cfg = match &args.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for s in &args.sets {
            let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config {
                key: s.clone(),
                reason: "--set expects KEY=VALUE".into(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = args.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        if let Some(n) = args.steps {
            let keys = args.command.step_keys(&cfg);
            if n == 0 {
                return Err(CliError::Config {
                    key: "steps".into(),
                    reason: "must be at least 1".into(),
                });
            }
            if keys.is_empty() {
                return Err(CliError::Config {
                    key: "steps".into(),
                    reason: format!("`{}` has no step count", args.command.name()),
                });
            }
            for k in keys {
                cfg.set(&k, &n.to_string())?;
            }
        }
        if let Some(p) = &args.benchmark {
            cfg.set("decontam.benchmark", &p.display().to_string())?;
        }
        if let Some(p) = &args.corpus {
            cfg.set("decontam.corpus", &p.display().to_string())?;
        }
        if let Some(p) = &args.out {
            cfg.set("out", &p.display().to_string())?;
        }
        let out = cfg
            .path("out")
            .unwrap_or_else(|| PathBuf::from("runs").join(args.command.name()));
        Ok(Self {
            command: args.command,
            seeds: SeedTree::new(cfg.u64("seed")),
            cfg,
            out,
            resume_path: args.resume.clone(),
        })
    }

    pub fn id(&self) -> u32 {
        self.command.id()
    }

    /// Loads `--resume`, checking that this command wrote it.
    pub fn resume(&self) -> CliResult<Option<Resume>> {
        self.resume_path.as_deref().map(|p| Resume::load(p, self.id())).transpose()
    }

    /// For commands that finish in one pass and keep no intermediate state:
    /// a resume checkpoint is checked against the command, then the pass
    /// reruns from the start.
    pub fn one_pass_resume(&self) -> CliResult<()> {
        if let Some(r) = self.resume()? {
            log::info!("{}: {} holds no partial work, rerunning the pass", self.command.name(), r.path.display());
        }
        Ok(())
    }

    /// Opens the run directory for a one-pass command and writes the
    /// start-of-run checkpoint an interrupted run resumes from.
    pub fn open_one_pass(&self) -> CliResult<RunDir> {
        let run = self.open(None)?;
        let mut ck = Checkpoint::new();
        stamp(&mut ck, self.id(), 0, 0);
        run.save(&step_checkpoint(0), &ck)?;
        Ok(run)
    }

    pub fn open(&self, resume: Option<&Resume>) -> CliResult<RunDir> {
        let mut run = RunDir::open(&self.out, &self.cfg, resume.map(|r| r.step))?;
        if let Some(r) = resume {
            run.tokens_seen = r.tokens;
        }
        Ok(run)
    }

    pub fn every(&self) -> u64 {
        self.cfg.u64("checkpoint.every")
    }
}

/// Parses `argv` and runs the command.
pub fn run_args<I, S>(argv: I) -> CliResult<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = Args::try_parse_from(argv).map_err(|e| CliError::Config {
        key: "arguments".into(),
        reason: e.to_string(),
    })?;
    run(&args)
}

pub fn run(args: &Args) -> CliResult<()> {
    let ctx = Ctx::from_args(args)?;
    log::info!("{} -> {}", ctx.command.name(), ctx.out.display());
    commands::dispatch(&ctx)
}
