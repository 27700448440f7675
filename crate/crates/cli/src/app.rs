//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::exit::{self, UsageError};
use crate::stages::{self, Stage};

#[derive(Debug, Parser)]
#[command(
    name = "gdpo",
    about = "Physics-aware groupwise preference optimization of a trajectory flow model",
    after_help = "Any configuration key can be overridden with a flag of the same name, \
                  e.g. `--dpo.beta 0.1` or `--pool.size=512`."
)]
pub struct Cli {
    /// Configuration file of `section.key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed (same as `--run.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory (same as `--run.out`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Simulate the raw clip pool with corrupted clips mixed in.
    GenPool,
    /// Score physics richness and keep the rich clips.
    Filter,
    /// Flow-matching pretraining of the backbone on clean filtered clips.
    Pretrain,
    /// Difficulty-weighted sampling of the training set.
    Sample,
    /// Sample and score losers for every training condition.
    GenGroups,
    /// Train the adapter with the groupwise preference objective.
    DpoTrain,
    /// Per-category scores with the adapter off and on.
    Eval {
        /// Checkpoint to evaluate (default: dpo.ckpt in the run directory).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Randomized inequality, bound-chain and gradient suites.
    Verify,
    /// Consolidate run outputs into report/.
    Report,
    /// Every stage in order.
    RunAll,
    /// Print the effective configuration.
    ShowConfig,
}

/// Splits `--section.key value` and `--section.key=value` flags out of the
/// argument list.
pub fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let flag = match arg.to_str() {
            Some(s) if s.starts_with("--") && s[2..].split('=').next().is_some_and(|k| k.contains('.')) => {
                s[2..].to_string()
            }
            _ => {
                rest.push(arg);
                continue;
            }
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let value = it
                    .next()
                    .and_then(|v| v.into_string().ok())
                    .ok_or_else(|| UsageError(format!("--{flag} needs a value")))?;
                overrides.push((flag, value));
            }
        }
    }
    Ok((rest, overrides))
}

/// Loads the configuration file and applies flag overrides in order.
pub fn resolve_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| UsageError("--config PATH is required".into()))?;
    if !path.is_file() {
        return Err(UsageError(format!("config file {} not found", path.display())).into());
    }
    let mut cfg = RunConfig::load(path)?;
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let stage = match &cli.command {
        Command::GenPool => Stage::GenPool,
        Command::Filter => Stage::Filter,
        Command::Pretrain => Stage::Pretrain,
        Command::Sample => Stage::Sample,
        Command::GenGroups => Stage::GenGroups,
        Command::DpoTrain => Stage::DpoTrain,
        Command::Eval { checkpoint } => Stage::Eval(checkpoint.clone()),
        Command::Verify => Stage::Verify,
        Command::Report => Stage::Report,
        Command::RunAll => return stages::run_all(cfg),
        Command::ShowConfig => {
            print!("{}", cfg.to_text());
            return Ok(());
        }
    };
    stages::execute(&stage, cfg).map(|_| ())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let (rest, overrides) = match split_overrides(args.into_iter().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return exit::USAGE;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    let result = resolve_config(&cli, &overrides).and_then(|cfg| dispatch(&cli, &cfg));
    match result {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit::code_for(&e)
        }
    }
}
