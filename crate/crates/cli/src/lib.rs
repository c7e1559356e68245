//! Command-line front end: probe a toy model for PAGE, validate the
//! estimators, and train or sweep adapter placements, with every run
//! recorded in a replayable manifest.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod plan;
pub mod validate;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commands::{execute, replay, Command, Job};
use crate::config::Config;
use crate::error::CliError;
use crate::validate::Fault;

#[derive(Debug, Parser)]
#[command(name = "page", version, about = "PAGE probing and single-module LoRA placement on toy transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides [run] seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: out, or <manifest dir>/replay for replay).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Overrides [validate] trials (Monte Carlo draws per module).
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Overrides [probe] restrict_kind (a projection kind or "none").
    #[arg(long, global = true)]
    pub restrict_kind: Option<String>,
    /// Worker threads for parallel sections; 0 uses every core.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Run on a single worker thread regardless of --workers.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Build the base checkpoint (random init, then pre-training).
    InitModel,
    /// Write the synthetic probe, train and eval sets as JSONL.
    GenData,
    /// Compute module sensitivities and PAGE, and select the dominant module.
    Probe,
    /// Run the gradient, moment and PAGE property checks.
    Validate {
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<Fault>,
    },
    /// Fine-tune under the [train] mode placement.
    Train,
    /// Train every [sweep] plan and rank and write a comparison table.
    Sweep,
    /// Rerun a recorded command and compare outputs byte for byte.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn load_config(global: &GlobalArgs) -> Result<Config, CliError> {
    let mut cfg = match &global.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = global.seed {
        cfg.run.seed = seed;
    }
    if let Some(trials) = global.trials {
        if trials < 2 {
            return Err(CliError::Usage("--trials must be at least 2".into()));
        }
        cfg.validate.trials = trials;
    }
    if let Some(kind) = &global.restrict_kind {
        if kind != "none" && kind.parse::<page_core::model::ProjKind>().is_err() {
            return Err(CliError::Usage(format!("--restrict-kind: unknown projection kind {kind:?}")));
        }
        cfg.probe.restrict_kind = kind.clone();
    }
    Ok(cfg)
}

fn init_workers(global: &GlobalArgs) {
    let n = if global.deterministic { 1 } else { global.workers };
    // Fails only if a pool already exists, as in tests calling `run` twice.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

/// Runs the parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    init_workers(&cli.global);
    let command = match cli.command {
        Cmd::Replay { manifest } => return run_replay(&manifest, cli.global.out_dir.as_deref()),
        Cmd::InitModel => (Command::InitModel, None),
        Cmd::GenData => (Command::GenData, None),
        Cmd::Probe => (Command::Probe, None),
        Cmd::Validate { inject_fault } => (Command::Validate, inject_fault),
        Cmd::Train => (Command::Train, None),
        Cmd::Sweep => (Command::Sweep, None),
    };
    let job = Job {
        command: command.0,
        config: load_config(&cli.global)?,
        config_path: cli.global.config.as_ref().map(|p| p.display().to_string()),
        fault: command.1,
    };
    let out_dir = cli.global.out_dir.unwrap_or_else(|| PathBuf::from("out"));
    let finished = execute(&job, &out_dir)?;
    match finished.check_failure {
        Some(msg) => Err(CliError::CheckFailed(msg)),
        None => Ok(()),
    }
}

fn run_replay(manifest: &Path, out_dir: Option<&Path>) -> Result<(), CliError> {
    let out_dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => manifest.parent().unwrap_or(Path::new(".")).join("replay"),
    };
    let diffs = replay(manifest, &out_dir)?;
    let mut mismatched = Vec::new();
    for d in &diffs {
        println!("{} {}", if d.matches { "identical" } else { "DIFFERS  " }, d.path);
        if !d.matches {
            mismatched.push(d.path.as_str());
        }
    }
    if mismatched.is_empty() {
        println!("replay reproduced {} files byte for byte", diffs.len());
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("replay differs in: {}", mismatched.join(", "))))
    }
}
