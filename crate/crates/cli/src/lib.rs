//! Command-line driver for continual-learning experiments with the
//! Lipschitz regularizer: runs, α×β sweeps, buffer poisoning and
//! post-hoc analyses of saved checkpoints.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::AnalysisKind;
use crate::config::ExperimentConfig;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "lider", version, about = "Rehearsal continual-learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (strict JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seeds replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output root; falls back to `out_dir`, then $LIDER_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    fn seed_list(&self) -> Option<Vec<u64>> {
        self.seed.map(|s| vec![s]).or_else(|| self.seeds.clone())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every (method, seed) cell and write accuracy matrices.
    Run(RunArgs),
    /// Repeat the run over a grid of regularizer weights.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        beta: Vec<f64>,
    },
    /// Repeat the run for each buffer label-poisoning probability.
    Poison {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "p", value_delimiter = ',', required = true)]
        p: Vec<f64>,
    },
    /// Analyze a saved checkpoint: surface, guess, perturb or lipschitz.
    Analyze {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Seed of the run that produced the checkpoint.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs a parsed command line and returns the output root.
pub fn execute(cli: Cli) -> CliResult<PathBuf> {
    match cli.command {
        Command::Run(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            commands::run(cfg, args.seed_list(), args.jobs, args.out.as_deref())
        }
        Command::Sweep { run, alpha, beta } => {
            let cfg = ExperimentConfig::load(&run.config)?;
            commands::sweep(cfg, &alpha, &beta, run.seed_list(), run.jobs, run.out.as_deref())
        }
        Command::Poison { run, p } => {
            let cfg = ExperimentConfig::load(&run.config)?;
            commands::poison(cfg, &p, run.seed_list(), run.jobs, run.out.as_deref())
        }
        Command::Analyze {
            kind,
            checkpoint,
            config,
            seed,
            out,
        } => {
            let kind: AnalysisKind = kind.parse()?;
            let cfg = ExperimentConfig::load(&config)?;
            commands::analyze(&cfg, kind, &checkpoint, seed, out.as_deref())
        }
    }
}
