//! Command-line surface: configuration, checkpoints, experiment commands
//! and reports.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use checkpoint::Checkpoint;
pub use config::{RunConfig, SuiteConfig};

#[derive(Debug, Parser)]
#[command(name = "abmll", version, about = "Bayesian meta-learning of low-rank adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the base model and write its checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Meta-train adapters on the seen tasks of the suite.
    Metatrain {
        #[arg(long)]
        config: PathBuf,
        /// Base checkpoint written by `pretrain`.
        #[arg(long)]
        base: PathBuf,
        /// abmll, regular_lora, structured_lora or reptile; overrides the config.
        #[arg(long)]
        method: Option<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Adapt to held-out tasks and score them.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Record files to evaluate instead of the generated held-out tasks.
        #[arg(long)]
        dataset: Vec<PathBuf>,
        #[arg(long)]
        suite_seed: Option<u64>,
        #[arg(long, default_value_t = 10)]
        adapt_steps: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Summarize metric logs across methods and seeds.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}
