mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use headlab::exec::Exec;
use headlab::importance::SelectionMode;
use headlab::similarity::{RdmCorrelation, SimilarityMetric};
use headlab::Error;

/// Head importance, pruning dissociation and important-head training.
#[derive(Parser, Debug)]
#[command(name = "headlab", version, about)]
pub struct Cli {
    /// Output directory (overrides HEADLAB_OUT and the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run every data-parallel loop on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `schedule.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `schedule.delta`.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Overrides `schedule.alpha`.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Stop and checkpoint after this many optimizer steps.
    #[arg(long)]
    pub stop_at: Option<usize>,
    /// Continue from a checkpoint directory written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config; defaults to the `config.json` stored with the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated subset of tasks, in the order to report them.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Multi-task training, with an IAT phase when delta > 0.
    Train(TrainArgs),
    /// Training with an IAT phase; optionally compared with vanilla training over seeds.
    Iat {
        #[command(flatten)]
        train: TrainArgs,
        /// Seeds for a paired IAT-vs-vanilla comparison.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Head importance scores of every task.
    Importance {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Performance with each task's selected heads pruned.
    PruneEval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        selection: Option<SelectionMode>,
    },
    /// Dissociation scores from a performance CSV or a checkpoint directory.
    Dissociate {
        /// CSV of measured performances, or a checkpoint directory.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        selection: Option<SelectionMode>,
    },
    /// Few-shot transfer between every ordered task pair, with AHP affinities.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Samples per target task.
        #[arg(long)]
        k: Option<usize>,
    },
    /// DSE / CRA from per-task checkpoints, AHP from a transfer CSV.
    Similarity {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `TASK=DIR`, repeatable.
        #[arg(long = "model")]
        models: Vec<String>,
        #[arg(long)]
        probes: Option<PathBuf>,
        #[arg(long = "metric", value_delimiter = ',')]
        metrics: Vec<SimilarityMetric>,
        /// `transfer.csv` for AHP.
        #[arg(long)]
        transfer: Option<PathBuf>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        rdm: Option<RdmCorrelation>,
    },
    /// Correlates a similarity matrix with pairwise dissociation scores.
    Correlate {
        /// Similarity CSV (`metric,source,target,value`).
        #[arg(long)]
        similarity: PathBuf,
        /// `task_a,task_b,score` CSV, or a report.json with two-task dissociations.
        #[arg(long)]
        scores: PathBuf,
    },
    /// Merges report.json files and rewrites their CSVs.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Runs the gradient and invariant suites.
    Selfcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
