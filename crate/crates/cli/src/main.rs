use std::path::PathBuf;
use std::process::ExitCode;

use acol_core::experiment::{
    run_baseline, run_eval, run_export_graph, run_scenarios, run_train, ExperimentConfig,
    GraphSource, RunOptions, CHECKPOINT_FILE,
};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "acol", version, about = "Train and evaluate ACOL networks with GAR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppresses per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
        out.or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs").join(format!("seed{}", cfg.seed)))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    /// Rectified activities.
    B,
    /// Parent probabilities.
    Y,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its artifacts.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured test set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file, or a run directory containing one.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the configured scenario sweep.
    Scenarios {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-parent k-means baseline on the configured split.
    Baseline {
        #[command(flatten)]
        common: Common,
    },
    /// Write the thresholded similarity graph of test examples.
    ExportGraph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Edge list destination.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, value_enum, default_value = "b")]
        which: Which,
        /// Number of test examples used as vertices.
        #[arg(long, default_value_t = 500)]
        limit: usize,
    },
}

fn resolve_checkpoint(path: PathBuf) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out } => {
            let cfg = common.load()?;
            let dir = common.out_dir(&cfg, out);
            let summary = run_train(&cfg, &dir, RunOptions { quiet: common.quiet })?;
            println!("{} out={}", summary.line(), dir.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let summary = run_eval(&resolve_checkpoint(checkpoint), &cfg)?;
            println!("{}", summary.line());
        }
        Command::Scenarios { common, out } => {
            let cfg = common.load()?;
            let dir = common.out_dir(&cfg, out);
            let report = run_scenarios(&cfg, &dir, RunOptions { quiet: common.quiet })?;
            print!("{}", report.to_csv());
            print!("{}", report.aggregate_csv());
        }
        Command::Baseline { common } => {
            let cfg = common.load()?;
            let s = run_baseline(&cfg)?;
            let acc = s.acc.map_or_else(|| "na".to_string(), |a| format!("{a:.6}"));
            println!("baseline_acc={acc} test_examples={}", s.test_examples);
        }
        Command::ExportGraph {
            common,
            checkpoint,
            out,
            threshold,
            which,
            limit,
        } => {
            let cfg = common.load()?;
            let source = match which {
                Which::B => GraphSource::Activity,
                Which::Y => GraphSource::Parents,
            };
            let edges = run_export_graph(
                &resolve_checkpoint(checkpoint),
                &cfg,
                source,
                threshold,
                limit,
                &out,
            )?;
            println!("edges={edges} out={}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
