use std::path::PathBuf;
use std::process::ExitCode;

use adapert::model::Ablation;
use adapert::{Error, Result};
use adapert_cli::commands;
use adapert_cli::config::{Overrides, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adapert", version, about = "Graph-conditioned perturbation response prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-perturbation work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// full, no_context, no_non_deg or recon_only.
    #[arg(long, global = true)]
    ablation: Option<Ablation>,
    #[arg(long, global = true)]
    expression: Option<PathBuf>,
    #[arg(long, global = true)]
    graph: Option<PathBuf>,
    #[arg(long, global = true)]
    embeddings: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted synthetic dataset, graph and embeddings.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write a checkpoint and history.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Score a checkpoint on its test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the observed profiles instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Write predicted profiles and selected subgraphs.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Perturbations to predict; defaults to the test split.
        #[arg(long = "perturbation")]
        perturbations: Vec<String>,
    },
    /// Degree statistics before and after top-k filtering.
    GraphStats {
        #[command(flatten)]
        common: Common,
    },
    /// DEG coverage by hop distance from each perturbed gene.
    DegCoverage {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, extra: impl FnOnce(&mut Overrides)) -> Result<RunConfig> {
    let mut o = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        ablation: common.ablation,
        expression: common.expression.clone(),
        graph: common.graph.clone(),
        embeddings: common.embeddings.clone(),
        ..Overrides::default()
    };
    extra(&mut o);
    RunConfig::resolve(common.config.as_deref(), &o)
}

fn set_threads(common: &Common) -> Result<()> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot start {n} worker threads: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            set_threads(&common)?;
            let files = commands::synth(&resolve(&common, |_| {})?)?;
            println!("synthetic data written to {}", files.expression.display());
        }
        Command::Train { common, max_epochs } => {
            set_threads(&common)?;
            let cfg = resolve(&common, |o| o.max_epochs = max_epochs)?;
            let run = commands::train(&cfg)?;
            println!(
                "trained {} epochs; best validation Pearson-delta {:.4} at epoch {}; outputs in {}",
                run.history.epochs.len(),
                run.history.best_val_pearson_delta,
                run.history.best_epoch,
                run.out.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            oracle,
        } => {
            set_threads(&common)?;
            let cfg = resolve(&common, |o| o.checkpoint = checkpoint)?;
            let report = commands::eval(&cfg, oracle)?;
            for (metric, s) in &report.overall {
                println!("{metric:<18} {:.4} ± {:.4} (n = {})", s.mean, s.std, s.n);
            }
        }
        Command::Predict {
            common,
            checkpoint,
            perturbations,
        } => {
            set_threads(&common)?;
            let cfg = resolve(&common, |o| o.checkpoint = checkpoint)?;
            let preds = commands::predict(&cfg, &perturbations)?;
            println!("predicted {} perturbation(s)", preds.len());
        }
        Command::GraphStats { common } => {
            set_threads(&common)?;
            let r = commands::graph_stats(&resolve(&common, |_| {})?)?;
            println!(
                "{} nodes, {} edges, mean degree {:.2}",
                r.original.nodes, r.original.edges, r.original.mean_degree
            );
            if let Some(f) = &r.filtered {
                println!(
                    "top-{} ({:?}): {} edges, mean degree {:.2}, nominations within k: {}",
                    f.k, f.mode, f.stats.edges, f.stats.mean_degree, f.nominations_within_k
                );
            }
        }
        Command::DegCoverage { common } => {
            set_threads(&common)?;
            let r = commands::deg_coverage(&resolve(&common, |_| {})?)?;
            for (h, c) in r.mean_by_hop.iter().enumerate() {
                println!("hop {h}: {c:.4}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
