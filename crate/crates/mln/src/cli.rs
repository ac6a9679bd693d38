//! Command-line surface: `train`, `eval`, and `inspect` subcommands.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{load_run_config, RunConfig};
use crate::error::{MlnError, Result};
use crate::eval::{evaluate, inspect_projector, REPORT_HEADER};
use crate::num::rng::RngStream;
use crate::trainer::{train_loop, METRICS_HEADER};
use clap::{Parser, Subcommand};
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "mln", about = "Meta-learner with linear nulling", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run episodic meta-training and write a checkpoint.
    Train {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV path (default: `<out>.metrics.csv`).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with reference-subset relabeling.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Run configuration (dataset + eval defaults).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shots: Option<usize>,
        /// Queries per class.
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Append the report as a CSV row here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump projector diagnostics for one sampled episode as CSV.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => load_run_config(p),
        None => Ok(RunConfig::default()),
    }
}

/// Dispatches a parsed command line. Returns the process exit code.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, metrics } => {
            let cfg = load_run_config(&config)?;
            let (train_source, _) = cfg.dataset.sources()?;
            let (ckpt, rows) = train_loop(&cfg.train, &cfg.model, &train_source)?;
            save_checkpoint(&ckpt, &out)?;
            let metrics_path = metrics.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".metrics.csv");
                PathBuf::from(p)
            });
            let mut f = std::fs::File::create(&metrics_path)?;
            writeln!(f, "{METRICS_HEADER}")?;
            for row in &rows {
                writeln!(f, "{}", row.to_csv())?;
            }
            println!(
                "trained {} episodes; checkpoint {} metrics {}",
                ckpt.episode_counter,
                out.display(),
                metrics_path.display()
            );
            Ok(())
        }
        Command::Eval { ckpt, config, way, shots, queries, episodes, seed, out } => {
            let cfg = load_config(&config)?;
            let cp = load_checkpoint(&ckpt)?;
            let (_, test_source) = cfg.dataset.sources()?;
            let head = cp.train_config.head_config(cp.emb_config.output_dim());
            let report = evaluate(
                &cp.model(),
                &test_source,
                &head,
                way.unwrap_or(cfg.eval.way),
                shots.unwrap_or(cfg.eval.shots),
                queries.unwrap_or(cfg.eval.queries_per_class),
                episodes.unwrap_or(cfg.eval.episodes),
                seed.unwrap_or(cfg.eval.seed),
            )?;
            println!(
                "{}-way {}-shot over {} episodes: accuracy {:.4} +/- {:.4} ({:.2}s)",
                report.way, report.shots, report.episodes, report.mean_acc, report.ci95,
                report.wall_secs
            );
            if let Some(path) = out {
                let new = !path.exists();
                let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
                if new {
                    writeln!(f, "{REPORT_HEADER}")?;
                }
                writeln!(f, "{}", report.to_csv_row())?;
            }
            Ok(())
        }
        Command::Inspect { ckpt, config, way, shots, seed } => {
            let cfg = load_config(&config)?;
            let cp = load_checkpoint(&ckpt)?;
            let (_, test_source) = cfg.dataset.sources()?;
            let way = way.unwrap_or(cfg.eval.way);
            let shots = shots.unwrap_or(cfg.eval.shots);
            let mut rng = RngStream::new(seed.unwrap_or(cfg.eval.seed));
            let episode = test_source.sample(way, shots, cfg.eval.queries_per_class, &mut rng)?;
            let head = cp.train_config.head_config(cp.emb_config.output_dim());
            let diag = inspect_projector(&cp.model(), &episode, &head)?;
            print!("{}", diag.to_csv());
            Ok(())
        }
    }
}

/// Exit code policy: 0 success, 1 runtime error, 2 usage error (clap's
/// default for parse failures).
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                MlnError::InvalidConfig(_) => 2,
                _ => 1,
            }
        }
    }
}
