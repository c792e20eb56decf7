use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use hyperfed::experiment::{self, RunOptions, RunSummary};

#[derive(Parser)]
#[command(name = "hyperfed", version, about = "Hypernetwork-driven federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config.
    Run {
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for client training (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Print the planned phases and exit without training.
        #[arg(long)]
        dry_run: bool,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop with a checkpoint after this many completed rounds.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Dataset directory (default: $HYPERFED_DATA_DIR, then ./data).
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Continue a run from its checkpoint.
    Resume {
        checkpoint: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Turn a metrics CSV into a JSON line-chart description.
    Plot {
        csv: PathBuf,
        /// Defaults to the CSV path with a `.chart.json` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn report(summary: &RunSummary) {
    if summary.interrupted {
        println!(
            "stopped after {} rounds; resume with: hyperfed resume {}",
            summary.rounds_completed,
            summary.checkpoint_path.display()
        );
        return;
    }
    match summary.final_mean_accuracy {
        Some(a) => println!("final mean personalized accuracy: {:.4}", a),
        None => println!("no evaluation recorded"),
    }
    if let Some(a) = summary.novel_mean_accuracy {
        println!("held-out client mean accuracy: {:.4}", a);
    }
    println!("metrics: {}", summary.metrics_path.display());
}

fn plot(csv: &Path, out: Option<PathBuf>) -> Result<()> {
    let text = std::fs::read_to_string(csv).with_context(|| format!("reading {}", csv.display()))?;
    let title = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let chart = experiment::chart_from_csv(&title, &text)?;
    let out = out.unwrap_or_else(|| csv.with_extension("chart.json"));
    std::fs::write(&out, serde_json::to_string_pretty(&chart)?)?;
    println!("chart: {}", out.display());
    Ok(())
}

fn main_inner() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            workers,
            dry_run,
            out,
            stop_after,
            data_dir,
        } => {
            let mut cfg = experiment::parse_config(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let opts = RunOptions {
                workers,
                data_dir,
                out_dir: out,
                stop_after,
                config_dir: config.parent().map(Path::to_path_buf),
            };
            if dry_run {
                print!("{}", experiment::dry_run(&cfg, &opts)?);
                return Ok(());
            }
            report(&experiment::run(&cfg, &opts)?);
        }
        Command::Resume {
            checkpoint,
            workers,
            stop_after,
            data_dir,
        } => {
            let opts = RunOptions {
                workers,
                data_dir,
                stop_after,
                ..RunOptions::default()
            };
            report(&experiment::resume(&checkpoint, &opts)?);
        }
        Command::Plot { csv, out } => plot(&csv, out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match main_inner() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
