//! Thin CLI over the pipeline commands. All logic lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fba::commands;
use fba::config::{load_config, OutPaths, RunConfig};

#[derive(Parser)]
#[command(
    name = "fba",
    about = "CNN object-detection harness with category-specific feature-based attention",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the backbone on the labeled pool and write the weight file.
    Train(Common),
    /// Compute per-category feature patterns from the trained backbone.
    ExtractPatterns(Common),
    /// Generate the array and merged challenge imagesets.
    MakeImagesets(Common),
    /// Run the detection sweep and write the results table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Worker threads for the sweep (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Resume an interrupted sweep (this is also the default behavior).
        #[arg(long)]
        resume: bool,
    },
    /// Produce delta tables, ROC points, win histograms and the
    /// perturbation-control comparison from the results table.
    Analyze(Common),
}

fn load(common: &Common) -> fba::Result<(RunConfig, OutPaths)> {
    let mut config = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| config.out_dir.clone());
    Ok((config, OutPaths::new(out)))
}

fn run() -> fba::Result<()> {
    // clap's own usage failures map to exit code 1 below.
    let cli = Cli::try_parse().map_err(|e| {
        let _ = e.print();
        fba::Error::Config { detail: String::new() }
    })?;
    match &cli.command {
        Command::Train(common) => {
            let (config, paths) = load(common)?;
            let summary = commands::cmd_train(&config, &paths)?;
            println!(
                "trained {} epochs: loss {:.4}, accuracy {:.3} -> {}",
                summary.epochs,
                summary.final_loss,
                summary.final_accuracy,
                summary.weights_path.display()
            );
        }
        Command::ExtractPatterns(common) => {
            let (config, paths) = load(common)?;
            let summary = commands::cmd_extract_patterns(&config, &paths)?;
            println!(
                "extracted patterns for {} categories -> {}",
                summary.categories.len(),
                summary.patterns_path.display()
            );
        }
        Command::MakeImagesets(common) => {
            let (config, paths) = load(common)?;
            let summary = commands::cmd_make_imagesets(&config, &paths)?;
            println!(
                "generated {} array + {} merged composites -> {}",
                summary.array_count,
                summary.merged_count,
                summary.images_dir.display()
            );
        }
        Command::Evaluate { common, workers, resume } => {
            let (config, paths) = load(common)?;
            let summary = commands::cmd_evaluate(&config, &paths, *workers, *resume)?;
            println!(
                "wrote {} records ({} cells already present) -> {}",
                summary.records_written,
                summary.cells_skipped,
                summary.results_path.display()
            );
            if summary.control_records_written > 0 {
                println!("control sweep wrote {} records", summary.control_records_written);
            }
        }
        Command::Analyze(common) => {
            let (config, paths) = load(common)?;
            let summary = commands::cmd_analyze(&config, &paths)?;
            for file in &summary.files {
                println!("wrote {}", file.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if !err.to_string().is_empty() {
                eprintln!("error: {err}");
            }
            if err.is_usage() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
