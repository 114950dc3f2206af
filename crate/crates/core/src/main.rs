use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use glt_track::commands;
use glt_track::eval::AblationAxis;
use glt_track::{Config, Result};

/// Single-object tracking in point clouds with transformer-enhanced voting.
#[derive(Parser)]
#[command(name = "glt-track", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, loss curve and config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track one sequence directory and write per-frame boxes as CSV.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint; writes a JSON report and a per-frame CSV beside it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the eval data named in the
        /// checkpoint's config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate one variant per value along an ablation axis.
    Ablate {
        /// m, n or components.
        #[arg(long)]
        axis: String,
        #[arg(long, num_args = 1.., required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from a JSON description.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load_config(config.as_ref())?;
            let summary = commands::train_to_dir(&cfg, &out)?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoint {}",
                summary.steps,
                summary.final_loss,
                summary.checkpoint.display()
            );
        }
        Command::Track { checkpoint, sequence, out } => {
            let result = commands::track_to_csv(&checkpoint, &sequence, &out)?;
            println!("tracked {} frames ({} flagged)", result.boxes.len(), result.flagged_count());
        }
        Command::Eval { checkpoint, data, report } => {
            let eval = commands::eval_to_report(&checkpoint, data.as_deref(), &report)?;
            println!(
                "success {:.2}  precision {:.2}  over {} frames",
                eval.report.success, eval.report.precision, eval.report.frames
            );
        }
        Command::Ablate { axis, values, out, config } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = load_config(config.as_ref())?;
            commands::ablate_to_csv(&cfg, axis, &values, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Gen { spec, out } => {
            let n = commands::generate_to_dir(&spec, &out)?;
            println!("wrote {n} sequences to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

