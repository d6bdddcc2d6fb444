use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gsmap_cli::{
    cmd_eval, cmd_fit, cmd_generate, cmd_sweep, init_threads, metrics_json, parse_values,
    CliResult, Failure, RunConfig,
};
use gsmap_core::SweepParam;

#[derive(Parser)]
#[command(
    name = "gsmap",
    version,
    about = "Gaussian-sequence HD map fitting and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded synthetic scenes with ground-truth masks.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Fit a Gaussian map to one scene.
    Fit {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print AP metrics of predictions against ground truth as JSON.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit every scene once per parameter value and tabulate the results.
    Sweep {
        #[arg(long, value_parser = ["lambda_r", "n_gaussians"])]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the CSV and JSON tables.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Generate { config, out, count } => {
            let cfg = RunConfig::load(config.as_deref())?;
            cmd_generate(&cfg, &out, count)?;
        }
        Command::Fit { scene, config, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let report = cmd_fit(&cfg, &scene, &out)?;
            eprintln!(
                "fit finished: {} iterations, loss {:.6} -> {:.6}, {:.2}s",
                report.iterations,
                report.initial.total,
                report.final_metrics.loss.total,
                report.wall_time
            );
        }
        Command::Eval { pred, gt, config } => {
            let cfg = RunConfig::load(config.as_deref())?;
            print!("{}", metrics_json(&cmd_eval(&cfg, &pred, &gt)?));
        }
        Command::Sweep {
            param,
            values,
            scenes,
            config,
            out,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let param: SweepParam = param.parse().map_err(|e| Failure::config(format!("{e}")))?;
            let rows = cmd_sweep(&cfg, param, &parse_values(&values)?, &scenes, &out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&rows).expect("rows serialize")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
