use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::error;
use specmon::experiment::{run_experiment, RunOptions};

/// Run a spectrum-monitoring experiment described by a TOML config.
#[derive(Debug, Parser)]
#[command(name = "specmon", version)]
struct Args {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,

    /// Output directory (overridden by SPECMON_OUT).
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Replace the config's seed.
    #[arg(long)]
    seed_override: Option<u64>,

    /// Write per-episode logs and render grids.
    #[arg(long)]
    log_episodes: bool,

    /// Worker threads for episode-parallel evaluation.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let out = std::env::var_os("SPECMON_OUT").map(PathBuf::from).unwrap_or(args.out);
    let options = RunOptions {
        seed_override: args.seed_override,
        log_episodes: args.log_episodes,
        threads: args.threads,
    };
    match run_experiment(&args.config, &out, &options) {
        Ok(report) => {
            for row in &report.scores {
                println!(
                    "{:<24} {:<12} cumulative {:.4}  final-block {:.4}",
                    row.arm, row.spec, row.mean_cumulative_iou, row.mean_final_block_iou
                );
            }
            println!("wrote {} files to {}", report.files.len(), report.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) if e.is_config_error() => {
            error!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(2)
        }
    }
}
