//! `sceneloc`: batch front end for catalog extraction, head training,
//! multi-episode benchmarks and statistical comparison.

mod benchmark;
mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sceneloc_core::HeadKind;

#[derive(Debug, Parser)]
#[command(name = "sceneloc", version, about = "Video scene-location recognition experiments")]
pub struct Cli {
    /// Seed for all randomness of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

fn parse_head(s: &str) -> Result<HeadKind, String> {
    s.parse().map_err(|e: sceneloc_core::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample frames per catalog scene and write a feature file.
    Extract {
        #[arg(long)]
        catalog: PathBuf,
        /// `mock` or `file:<path>`.
        #[arg(long, default_value = "mock")]
        backbone: String,
        /// Frames sampled per scene.
        #[arg(long, default_value_t = 20)]
        frames: usize,
        /// Feature width of the mock backbone.
        #[arg(long, default_value_t = 4096)]
        dim: usize,
        /// Undersample classes above this multiple of the rarest class.
        #[arg(long)]
        cap_factor: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one head on one feature file.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_parser = parse_head)]
        head: HeadKind,
        /// Training config (`key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path; the report goes to `<out>.report.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every head on every episode with several replicates.
    Benchmark {
        #[arg(long, num_args = 1.., required = true)]
        features: Vec<PathBuf>,
        #[arg(long, default_value_t = 7)]
        replicates: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Statistical comparison of a benchmark run matrix.
    Compare {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic episode feature files.
    Synth {
        /// Synthetic generator config (`key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
