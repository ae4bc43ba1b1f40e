mod commands;
mod error;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "buda", version, about = "Blip-up/down 3D-EPI simulation, reconstruction and T2* mapping")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 = one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate phantom, coils, shot plan and acquired k-space.
    Simulate {
        /// Check that noiseless data equals the forward model exactly.
        #[arg(long)]
        verify: bool,
    },
    /// Estimate the off-resonance field from simulated data.
    EstimateField {
        #[arg(long)]
        data: PathBuf,
    },
    /// Reconstruct with the configured methods.
    Recon {
        #[arg(long)]
        data: PathBuf,
        /// Field map to use instead of the configured source.
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// Fit T2* to every reconstruction in a recon directory.
    MapT2star {
        #[arg(long)]
        recon: PathBuf,
    },
    /// Score reconstructions against the simulation truth.
    Evaluate {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// T2* maps from map-t2star.
        #[arg(long)]
        t2star: Option<PathBuf>,
        /// ROI boxes (TOML); derived from the phantom when absent.
        #[arg(long)]
        rois: Option<PathBuf>,
        /// Bland-Altman pairs `a:b`; names are methods or `reference`.
        #[arg(long, value_delimiter = ',')]
        pairs: Vec<String>,
    },
    /// Run every stage into subdirectories of --out.
    Pipeline,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if !buda_core::exec::init_threads(cli.global.threads) {
        log::warn!("thread pool already initialized");
    }
    let g = &cli.global;
    match cli.command {
        Command::Simulate { verify } => commands::simulate(g, verify),
        Command::EstimateField { data } => commands::estimate_field(g, &data),
        Command::Recon { data, field } => commands::recon(g, &data, field.as_deref()),
        Command::MapT2star { recon } => commands::map_t2star(g, &recon),
        Command::Evaluate { recon, truth, t2star, rois, pairs } => {
            commands::evaluate(g, &recon, &truth, t2star.as_deref(), rois.as_deref(), &pairs)
        }
        Command::Pipeline => commands::pipeline(g),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
