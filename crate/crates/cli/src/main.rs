//! `bift`: data generation, training, evaluation, gradient checks and the
//! conditioning-scheme ablation harness.

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bift", version, about = "Guided image-to-image translation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Experiment config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `[train] seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `[out] dir`; the run directory is created inside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write PGM/PPM previews.
    #[arg(long)]
    pub preview: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as tensor blobs plus a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write predictions for test samples as images.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of test samples to render.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Finite-difference check of every op and composite graph.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupts the backward pass of one op.
        #[arg(long, hide = true)]
        fault_inject: Option<String>,
    },
    /// Train every requested scheme variant over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated schemes; defaults to the config's scheme.
        #[arg(long, value_delimiter = ',')]
        schemes: Vec<String>,
        /// Number of seeds, counting up from the base seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Comma-separated FT layer counts for modulated schemes.
        #[arg(long, value_delimiter = ',')]
        ft_layers: Vec<usize>,
        /// Comma-separated affine variants for modulated schemes.
        #[arg(long, value_delimiter = ',')]
        affine: Vec<String>,
        /// Comma-separated placements for modulated schemes.
        #[arg(long, value_delimiter = ',')]
        placement: Vec<String>,
    },
}

/// Failure classes mapped onto process exit codes.
pub enum Failure {
    /// A check or training run failed: exit 1.
    Check(String),
    /// Bad configuration, input or IO: exit 2.
    Usage(String),
}

impl From<bift::Error> for Failure {
    fn from(e: bift::Error) -> Self {
        use bift::Error as E;
        match e {
            E::Config(_)
            | E::Io(_)
            | E::InvalidDims(_)
            | E::BadMagic { .. }
            | E::UnsupportedVersion(_)
            | E::BadRank(_)
            | E::UnknownDType(_)
            | E::DTypeMismatch { .. }
            | E::Truncated(_)
            | E::ConfigHashMismatch => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Train { common, resume } => commands::train(&common, resume.as_deref()),
        Command::Eval { common, checkpoint } => commands::eval(&common, &checkpoint),
        Command::Render { common, checkpoint, count } => commands::render(&common, &checkpoint, count),
        Command::Gradcheck { seed, fault_inject } => commands::gradcheck(seed, fault_inject.as_deref()),
        Command::Ablate { common, schemes, seeds, ft_layers, affine, placement } => {
            commands::ablate(&common, &schemes, seeds, &ft_layers, &affine, &placement)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
