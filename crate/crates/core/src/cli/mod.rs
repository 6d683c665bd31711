//! `pds` command-line interface.
//!
//! Every command reads a JSON config (unknown keys are rejected), writes its
//! outputs under `--out` and records a [`RunManifest`](crate::manifest::RunManifest).
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.

mod commands;
mod store;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;

pub use commands::{
    EvaluateConfig, PhantomConfigFile, Stage1File, Stage2File, SynthesizeConfig, DATASET_INDEX, MANIFEST_FILE,
};
pub use store::{load_dataset, load_stage1, load_stage2, DatasetIndex, SubjectEntry};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "pds", version, about = "Cross-modal volume synthesis with pattern-aware diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (file for `synthesize` and `evaluate`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the stage-1 volume before refinement (`synthesize` only).
    #[arg(long)]
    pub pre_refine: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a paired phantom dataset.
    Phantom(CommonArgs),
    /// Train the stage-1 noise and pattern estimators.
    TrainStage1(CommonArgs),
    /// Train the tissue refinement networks on frozen stage-1 outputs.
    TrainStage2(CommonArgs),
    /// Synthesize the complementary modality of one volume.
    Synthesize(CommonArgs),
    /// Compare a generated volume with a reference.
    Evaluate(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Phantom(_) => "phantom",
            Command::TrainStage1(_) => "train-stage1",
            Command::TrainStage2(_) => "train-stage2",
            Command::Synthesize(_) => "synthesize",
            Command::Evaluate(_) => "evaluate",
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::NonFinite { .. } | Error::Diverged { .. } => EXIT_NUMERIC,
        Error::Nifti { .. }
        | Error::Unsupported(_)
        | Error::DimMismatch(_)
        | Error::InvalidArgument(_)
        | Error::Checkpoint(_)
        | Error::Io { .. }
        | Error::Json { .. } => EXIT_DATA,
    }
}

/// Runs one parsed command.
pub fn execute(cli: &Cli) -> crate::Result<()> {
    match &cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::TrainStage1(a) => commands::train_stage1(a),
        Command::TrainStage2(a) => commands::train_stage2(a),
        Command::Synthesize(a) => commands::synthesize(a),
        Command::Evaluate(a) => commands::evaluate(a),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("pds {}: {e}", cli.command.name());
            exit_code(&e)
        }
    }
}
