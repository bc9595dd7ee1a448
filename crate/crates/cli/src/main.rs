//! `lact`: limited-angle CT pipeline driver.
//!
//! Exit codes: 0 success, 2 configuration / usage / I/O error, 3 numeric
//! failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use lact_core::analytic::AuxMethod;
use lact_core::phantoms::PhantomKind;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] lact_core::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "lact", version, about = "Limited-angle CT simulation, reconstruction and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML); omitted sections use defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory (default: current directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate one phantom image.
    Phantom(PhantomArgs),
    /// Simulate a truncated-sinogram dataset.
    Dataset(DatasetArgs),
    /// Forward-project an image, optionally masking and adding noise.
    Project(ProjectArgs),
    /// Write an angular truncation mask.
    Mask(MaskArgs),
    /// Synthesize the auxiliary sinogram on the missing arc.
    AuxSino(AuxArgs),
    /// Reconstruct an image from a (truncated) sinogram.
    Recon(ReconArgs),
    /// Image-quality table of reconstructions against references.
    Metrics(MetricsArgs),
    /// Per-step convergence comparison of two diffusion runs.
    Trace(TraceArgs),
    /// Re-run a command from its run manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PhantomKindArg {
    EllipseSet,
    SheppLoganLike,
    RandomBlobs,
}

impl From<PhantomKindArg> for PhantomKind {
    fn from(k: PhantomKindArg) -> Self {
        match k {
            PhantomKindArg::EllipseSet => PhantomKind::EllipseSet,
            PhantomKindArg::SheppLoganLike => PhantomKind::SheppLoganLike,
            PhantomKindArg::RandomBlobs => PhantomKind::RandomBlobs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct PhantomArgs {
    /// Overrides `phantom.kind`.
    #[arg(long, value_enum)]
    pub kind: Option<PhantomKindArg>,
    #[arg(long, default_value = "phantom")]
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct DatasetArgs {
    /// Overrides `dataset.num_phantoms`.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct ProjectArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Geometry file; defaults to the `[geometry]` section.
    #[arg(long)]
    pub geometry: Option<PathBuf>,
    /// Mask file; without one all views are kept.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value = "sinogram")]
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct MaskArgs {
    #[arg(long)]
    pub geometry: Option<PathBuf>,
    /// Overrides `mask.angular_range_deg`.
    #[arg(long)]
    pub range: Option<f64>,
    /// Overrides `mask.start_deg`.
    #[arg(long)]
    pub start: Option<f64>,
    #[arg(long, default_value = "mask")]
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AuxMethodArg {
    ConjugateSymmetry,
    AngularInterpolation,
}

impl From<AuxMethodArg> for AuxMethod {
    fn from(m: AuxMethodArg) -> Self {
        match m {
            AuxMethodArg::ConjugateSymmetry => AuxMethod::ConjugateSymmetry,
            AuxMethodArg::AngularInterpolation => AuxMethod::AngularInterpolation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct AuxArgs {
    #[arg(long)]
    pub sino: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub geometry: Option<PathBuf>,
    /// Overrides `consistency.aux_method`.
    #[arg(long, value_enum)]
    pub method: Option<AuxMethodArg>,
    #[arg(long, default_value = "aux")]
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fbp,
    AdmmTv,
    Diffusion,
}

/// Input either as explicit files or as a dataset entry.
#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct ReconArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long, conflicts_with = "dataset")]
    pub sino: Option<PathBuf>,
    #[arg(long, conflicts_with = "dataset")]
    pub mask: Option<PathBuf>,
    #[arg(long, conflicts_with = "dataset")]
    pub geometry: Option<PathBuf>,
    /// Dataset directory; use with `--entry`.
    #[arg(long, requires = "entry")]
    pub dataset: Option<PathBuf>,
    #[arg(long, requires = "dataset")]
    pub entry: Option<String>,
    /// Metadata record file (overrides `metadata.path`).
    #[arg(long, conflicts_with = "dataset")]
    pub metadata: Option<PathBuf>,
    /// Record index (overrides `metadata.record`).
    #[arg(long)]
    pub record: Option<usize>,
    /// Comma-separated categories to drop (overrides `metadata.ablate`).
    #[arg(long)]
    pub ablate: Option<String>,
    /// Write per-step iterates and trace tables (diffusion only).
    #[arg(long)]
    pub snapshots: bool,
    /// Output stem; defaults to the entry id or `recon`.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct MetricsArgs {
    /// Reconstruction grid file or directory of `<slice_id>.grid` files.
    #[arg(long)]
    pub test: PathBuf,
    /// Reference grid file or directory, matched by file stem.
    #[arg(long, required_unless_present = "dataset", conflicts_with = "dataset")]
    pub reference: Option<PathBuf>,
    /// Dataset directory whose entry images serve as references.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "metrics")]
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct TraceArgs {
    /// Snapshot directory of the first run (e.g. with metadata).
    #[arg(long)]
    pub a: PathBuf,
    /// Snapshot directory of the second run (e.g. without metadata).
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, default_value = "trace")]
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
