//! Limited-angle CT toolkit: truncated-sinogram simulation, analytic and
//! ADMM-TV reconstruction, two-stage score-based sampling with per-step ADMM
//! data consistency, a toy metadata-conditioned attention block, and image
//! quality metrics.

pub mod analytic;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod metadata;
pub mod metrics;
pub mod optim;
pub mod phantoms;
pub mod pipeline;
pub mod prior_net;
pub mod projector;
pub mod sampler;

pub use error::{Error, Result};
pub use geometry::{AngularMask, BeamType, GeometryPreset, ScanGeometry};
pub use grid::{Image, Sinogram};
