//! Run manifests and grid sidecar headers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lact_core::geometry::{AngularMask, BeamType, ScanGeometry};
use lact_core::{io, Result};

use crate::config::RunConfig;
use crate::Command;

/// Everything needed to re-run a command: arguments (with absolute paths),
/// seed, thread count and the fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run: RunSection,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub tool_version: String,
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    pub command: Command,
    #[serde(default)]
    pub outputs: Vec<PathBuf>,
    /// Per-slice data range used by SSIM and PSNR (metrics runs).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub data_range: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn path(out: &Path, stem: &str) -> PathBuf {
        out.join(format!("{stem}.run.toml"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_toml(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_toml(path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySummary {
    pub beam_type: BeamType,
    pub num_views: usize,
    pub num_bins: usize,
    pub angular_span_deg: f64,
    pub image_size: (usize, usize),
    pub pixel_size: f64,
}

impl From<&ScanGeometry> for GeometrySummary {
    fn from(g: &ScanGeometry) -> Self {
        GeometrySummary {
            beam_type: g.beam_type,
            num_views: g.num_views,
            num_bins: g.num_bins,
            angular_span_deg: g.angular_span_deg,
            image_size: g.image_size,
            pixel_size: g.pixel_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSummary {
    pub angular_range_deg: f64,
    pub start_deg: f64,
    pub kept_views: usize,
}

impl From<&AngularMask> for MaskSummary {
    fn from(m: &AngularMask) -> Self {
        MaskSummary {
            angular_range_deg: m.angular_range_deg,
            start_deg: m.start_deg,
            kept_views: m.kept_count(),
        }
    }
}

/// Provenance written next to every grid file as `<file>.hdr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridHeader {
    /// `image` or `sinogram`.
    pub content: String,
    pub producer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometrySummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskSummary>,
}

pub fn write_header(
    grid: &Path,
    content: &str,
    producer: &str,
    geometry: Option<&ScanGeometry>,
    mask: Option<&AngularMask>,
) -> Result<()> {
    let header = GridHeader {
        content: content.into(),
        producer: producer.into(),
        geometry: geometry.map(GeometrySummary::from),
        mask: mask.map(MaskSummary::from),
    };
    io::write_toml(&io::sidecar_path(grid), &header)
}
