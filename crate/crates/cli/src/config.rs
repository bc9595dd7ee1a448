//! Run configuration: one TOML file with a section per pipeline stage. Every
//! section is optional and falls back to its defaults; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lact_core::analytic::{AuxMethod, FilterSpec};
use lact_core::geometry::{make_mask, AngularMask, GeometryPreset, ScanGeometry};
use lact_core::metadata::Category;
use lact_core::metrics::MetricOptions;
use lact_core::optim::ConsistencyConfig;
use lact_core::phantoms::{PhantomKind, PhantomSpec, STANDARD_RANGES_DEG};
use lact_core::pipeline::DiffusionConfig;
use lact_core::prior_net::PriorConfig;
use lact_core::sampler::{ScheduleConfig, STAGE_SCALE};
use lact_core::{io, Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub mask: MaskConfig,
    pub consistency: ConsistencySection,
    pub schedule: ScheduleConfig,
    pub prior: PriorConfig,
    pub metadata: MetadataConfig,
    pub metrics: MetricOptions,
    pub io: IoConfig,
    pub fbp: FilterSpec,
    pub noise: NoiseConfig,
    pub phantom: PhantomConfig,
    pub dataset: DatasetConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            Some(p) => io::read_toml(p)?,
            None => RunConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.consistency.stage1.validate()?;
        self.consistency.stage2.validate()?;
        self.consistency.admm_tv.validate()?;
        self.schedule.build()?;
        self.fbp.validate()?;
        if !(self.noise.sigma >= 0.0) {
            return Err(Error::Config("noise.sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn diffusion(&self) -> DiffusionConfig {
        DiffusionConfig {
            stage1: self.consistency.stage1.clone(),
            stage2: self.consistency.stage2.clone(),
            schedule: self.schedule.clone(),
            aux_method: self.consistency.aux_method,
            warm_start: self.consistency.warm_start,
        }
    }

    pub fn phantom_spec(&self, kind: PhantomKind, seed: u64) -> PhantomSpec {
        PhantomSpec {
            kind,
            count: self.phantom.count,
            size: self.geometry.image_size(),
            seed,
            intensity_range: self.phantom.intensity_range,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryKind {
    Parallel,
    CtrateFan,
    ClinicalFan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub preset: GeometryKind,
    /// Square image side in pixels.
    pub size: usize,
    /// Parallel beam only; fan presets fix their own sampling.
    pub num_views: usize,
    pub span_deg: f64,
    pub num_bins: Option<usize>,
    pub pixel_size: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            preset: GeometryKind::Parallel,
            size: 128,
            num_views: 360,
            span_deg: 360.0,
            num_bins: None,
            pixel_size: 1.0,
        }
    }
}

impl GeometryConfig {
    pub fn image_size(&self) -> (usize, usize) {
        (self.size, self.size)
    }

    pub fn build(&self) -> Result<ScanGeometry> {
        match self.preset {
            GeometryKind::CtrateFan => ScanGeometry::preset(GeometryPreset::CtrateFan, self.size),
            GeometryKind::ClinicalFan => ScanGeometry::preset(GeometryPreset::ClinicalFan, self.size),
            GeometryKind::Parallel => match self.num_bins {
                Some(bins) => ScanGeometry::parallel_with_bins(
                    self.num_views,
                    bins,
                    self.span_deg,
                    self.image_size(),
                    self.pixel_size,
                ),
                None => {
                    let g = ScanGeometry::parallel(self.num_views, self.span_deg, self.image_size(), self.pixel_size)?;
                    // Keep the detector divisible by the Stage I factor so the
                    // default geometry also serves diffusion reconstruction.
                    let bins = g.num_bins.next_multiple_of(STAGE_SCALE);
                    if self.size % STAGE_SCALE != 0 || bins == g.num_bins {
                        return Ok(g);
                    }
                    ScanGeometry::parallel_with_bins(
                        self.num_views,
                        bins,
                        self.span_deg,
                        self.image_size(),
                        self.pixel_size,
                    )
                }
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub angular_range_deg: f64,
    pub start_deg: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            angular_range_deg: 90.0,
            start_deg: 0.0,
        }
    }
}

impl MaskConfig {
    pub fn build(&self, geometry: &ScanGeometry) -> Result<AngularMask> {
        make_mask(geometry, self.angular_range_deg, self.start_deg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencySection {
    pub stage1: ConsistencyConfig,
    pub stage2: ConsistencyConfig,
    /// Weights of the standalone ADMM-TV baseline (`lambda2_0` is ignored).
    pub admm_tv: ConsistencyConfig,
    pub admm_tv_iters: usize,
    /// `None` picks conjugate symmetry for parallel and interpolation for fan beams.
    pub aux_method: Option<AuxMethod>,
    pub warm_start: bool,
}

impl Default for ConsistencySection {
    fn default() -> Self {
        ConsistencySection {
            stage1: ConsistencyConfig::stage1(),
            stage2: ConsistencyConfig::stage2(),
            admm_tv: ConsistencyConfig {
                lambda1: 1.0,
                lambda2_0: 0.0,
                mu: 0.05,
                rho: 0.5,
                cg_iters: 10,
                ..ConsistencyConfig::stage1()
            },
            admm_tv_iters: 40,
            aux_method: None,
            warm_start: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetadataConfig {
    /// Record file; without one the prior runs unconditioned.
    pub path: Option<PathBuf>,
    pub record: usize,
    pub ablate: Vec<Category>,
    /// Seed of the prompt embedding, independent of the sampling seed.
    pub embed_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    /// Also write 16-bit PGM previews of reconstructed images.
    pub previews: bool,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig { previews: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Standard deviation of additive Gaussian sinogram noise.
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub kind: PhantomKind,
    /// Number of random shapes for `ellipse_set` and `random_blobs`.
    pub count: usize,
    pub intensity_range: (f64, f64),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            kind: PhantomKind::SheppLoganLike,
            count: 6,
            intensity_range: (0.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Phantom kinds, cycled over the phantom index.
    pub kinds: Vec<PhantomKind>,
    pub num_phantoms: usize,
    pub ranges_deg: Vec<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kinds: vec![PhantomKind::SheppLoganLike, PhantomKind::EllipseSet, PhantomKind::RandomBlobs],
            num_phantoms: 2,
            ranges_deg: STANDARD_RANGES_DEG.to_vec(),
        }
    }
}
