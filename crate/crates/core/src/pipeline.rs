//! End-to-end diffusion reconstruction: auxiliary sinogram synthesis,
//! quarter-resolution Stage I, 4x bilinear upsampling, full-resolution
//! Stage II.

use serde::{Deserialize, Serialize};

use crate::analytic::{synthesize_aux_sinogram, AuxMethod};
use crate::error::Result;
use crate::geometry::{AngularMask, ScanGeometry};
use crate::grid::{Image, Sinogram};
use crate::optim::ConsistencyConfig;
use crate::prior_net::TokenMatrix;
use crate::sampler::{
    sample_stage1, sample_stage2, PriorModel, SamplerOptions, ScheduleConfig, StageData, StageOutput, STAGE_SCALE,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub stage1: ConsistencyConfig,
    pub stage2: ConsistencyConfig,
    pub schedule: ScheduleConfig,
    /// Defaults to conjugate symmetry for parallel beams and angular
    /// interpolation for fan beams.
    pub aux_method: Option<AuxMethod>,
    pub warm_start: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            stage1: ConsistencyConfig::stage1(),
            stage2: ConsistencyConfig::stage2(),
            schedule: ScheduleConfig::default(),
            aux_method: None,
            warm_start: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionRun {
    /// Stage-I estimate at quarter resolution.
    pub coarse: Image,
    pub image: Image,
    pub y_aux: Sinogram,
    pub stage1: StageOutput,
    pub stage2: StageOutput,
}

/// Stage II draws from `seed + 1` so the two stages use independent noise.
#[allow(clippy::too_many_arguments)]
pub fn run_diffusion(
    prior: &dyn PriorModel,
    metadata: &TokenMatrix,
    measured: &Sinogram,
    mask: &AngularMask,
    geometry: &ScanGeometry,
    cfg: &DiffusionConfig,
    seed: u64,
    keep_snapshots: bool,
) -> Result<DiffusionRun> {
    let method = cfg.aux_method.unwrap_or_else(|| AuxMethod::default_for(geometry));
    let y_aux = synthesize_aux_sinogram(measured, mask, geometry, method)?;
    let low_geometry = geometry.downscaled(STAGE_SCALE)?;
    let low_measured = measured.downsample_bins(STAGE_SCALE)?;
    let low_aux = y_aux.downsample_bins(STAGE_SCALE)?;
    let options = SamplerOptions {
        warm_start: cfg.warm_start,
        keep_snapshots,
    };
    let stage1 = sample_stage1(
        prior,
        metadata,
        &StageData {
            measured: &low_measured,
            y_aux: Some(&low_aux),
            mask,
            geometry: &low_geometry,
        },
        &cfg.schedule,
        &cfg.stage1,
        seed,
        &options,
    )?;
    let coarse = stage1.image.clone();
    let stage2 = sample_stage2(
        prior,
        &coarse,
        metadata,
        &StageData {
            measured,
            y_aux: Some(&y_aux),
            mask,
            geometry,
        },
        &cfg.schedule,
        &cfg.stage2,
        seed.wrapping_add(1),
        &options,
    )?;
    Ok(DiffusionRun {
        coarse,
        image: stage2.image.clone(),
        y_aux,
        stage1,
        stage2,
    })
}
