//! Two-stage stochastic sampling with per-step data consistency.
//!
//! Each step moves the iterate along `d = v + ½σ·s` by `Δt = σ_i − σ_{i+1}`,
//! adds `sqrt(σ_i Δt)·ε`, then applies one warm-started consistency call.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AngularMask, ScanGeometry};
use crate::grid::{Image, Sinogram};
use crate::optim::{consistency_step, AdmmState, ConsistencyConfig, ConsistencyProblem};
use crate::prior_net::TokenMatrix;
use crate::projector::Projector;

pub const KARRAS_RHO: f64 = 7.0;
pub const DEFAULT_NUM_STEPS: usize = 40;
/// Resolution factor between Stage I and Stage II.
pub const STAGE_SCALE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    KarrasLike,
    Linear,
}

/// Decreasing noise levels `σ_0 > … > σ_{T−1} > σ_T = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }

    /// `Δt_i = σ_i − σ_{i+1}`.
    pub fn step_size(&self, i: usize) -> f64 {
        self.sigmas[i] - self.sigmas[i + 1]
    }

    /// Per-pixel variance of a pure noise-integration run (zero prior, no
    /// consistency): `σ_0² + Σ σ_i Δt_i`.
    pub fn accumulated_variance(&self) -> f64 {
        let s0 = self.sigmas[0];
        s0 * s0 + (0..self.num_steps()).map(|i| self.sigmas[i] * self.step_size(i)).sum::<f64>()
    }
}

/// Builds a schedule of `num_steps` levels from `sigma_max` down to
/// `sigma_min`, followed by a final 0. `karras_like` interpolates linearly in
/// `σ^(1/7)`; `linear` interpolates in `σ`.
pub fn make_schedule(kind: ScheduleKind, num_steps: usize, sigma_min: f64, sigma_max: f64) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(Error::Config("num_steps must be at least 1".into()));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(Error::Config(format!(
            "need 0 < sigma_min < sigma_max, got sigma_min = {sigma_min}, sigma_max = {sigma_max}"
        )));
    }
    let mut sigmas: Vec<f64> = if num_steps == 1 {
        vec![sigma_max]
    } else {
        let last = (num_steps - 1) as f64;
        match kind {
            ScheduleKind::KarrasLike => {
                let (a, b) = (sigma_max.powf(1.0 / KARRAS_RHO), sigma_min.powf(1.0 / KARRAS_RHO));
                (0..num_steps).map(|i| (a + i as f64 / last * (b - a)).powf(KARRAS_RHO)).collect()
            }
            ScheduleKind::Linear => (0..num_steps)
                .map(|i| sigma_max + i as f64 / last * (sigma_min - sigma_max))
                .collect(),
        }
    };
    // Pin the end points so they do not pick up rounding from the power map.
    sigmas[0] = sigma_max;
    if num_steps > 1 {
        sigmas[num_steps - 1] = sigma_min;
    }
    sigmas.push(0.0);
    if sigmas.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Config("noise levels are not strictly decreasing".into()));
    }
    Ok(NoiseSchedule { kind, sigmas })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub num_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Adds the `sqrt(σΔt)·ε` term; off gives a deterministic trajectory
    /// after the initial draw.
    pub stochastic: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::KarrasLike,
            num_steps: DEFAULT_NUM_STEPS,
            sigma_min: 0.002,
            sigma_max: 1.0,
            stochastic: true,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.num_steps, self.sigma_min, self.sigma_max)
    }
}

/// Arguments of one prior evaluation.
pub struct PriorInput<'a> {
    pub x: &'a Image,
    pub sigma: f64,
    pub step: usize,
    /// Upsampled coarse estimate (Stage II only).
    pub condition: Option<&'a Image>,
    pub metadata: &'a TokenMatrix,
}

/// Velocity and score estimates, both image-shaped.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorOutput {
    pub velocity: Image,
    pub score: Image,
}

impl PriorOutput {
    /// From a denoised estimate `D`: `v = (D − x)/σ`, `s = (D − x)/σ²`.
    pub fn from_denoised(x: &Image, denoised: &Image, sigma: f64) -> Self {
        let residual: Vec<f64> = denoised.as_slice().iter().zip(x.as_slice()).map(|(d, x)| d - x).collect();
        let (h, w) = x.shape();
        PriorOutput {
            velocity: Image::from_fn(h, w, |r, c| residual[r * w + c] / sigma),
            score: Image::from_fn(h, w, |r, c| residual[r * w + c] / (sigma * sigma)),
        }
    }
}

pub trait PriorModel: Sync {
    fn evaluate(&self, input: &PriorInput) -> Result<PriorOutput>;
}

impl<P: PriorModel + ?Sized> PriorModel for Box<P> {
    fn evaluate(&self, input: &PriorInput) -> Result<PriorOutput> {
        (**self).evaluate(input)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub sigma: f64,
    /// `‖x‖` after the prior update, before consistency.
    pub pre_norm: f64,
    pub objective_before: f64,
    pub objective_after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub image: Image,
    pub per_step_trace: Vec<TraceRow>,
    /// Iterate after each step's consistency call, when requested.
    pub snapshots: Vec<Image>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerOptions {
    /// Carry the ADMM split and dual variables between steps.
    pub warm_start: bool,
    pub keep_snapshots: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            warm_start: true,
            keep_snapshots: false,
        }
    }
}

/// Measured data for one stage, on that stage's grid.
#[derive(Clone, Copy)]
pub struct StageData<'a> {
    pub measured: &'a Sinogram,
    pub y_aux: Option<&'a Sinogram>,
    pub mask: &'a AngularMask,
    pub geometry: &'a ScanGeometry,
}

/// Delimited table `step,sigma,pre_norm,objective_before,objective_after`.
pub fn trace_table(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,sigma,pre_norm,objective_before,objective_after\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            r.step, r.sigma, r.pre_norm, r.objective_before, r.objective_after
        ));
    }
    out
}

fn normal_image(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: f64) -> Image {
    Image::from_fn(h, w, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    prior: &dyn PriorModel,
    condition: Option<&Image>,
    metadata: &TokenMatrix,
    data: &StageData,
    schedule: &NoiseSchedule,
    stochastic: bool,
    cfg: &ConsistencyConfig,
    seed: u64,
    options: &SamplerOptions,
) -> Result<StageOutput> {
    cfg.validate()?;
    let operator = Projector::new(data.geometry)?;
    let problem = ConsistencyProblem {
        operator: &operator,
        measured: data.measured,
        y_aux: data.y_aux,
        mask: data.mask,
    };
    let (h, w) = data.geometry.image_size;
    if let Some(c) = condition {
        if c.shape() != (h, w) {
            return Err(Error::Shape(format!(
                "conditioning image {:?} does not match the {h}x{w} grid",
                c.shape()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut x = normal_image(&mut rng, h, w, schedule.sigma_max());
    let mut state: Option<AdmmState> = None;
    let mut trace = Vec::with_capacity(schedule.num_steps());
    let mut snapshots = Vec::new();
    for i in 0..schedule.num_steps() {
        let sigma = schedule.sigmas[i];
        let dt = schedule.step_size(i);
        let out = prior.evaluate(&PriorInput {
            x: &x,
            sigma,
            step: i,
            condition,
            metadata,
        })?;
        if out.velocity.shape() != (h, w) || out.score.shape() != (h, w) {
            return Err(Error::Shape(format!("prior output shape mismatch at step {i}")));
        }
        if !out.velocity.all_finite() || !out.score.all_finite() {
            return Err(Error::Numeric(format!("prior produced non-finite values at step {i}")));
        }
        let v = out.velocity.as_slice();
        let s = out.score.as_slice();
        for (k, xv) in x.as_mut_slice().iter_mut().enumerate() {
            let d = v[k] + 0.5 * sigma * s[k];
            *xv += dt * d;
        }
        if stochastic {
            rng.set_stream(i as u64 + 1);
            rng.set_word_pos(0);
            let amp = (sigma * dt).sqrt();
            for xv in x.as_mut_slice() {
                *xv += amp * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if !x.all_finite() {
            return Err(Error::Numeric(format!("iterate became non-finite at step {i}")));
        }
        let pre_norm = x.norm();
        let carried = if options.warm_start { state.take() } else { None };
        let corrected = consistency_step(&x, &problem, cfg, i, carried)?;
        trace.push(TraceRow {
            step: i,
            sigma,
            pre_norm,
            objective_before: corrected.objective_before,
            objective_after: corrected.objective_after,
        });
        x = corrected.image;
        state = Some(corrected.state);
        if options.keep_snapshots {
            snapshots.push(x.clone());
        }
    }
    Ok(StageOutput {
        image: x,
        per_step_trace: trace,
        snapshots,
    })
}

/// Stage I: unconditional (image-wise) sampling on the quarter-resolution
/// grid described by `data.geometry`, with the auxiliary sinogram active.
pub fn sample_stage1(
    prior: &dyn PriorModel,
    metadata: &TokenMatrix,
    data: &StageData,
    schedule: &ScheduleConfig,
    cfg: &ConsistencyConfig,
    seed: u64,
    options: &SamplerOptions,
) -> Result<StageOutput> {
    let sched = schedule.build()?;
    run_stage(prior, None, metadata, data, &sched, schedule.stochastic, cfg, seed, options)
}

/// Stage II: full-resolution sampling conditioned on the bilinear 4×
/// upsampling of `coarse`.
#[allow(clippy::too_many_arguments)]
pub fn sample_stage2(
    prior: &dyn PriorModel,
    coarse: &Image,
    metadata: &TokenMatrix,
    data: &StageData,
    schedule: &ScheduleConfig,
    cfg: &ConsistencyConfig,
    seed: u64,
    options: &SamplerOptions,
) -> Result<StageOutput> {
    let (h, w) = data.geometry.image_size;
    let (ch, cw) = coarse.shape();
    if (ch * STAGE_SCALE, cw * STAGE_SCALE) != (h, w) {
        return Err(Error::Shape(format!(
            "coarse image {ch}x{cw} upsampled {STAGE_SCALE}x does not match the {h}x{w} grid"
        )));
    }
    let condition = coarse.upsample_bilinear(STAGE_SCALE);
    let sched = schedule.build()?;
    run_stage(prior, Some(&condition), metadata, data, &sched, schedule.stochastic, cfg, seed, options)
}
