//! ADMM data-consistency solver and the ADMM-TV reconstructor.
//!
//! The consistency problem for a prior estimate `x̂` is
//!
//! ```text
//! min_x ½‖x − x̂‖² + λ₁/2 ‖M⊙(Ax − y)‖² + λ₂/2 ‖(J−M)⊙(Ax − y_aux)‖² + μ TV(x)
//! ```
//!
//! split with `q = Dx`: the x-update is a CG solve of the normal equations,
//! the q-update is isotropic soft-thresholding and the scaled dual is
//! updated in closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AngularMask;
use crate::grid::{Image, Sinogram};
use crate::projector::SystemOperator;

/// Two-channel field on an image grid: forward differences along columns
/// (`gx`) and rows (`gy`).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub height: usize,
    pub width: usize,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
}

impl GradientField {
    pub fn zeros(height: usize, width: usize) -> Self {
        GradientField {
            height,
            width,
            gx: vec![0.0; height * width],
            gy: vec![0.0; height * width],
        }
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        let a: f64 = self.gx.iter().zip(&other.gx).map(|(a, b)| a * b).sum();
        let b: f64 = self.gy.iter().zip(&other.gy).map(|(a, b)| a * b).sum();
        a + b
    }

    /// Per-pixel Euclidean magnitude.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.gx.iter().zip(&self.gy).map(|(x, y)| x.hypot(*y)).collect()
    }

    fn all_finite(&self) -> bool {
        self.gx.iter().chain(&self.gy).all(|v| v.is_finite())
    }
}

fn grad_into(x: &[f64], h: usize, w: usize, gx: &mut [f64], gy: &mut [f64]) {
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            gx[i] = if c + 1 < w { x[i + 1] - x[i] } else { 0.0 };
            gy[i] = if r + 1 < h { x[i + w] - x[i] } else { 0.0 };
        }
    }
}

fn grad_adjoint_into(gx: &[f64], gy: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mut v = 0.0;
            if c + 1 < w {
                v -= gx[i];
            }
            if c > 0 {
                v += gx[i - 1];
            }
            if r + 1 < h {
                v -= gy[i];
            }
            if r > 0 {
                v += gy[i - w];
            }
            out[i] = v;
        }
    }
}

/// Forward differences with a replicate boundary: the last column's x-gradient
/// and the last row's y-gradient are zero.
pub fn grad_operator(image: &Image) -> GradientField {
    let (h, w) = image.shape();
    let mut field = GradientField::zeros(h, w);
    grad_into(image.as_slice(), h, w, &mut field.gx, &mut field.gy);
    field
}

/// `Dᵀ p`, the negative discrete divergence.
pub fn grad_adjoint(field: &GradientField) -> Image {
    let (h, w) = (field.height, field.width);
    let mut out = vec![0.0; h * w];
    grad_adjoint_into(&field.gx, &field.gy, h, w, &mut out);
    Image::from_vec(h, w, out).expect("field shape")
}

/// Isotropic TV: sum of per-pixel gradient magnitudes.
pub fn total_variation(image: &Image) -> f64 {
    grad_operator(image).magnitudes().iter().sum()
}

/// Proximal operator of `tau * Σ‖·‖₂` applied pixelwise to a two-channel field.
pub fn soft_threshold_isotropic(field: &GradientField, tau: f64) -> Result<GradientField> {
    if !(tau >= 0.0) {
        return Err(Error::Config(format!("threshold must be >= 0, got {tau}")));
    }
    let mut out = field.clone();
    if tau == 0.0 {
        return Ok(out);
    }
    for (x, y) in out.gx.iter_mut().zip(out.gy.iter_mut()) {
        let m = x.hypot(*y);
        let scale = if m > tau { (m - tau) / m } else { 0.0 };
        *x *= scale;
        *y *= scale;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `‖rhs − A x‖ / ‖rhs‖` (absolute when `rhs = 0`), from the CG recursion.
    pub relative_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients for a symmetric positive (semi-)definite operator.
pub fn cg_solve(
    apply: impl Fn(&[f64], &mut [f64]),
    rhs: &[f64],
    x0: Option<&[f64]>,
    iters: usize,
    tol: f64,
) -> Result<CgOutcome> {
    let n = rhs.len();
    let mut x = match x0 {
        Some(x0) if x0.len() == n => x0.to_vec(),
        Some(x0) => {
            return Err(Error::Shape(format!("initial guess length {} != {n}", x0.len())));
        }
        None => vec![0.0; n],
    };
    let b_norm = dot(rhs, rhs).sqrt();
    if !b_norm.is_finite() {
        return Err(Error::Numeric("CG right-hand side is not finite (iteration 0)".into()));
    }
    let scale = if b_norm > 0.0 { b_norm } else { 1.0 };
    let mut ap = vec![0.0; n];
    let mut r = rhs.to_vec();
    if x.iter().any(|&v| v != 0.0) {
        apply(&x, &mut ap);
        for (ri, ai) in r.iter_mut().zip(&ap) {
            *ri -= ai;
        }
    }
    let mut rs = dot(&r, &r);
    let mut residual = rs.sqrt() / scale;
    if !residual.is_finite() {
        return Err(Error::Numeric("CG residual is not finite (iteration 0)".into()));
    }
    if residual <= tol {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            relative_residual: residual,
            converged: true,
        });
    }
    let mut p = r.clone();
    for it in 1..=iters {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !pap.is_finite() {
            return Err(Error::Numeric(format!("CG curvature is not finite at iteration {it}")));
        }
        if pap <= 0.0 {
            // Direction in the null space of a semidefinite operator.
            return Ok(CgOutcome {
                x,
                iterations: it - 1,
                relative_residual: residual,
                converged: false,
            });
        }
        let alpha = rs / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        residual = rs_new.sqrt() / scale;
        if !residual.is_finite() {
            return Err(Error::Numeric(format!("CG residual is not finite at iteration {it}")));
        }
        if residual <= tol {
            return Ok(CgOutcome {
                x,
                iterations: it,
                relative_residual: residual,
                converged: true,
            });
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Ok(CgOutcome {
        x,
        iterations: iters,
        relative_residual: residual,
        converged: false,
    })
}

/// Weights and iteration budget of the consistency solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyConfig {
    /// Weight of the measured-arc fidelity term.
    pub lambda1: f64,
    /// Initial weight of the auxiliary-sinogram term on the missing arc.
    pub lambda2_0: f64,
    /// Per-step decay factor of the auxiliary weight.
    pub lambda2_decay_gamma: f64,
    /// TV weight.
    pub mu: f64,
    /// ADMM penalty.
    pub rho: f64,
    /// ADMM outer iterations per call.
    #[serde(rename = "K")]
    pub k: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
}

impl ConsistencyConfig {
    /// Low-resolution stage: K = 2, λ₁ = 4, λ₂ = 20, ρ = 1.
    pub fn stage1() -> Self {
        ConsistencyConfig {
            lambda1: 4.0,
            lambda2_0: 20.0,
            lambda2_decay_gamma: 0.9,
            mu: 0.05,
            rho: 1.0,
            k: 2,
            cg_iters: 30,
            cg_tol: 1e-6,
        }
    }

    /// Full-resolution stage: K = 6, λ₁ = 2, λ₂ = 0, ρ = 0.2.
    pub fn stage2() -> Self {
        ConsistencyConfig {
            lambda1: 2.0,
            lambda2_0: 0.0,
            lambda2_decay_gamma: 0.9,
            mu: 0.05,
            rho: 0.2,
            k: 6,
            cg_iters: 30,
            cg_tol: 1e-6,
        }
    }

    /// All data and regularisation weights zero.
    pub fn disabled() -> Self {
        ConsistencyConfig {
            lambda1: 0.0,
            lambda2_0: 0.0,
            mu: 0.0,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda1, self.lambda2_0, self.mu];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("lambda1, lambda2_0 and mu must be finite and >= 0".into()));
        }
        if !(self.lambda2_decay_gamma > 0.0 && self.lambda2_decay_gamma <= 1.0) {
            return Err(Error::Config(format!(
                "lambda2_decay_gamma {} outside (0, 1]",
                self.lambda2_decay_gamma
            )));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if self.k == 0 || self.cg_iters == 0 {
            return Err(Error::Config("K and cg_iters must be at least 1".into()));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::Config("cg_tol must be positive".into()));
        }
        Ok(())
    }

    /// Auxiliary weight after `step` completed sampler steps.
    pub fn lambda2_at(&self, step: usize) -> f64 {
        if self.lambda2_0 == 0.0 {
            return 0.0;
        }
        self.lambda2_0 * self.lambda2_decay_gamma.powi(step as i32)
    }
}

/// ADMM iterate carried between consistency calls.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmmState {
    pub x: Image,
    /// Split variable `q ≈ Dx`.
    pub q: GradientField,
    /// Scaled dual variable.
    pub omega_dual: GradientField,
}

impl AdmmState {
    /// `q = Dx`, zero dual.
    pub fn cold(x: &Image) -> Self {
        let (h, w) = x.shape();
        AdmmState {
            x: x.clone(),
            q: grad_operator(x),
            omega_dual: GradientField::zeros(h, w),
        }
    }

    fn check(&self, shape: (usize, usize)) -> Result<()> {
        let ok = self.x.shape() == shape
            && (self.q.height, self.q.width) == shape
            && (self.omega_dual.height, self.omega_dual.width) == shape;
        if !ok {
            return Err(Error::Shape("ADMM state does not match the image grid".into()));
        }
        Ok(())
    }
}

/// Measurements and operator shared by every consistency call.
#[derive(Clone, Copy)]
pub struct ConsistencyProblem<'a> {
    pub operator: &'a dyn SystemOperator,
    pub measured: &'a Sinogram,
    /// Auxiliary sinogram for the missing arc; `None` disables that term.
    pub y_aux: Option<&'a Sinogram>,
    pub mask: &'a AngularMask,
}

impl ConsistencyProblem<'_> {
    fn check(&self) -> Result<()> {
        let shape = self.operator.sinogram_shape();
        if self.measured.shape() != shape {
            return Err(Error::Shape(format!(
                "measured sinogram {:?} does not match operator {shape:?}",
                self.measured.shape()
            )));
        }
        if let Some(aux) = self.y_aux {
            if aux.shape() != shape {
                return Err(Error::Shape(format!(
                    "auxiliary sinogram {:?} does not match operator {shape:?}",
                    aux.shape()
                )));
            }
        }
        if self.mask.num_views() != shape.0 {
            return Err(Error::Shape(format!(
                "mask has {} views, operator has {}",
                self.mask.num_views(),
                shape.0
            )));
        }
        Ok(())
    }
}

/// Term weights of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveWeights {
    /// Weight of `½‖x − x̂‖²`; 1 inside the sampler, 0 for plain ADMM-TV.
    pub proximity: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu: f64,
}

/// Value of the consistency objective at `x`.
pub fn consistency_objective(
    x: &Image,
    x_hat: &Image,
    problem: &ConsistencyProblem,
    weights: &ObjectiveWeights,
) -> Result<f64> {
    problem.check()?;
    let ax = problem.operator.forward(x)?;
    Ok(objective_from_projection(x, &ax, x_hat, problem, weights))
}

fn objective_from_projection(
    x: &Image,
    ax: &Sinogram,
    x_hat: &Image,
    problem: &ConsistencyProblem,
    w: &ObjectiveWeights,
) -> f64 {
    let mut value = 0.0;
    if w.proximity != 0.0 {
        let d: f64 = x.as_slice().iter().zip(x_hat.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
        value += 0.5 * w.proximity * d;
    }
    let nb = ax.num_bins();
    let mut measured_term = 0.0;
    let mut aux_term = 0.0;
    for (v, &keep) in problem.mask.keep.iter().enumerate() {
        let row = &ax.as_slice()[v * nb..(v + 1) * nb];
        if keep {
            let y = problem.measured.row(v);
            measured_term += row.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        } else if let Some(aux) = problem.y_aux {
            let y = aux.row(v);
            aux_term += row.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
    }
    value += 0.5 * w.lambda1 * measured_term;
    if w.lambda2 != 0.0 {
        value += 0.5 * w.lambda2 * aux_term;
    }
    if w.mu != 0.0 {
        value += w.mu * total_variation(x);
    }
    value
}

/// Result of one consistency call.
#[derive(Clone, Debug)]
pub struct ConsistencyOutput {
    pub image: Image,
    pub state: AdmmState,
    pub objective_before: f64,
    pub objective_after: f64,
    /// `‖Dx − q‖` after each ADMM iteration (empty when TV is off).
    pub primal_residuals: Vec<f64>,
    /// Objective of each raw ADMM iterate.
    pub iterate_objectives: Vec<f64>,
    pub lambda2: f64,
}

struct AdmmRun<'a> {
    problem: ConsistencyProblem<'a>,
    weights: ObjectiveWeights,
    rho: f64,
    k: usize,
    cg_iters: usize,
    cg_tol: f64,
}

impl AdmmRun<'_> {
    fn per_view_weights(&self) -> Vec<f64> {
        self.problem
            .mask
            .keep
            .iter()
            .map(|&k| if k { self.weights.lambda1 } else { self.weights.lambda2 })
            .collect()
    }

    /// `Aᵀ(W ⊙ data)` where data is `y` on kept views and `y_aux` elsewhere.
    fn data_rhs(&self, view_weights: &[f64]) -> Vec<f64> {
        let (nv, nb) = self.problem.operator.sinogram_shape();
        let mut weighted = vec![0.0; nv * nb];
        for v in 0..nv {
            let wv = view_weights[v];
            if wv == 0.0 {
                continue;
            }
            let src = if self.problem.mask.keep[v] {
                Some(self.problem.measured.row(v))
            } else {
                self.problem.y_aux.map(|a| a.row(v))
            };
            if let Some(src) = src {
                for (o, s) in weighted[v * nb..(v + 1) * nb].iter_mut().zip(src) {
                    *o = wv * s;
                }
            }
        }
        let (h, w) = self.problem.operator.image_shape();
        let mut out = vec![0.0; h * w];
        if view_weights.iter().any(|&w| w != 0.0) {
            self.problem.operator.adjoint_into(&weighted, &mut out);
        }
        out
    }

    fn run(&self, anchor: &Image, mut state: AdmmState) -> Result<ConsistencyOutput> {
        let op = self.problem.operator;
        let (h, w) = op.image_shape();
        let (nv, nb) = op.sinogram_shape();
        let view_weights = self.per_view_weights();
        let active: Vec<bool> = view_weights.iter().map(|&w| w != 0.0).collect();
        let data_active = active.iter().any(|&a| a);
        let tv_active = self.weights.mu > 0.0;
        let rho = if tv_active { self.rho } else { 0.0 };
        let wp = self.weights.proximity;

        // Views with zero weight never enter the objective; skip projecting them.
        let objective = |x: &Image| -> Result<f64> {
            let mut ax = vec![0.0; nv * nb];
            op.forward_views_into(x.as_slice(), &mut ax, &active);
            let ax = Sinogram::from_vec(nv, nb, ax)?;
            Ok(objective_from_projection(x, &ax, anchor, &self.problem, &self.weights))
        };
        let objective_before = objective(&state.x)?;

        let apply = |x: &[f64], out: &mut [f64]| {
            let mut sino = vec![0.0; nv * nb];
            let mut back = vec![0.0; h * w];
            for (o, xi) in out.iter_mut().zip(x) {
                *o = wp * xi;
            }
            if data_active {
                op.forward_views_into(x, &mut sino, &active);
                for v in 0..nv {
                    let wv = view_weights[v];
                    sino[v * nb..(v + 1) * nb].iter_mut().for_each(|s| *s *= wv);
                }
                op.adjoint_into(&sino, &mut back);
                for (o, b) in out.iter_mut().zip(&back) {
                    *o += b;
                }
            }
            if rho > 0.0 {
                let mut gx = vec![0.0; h * w];
                let mut gy = vec![0.0; h * w];
                grad_into(x, h, w, &mut gx, &mut gy);
                grad_adjoint_into(&gx, &gy, h, w, &mut back);
                for (o, b) in out.iter_mut().zip(&back) {
                    *o += rho * b;
                }
            }
        };
        let base_rhs: Vec<f64> = {
            let data = self.data_rhs(&view_weights);
            anchor.as_slice().iter().zip(&data).map(|(a, d)| wp * a + d).collect()
        };

        let mut best = (objective_before, state.x.clone());
        let mut primal_residuals = Vec::new();
        let mut iterate_objectives = Vec::new();
        for _ in 0..self.k {
            let mut rhs = base_rhs.clone();
            if rho > 0.0 {
                let diff = GradientField {
                    height: h,
                    width: w,
                    gx: state.q.gx.iter().zip(&state.omega_dual.gx).map(|(q, o)| q - o).collect(),
                    gy: state.q.gy.iter().zip(&state.omega_dual.gy).map(|(q, o)| q - o).collect(),
                };
                let dt = grad_adjoint(&diff);
                for (r, d) in rhs.iter_mut().zip(dt.as_slice()) {
                    *r += rho * d;
                }
            }
            let cg = cg_solve(&apply, &rhs, Some(state.x.as_slice()), self.cg_iters, self.cg_tol)?;
            state.x = Image::from_vec(h, w, cg.x)?;
            if tv_active {
                let dx = grad_operator(&state.x);
                let mut v = dx.clone();
                for (a, b) in v.gx.iter_mut().zip(&state.omega_dual.gx) {
                    *a += b;
                }
                for (a, b) in v.gy.iter_mut().zip(&state.omega_dual.gy) {
                    *a += b;
                }
                state.q = soft_threshold_isotropic(&v, self.weights.mu / rho)?;
                for i in 0..h * w {
                    state.omega_dual.gx[i] += dx.gx[i] - state.q.gx[i];
                    state.omega_dual.gy[i] += dx.gy[i] - state.q.gy[i];
                }
                let mut r2 = 0.0;
                for i in 0..h * w {
                    r2 += (dx.gx[i] - state.q.gx[i]).powi(2) + (dx.gy[i] - state.q.gy[i]).powi(2);
                }
                primal_residuals.push(r2.sqrt());
                if !state.q.all_finite() || !state.omega_dual.all_finite() {
                    return Err(Error::Numeric("ADMM split variables became non-finite".into()));
                }
            }
            if !state.x.all_finite() {
                return Err(Error::Numeric("ADMM image iterate became non-finite".into()));
            }
            let f = objective(&state.x)?;
            iterate_objectives.push(f);
            if f < best.0 {
                best = (f, state.x.clone());
            }
        }
        // The splitting is not monotone in the objective over a short
        // iteration budget; return the lowest-objective iterate.
        let (objective_after, image) = best;
        Ok(ConsistencyOutput {
            image,
            state,
            objective_before,
            objective_after,
            primal_residuals,
            iterate_objectives,
            lambda2: self.weights.lambda2,
        })
    }
}

/// One data-consistency correction of the prior estimate `x_hat`.
///
/// Runs `cfg.k` ADMM iterations warm-started from `state` (or from `x_hat`
/// with `q = D x_hat` and a zero dual when `state` is `None`). The auxiliary
/// weight is `lambda2_0 * gamma^step_index`.
pub fn consistency_step(
    x_hat: &Image,
    problem: &ConsistencyProblem,
    cfg: &ConsistencyConfig,
    step_index: usize,
    state: Option<AdmmState>,
) -> Result<ConsistencyOutput> {
    cfg.validate()?;
    problem.check()?;
    let shape = problem.operator.image_shape();
    if x_hat.shape() != shape {
        return Err(Error::Shape(format!(
            "estimate {:?} does not match operator image size {shape:?}",
            x_hat.shape()
        )));
    }
    let lambda2 = if problem.y_aux.is_some() { cfg.lambda2_at(step_index) } else { 0.0 };
    let weights = ObjectiveWeights {
        proximity: 1.0,
        lambda1: cfg.lambda1,
        lambda2,
        mu: cfg.mu,
    };
    if cfg.lambda1 == 0.0 && lambda2 == 0.0 && cfg.mu == 0.0 {
        let state = AdmmState::cold(x_hat);
        return Ok(ConsistencyOutput {
            image: x_hat.clone(),
            state,
            objective_before: 0.0,
            objective_after: 0.0,
            primal_residuals: Vec::new(),
            iterate_objectives: vec![0.0; cfg.k],
            lambda2,
        });
    }
    // Start the image iterate at x̂ so the returned estimate never does worse
    // than the prior; carry the split variables across calls.
    let mut state = match state {
        Some(s) => {
            s.check(shape)?;
            s
        }
        None => AdmmState::cold(x_hat),
    };
    state.x = x_hat.clone();
    AdmmRun {
        problem: *problem,
        weights,
        rho: cfg.rho,
        k: cfg.k,
        cg_iters: cfg.cg_iters,
        cg_tol: cfg.cg_tol,
    }
    .run(x_hat, state)
}

/// Outcome of the ADMM-TV baseline.
#[derive(Clone, Debug)]
pub struct AdmmTvResult {
    pub image: Image,
    /// Objective `λ₁/2‖M⊙(Ax−y)‖² + μ TV(x)` of the returned estimate after
    /// each outer iteration.
    pub objective_history: Vec<f64>,
    /// Objective of the raw ADMM iterate after each outer iteration.
    pub iterate_objectives: Vec<f64>,
}

/// ADMM-TV reconstruction: `min_x λ₁/2‖M⊙(Ax − y)‖² + μ TV(x)`, started from
/// `init` (typically FBP).
pub fn admm_tv_reconstruct(
    problem: &ConsistencyProblem,
    cfg: &ConsistencyConfig,
    outer_iters: usize,
    init: &Image,
) -> Result<AdmmTvResult> {
    cfg.validate()?;
    problem.check()?;
    if problem.mask.kept_count() == 0 {
        return Err(Error::Config("ADMM-TV needs at least one kept view".into()));
    }
    if outer_iters == 0 {
        return Err(Error::Config("outer_iters must be at least 1".into()));
    }
    let shape = problem.operator.image_shape();
    if init.shape() != shape {
        return Err(Error::Shape("initial image does not match the operator".into()));
    }
    let no_aux = ConsistencyProblem {
        y_aux: None,
        ..*problem
    };
    let run = AdmmRun {
        problem: no_aux,
        weights: ObjectiveWeights {
            proximity: 0.0,
            lambda1: cfg.lambda1,
            lambda2: 0.0,
            mu: cfg.mu,
        },
        rho: cfg.rho,
        k: outer_iters,
        cg_iters: cfg.cg_iters,
        cg_tol: cfg.cg_tol,
    };
    let out = run.run(init, AdmmState::cold(init))?;
    let mut running = out.objective_before;
    let history = out
        .iterate_objectives
        .iter()
        .map(|&f| {
            running = running.min(f);
            running
        })
        .collect();
    Ok(AdmmTvResult {
        image: out.image,
        objective_history: history,
        iterate_objectives: out.iterate_objectives,
    })
}
