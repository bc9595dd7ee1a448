//! Ray-driven forward projection with its matched adjoint, masked
//! projection, and Gaussian measurement noise.
//!
//! Each ray is sampled every half pixel; the image is treated as the bilinear
//! interpolant of its pixel values. Forward and adjoint walk exactly the same
//! samples with the same weights, so the adjoint is exact up to rounding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AngularMask, BeamType, ScanGeometry};
use crate::grid::{Image, Sinogram};

/// Adjoint accumulation is split into this many fixed view groups whose
/// partial images are summed in order, independent of the thread count.
const ADJOINT_GROUPS: usize = 16;

/// A linear map from images to sinograms with a matched adjoint.
pub trait SystemOperator: Sync {
    /// (height, width)
    fn image_shape(&self) -> (usize, usize);
    /// (views, bins)
    fn sinogram_shape(&self) -> (usize, usize);
    fn forward_into(&self, image: &[f64], out: &mut [f64]);
    fn adjoint_into(&self, sinogram: &[f64], out: &mut [f64]);

    /// Forward projection of the views with `active[v] == true` only; other
    /// rows of `out` are set to zero.
    fn forward_views_into(&self, image: &[f64], out: &mut [f64], active: &[bool]) {
        self.forward_into(image, out);
        let nb = self.sinogram_shape().1;
        for (row, _) in out.chunks_mut(nb).zip(active).filter(|(_, &a)| !a) {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn forward(&self, image: &Image) -> Result<Sinogram> {
        let shape = self.image_shape();
        if image.shape() != shape {
            return Err(Error::Shape(format!(
                "image {:?} does not match operator image size {shape:?}",
                image.shape()
            )));
        }
        let (v, b) = self.sinogram_shape();
        let mut out = vec![0.0; v * b];
        self.forward_into(image.as_slice(), &mut out);
        Sinogram::from_vec(v, b, out)
    }

    fn adjoint(&self, sinogram: &Sinogram) -> Result<Image> {
        let shape = self.sinogram_shape();
        if sinogram.shape() != shape {
            return Err(Error::Shape(format!(
                "sinogram {:?} does not match operator sinogram size {shape:?}",
                sinogram.shape()
            )));
        }
        let (h, w) = self.image_shape();
        let mut out = vec![0.0; h * w];
        self.adjoint_into(sinogram.as_slice(), &mut out);
        Image::from_vec(h, w, out)
    }
}

#[derive(Clone, Copy, Debug)]
struct Ray {
    /// Point of the ray closest to the rotation centre.
    foot: [f64; 2],
    dir: [f64; 2],
}

/// Matrix-free projector for one geometry.
#[derive(Clone, Debug)]
pub struct Projector {
    geometry: ScanGeometry,
    step: f64,
    /// Half-extent of the bilinear support box, x and y.
    half_extent: [f64; 2],
}

impl Projector {
    pub fn new(geometry: &ScanGeometry) -> Result<Self> {
        geometry.validate()?;
        let (h, w) = geometry.image_size;
        let ps = geometry.pixel_size;
        Ok(Projector {
            geometry: geometry.clone(),
            step: 0.5 * ps,
            half_extent: [0.5 * (w as f64 + 1.0) * ps, 0.5 * (h as f64 + 1.0) * ps],
        })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    fn ray(&self, view: usize, bin: usize) -> Ray {
        let g = &self.geometry;
        let theta = g.view_angles[view].to_radians();
        let (sin, cos) = theta.sin_cos();
        let e = [cos, sin];
        let u = [-sin, cos];
        let s = g.bin_offset(bin);
        match g.beam_type {
            BeamType::Parallel => Ray {
                foot: [s * u[0], s * u[1]],
                dir: [-e[0], -e[1]],
            },
            BeamType::Fan => {
                let (r, d) = g.fan_distances().expect("validated fan geometry");
                let src = [r * e[0], r * e[1]];
                let det = [-(d - r) * e[0] + s * u[0], -(d - r) * e[1] + s * u[1]];
                let (dx, dy) = (det[0] - src[0], det[1] - src[1]);
                let len = dx.hypot(dy);
                let dir = [dx / len, dy / len];
                let t0 = -(src[0] * dir[0] + src[1] * dir[1]);
                Ray {
                    foot: [src[0] + t0 * dir[0], src[1] + t0 * dir[1]],
                    dir,
                }
            }
        }
    }

    /// Calls `visit(pixel_index, weight)` for every bilinear contribution along
    /// one ray. The sum of `weight * image[pixel_index]` is the line integral.
    #[inline]
    fn walk_ray(&self, view: usize, bin: usize, mut visit: impl FnMut(usize, f64)) {
        let ray = self.ray(view, bin);
        // Clip the ray parameter to the support box.
        let mut t_lo = f64::NEG_INFINITY;
        let mut t_hi = f64::INFINITY;
        for axis in 0..2 {
            let (p, d, ext) = (ray.foot[axis], ray.dir[axis], self.half_extent[axis]);
            if d.abs() < 1e-15 {
                if p.abs() >= ext {
                    return;
                }
            } else {
                let a = (-ext - p) / d;
                let b = (ext - p) / d;
                t_lo = t_lo.max(a.min(b));
                t_hi = t_hi.min(a.max(b));
            }
        }
        if t_lo >= t_hi {
            return;
        }
        let g = &self.geometry;
        let (h, w) = g.image_size;
        let inv_ps = 1.0 / g.pixel_size;
        let col_center = 0.5 * (w as f64 - 1.0);
        let row_center = 0.5 * (h as f64 - 1.0);
        let k_lo = (t_lo / self.step).ceil() as i64;
        let k_hi = (t_hi / self.step).floor() as i64;
        for k in k_lo..=k_hi {
            let t = k as f64 * self.step;
            let x = ray.foot[0] + t * ray.dir[0];
            let y = ray.foot[1] + t * ray.dir[1];
            let cj = x * inv_ps + col_center;
            let ci = row_center - y * inv_ps;
            // Samples lie inside the support box, so cj, ci > -2 and the
            // shifted truncation equals floor (much cheaper than f64::floor
            // on baseline x86-64).
            let j0 = (cj + 2.0) as i64 - 2;
            let i0 = (ci + 2.0) as i64 - 2;
            let fj = cj - j0 as f64;
            let fi = ci - i0 as f64;
            if i0 >= 0 && j0 >= 0 && i0 + 1 < h as i64 && j0 + 1 < w as i64 {
                let base = i0 as usize * w + j0 as usize;
                let (a, b) = (self.step * (1.0 - fi), self.step * fi);
                visit(base, a * (1.0 - fj));
                visit(base + 1, a * fj);
                visit(base + w, b * (1.0 - fj));
                visit(base + w + 1, b * fj);
                continue;
            }
            for (di, wi) in [(0i64, 1.0 - fi), (1, fi)] {
                let i = i0 + di;
                if i < 0 || i >= h as i64 || wi == 0.0 {
                    continue;
                }
                for (dj, wj) in [(0i64, 1.0 - fj), (1, fj)] {
                    let j = j0 + dj;
                    if j < 0 || j >= w as i64 || wj == 0.0 {
                        continue;
                    }
                    visit(i as usize * w + j as usize, self.step * wi * wj);
                }
            }
        }
    }
}

impl SystemOperator for Projector {
    fn image_shape(&self) -> (usize, usize) {
        self.geometry.image_size
    }

    fn sinogram_shape(&self) -> (usize, usize) {
        (self.geometry.num_views, self.geometry.num_bins)
    }

    fn forward_into(&self, image: &[f64], out: &mut [f64]) {
        self.forward_views_into(image, out, &vec![true; self.geometry.num_views]);
    }

    fn forward_views_into(&self, image: &[f64], out: &mut [f64], active: &[bool]) {
        let nb = self.geometry.num_bins;
        out.par_chunks_mut(nb).enumerate().for_each(|(view, row)| {
            if !active[view] {
                row.iter_mut().for_each(|v| *v = 0.0);
                return;
            }
            for (bin, value) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                self.walk_ray(view, bin, |idx, wt| acc += wt * image[idx]);
                *value = acc;
            }
        });
    }

    fn adjoint_into(&self, sinogram: &[f64], out: &mut [f64]) {
        let nv = self.geometry.num_views;
        let nb = self.geometry.num_bins;
        let npix = out.len();
        let group = nv.div_ceil(ADJOINT_GROUPS).max(1);
        let partials: Vec<Vec<f64>> = (0..nv.div_ceil(group))
            .into_par_iter()
            .map(|g| {
                let mut acc = vec![0.0; npix];
                for view in g * group..((g + 1) * group).min(nv) {
                    for bin in 0..nb {
                        let y = sinogram[view * nb + bin];
                        if y == 0.0 {
                            continue;
                        }
                        self.walk_ray(view, bin, |idx, wt| acc[idx] += wt * y);
                    }
                }
                acc
            })
            .collect();
        out.iter_mut().for_each(|v| *v = 0.0);
        for p in &partials {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
    }
}

/// Identity "projector" treating an `h x w` image as an `h`-view, `w`-bin
/// sinogram. Used to exercise solvers with closed-form answers.
#[derive(Clone, Copy, Debug)]
pub struct IdentityOperator {
    pub height: usize,
    pub width: usize,
}

impl SystemOperator for IdentityOperator {
    fn image_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    fn sinogram_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    fn forward_into(&self, image: &[f64], out: &mut [f64]) {
        out.copy_from_slice(image);
    }
    fn adjoint_into(&self, sinogram: &[f64], out: &mut [f64]) {
        out.copy_from_slice(sinogram);
    }
}

/// Explicit dense system matrix, row-major `(views*bins) x (h*w)`.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    image_shape: (usize, usize),
    sinogram_shape: (usize, usize),
    matrix: Vec<f64>,
}

impl DenseOperator {
    /// Largest image (pixels) for which a dense matrix is materialised.
    pub const MAX_PIXELS: usize = 64 * 64;

    /// Materialises `op` column by column.
    pub fn from_operator(op: &dyn SystemOperator) -> Result<Self> {
        let (h, w) = op.image_shape();
        let (v, b) = op.sinogram_shape();
        let n = h * w;
        if n > Self::MAX_PIXELS {
            return Err(Error::Config(format!(
                "dense system matrix limited to {} pixels, got {n}",
                Self::MAX_PIXELS
            )));
        }
        let m = v * b;
        let mut matrix = vec![0.0; m * n];
        let mut unit = vec![0.0; n];
        let mut col = vec![0.0; m];
        for j in 0..n {
            unit[j] = 1.0;
            op.forward_into(&unit, &mut col);
            unit[j] = 0.0;
            for i in 0..m {
                matrix[i * n + j] = col[i];
            }
        }
        Ok(DenseOperator {
            image_shape: (h, w),
            sinogram_shape: (v, b),
            matrix,
        })
    }

    pub fn rows(&self) -> usize {
        self.sinogram_shape.0 * self.sinogram_shape.1
    }

    pub fn cols(&self) -> usize {
        self.image_shape.0 * self.image_shape.1
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.cols() + j]
    }
}

impl SystemOperator for DenseOperator {
    fn image_shape(&self) -> (usize, usize) {
        self.image_shape
    }
    fn sinogram_shape(&self) -> (usize, usize) {
        self.sinogram_shape
    }
    fn forward_into(&self, image: &[f64], out: &mut [f64]) {
        let n = self.cols();
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.matrix[i * n..(i + 1) * n].iter().zip(image).map(|(a, x)| a * x).sum();
        }
    }
    fn adjoint_into(&self, sinogram: &[f64], out: &mut [f64]) {
        let n = self.cols();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &y) in sinogram.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(&self.matrix[i * n..(i + 1) * n]) {
                *o += a * y;
            }
        }
    }
}

pub fn forward_project(image: &Image, geometry: &ScanGeometry) -> Result<Sinogram> {
    Projector::new(geometry)?.forward(image)
}

pub fn back_project(sinogram: &Sinogram, geometry: &ScanGeometry) -> Result<Image> {
    Projector::new(geometry)?.adjoint(sinogram)
}

/// Zeroes the rows of dropped views.
pub fn mask_sinogram(sinogram: &Sinogram, mask: &AngularMask) -> Result<Sinogram> {
    if mask.num_views() != sinogram.num_views() {
        return Err(Error::Shape(format!(
            "mask has {} views, sinogram has {}",
            mask.num_views(),
            sinogram.num_views()
        )));
    }
    let mut out = sinogram.clone();
    for (v, &keep) in mask.keep.iter().enumerate() {
        if !keep {
            out.row_mut(v).iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok(out)
}

/// `M ⊙ (A x)`.
pub fn apply_masked(image: &Image, geometry: &ScanGeometry, mask: &AngularMask) -> Result<Sinogram> {
    mask.check_geometry(geometry)?;
    mask_sinogram(&forward_project(image, geometry)?, mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

/// Adds i.i.d. zero-mean Gaussian noise of standard deviation `sigma`.
pub fn simulate_measurement(sinogram: &Sinogram, noise: &NoiseSpec) -> Result<Sinogram> {
    if !(noise.sigma >= 0.0) || !noise.sigma.is_finite() {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {}", noise.sigma)));
    }
    if noise.sigma == 0.0 {
        return Ok(sinogram.clone());
    }
    let normal = Normal::new(0.0, noise.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut out = sinogram.clone();
    for v in out.as_mut_slice() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}
