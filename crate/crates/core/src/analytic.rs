//! Filtered backprojection and synthesis of the auxiliary sinogram for the
//! unmeasured arc.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AngularMask, BeamType, ScanGeometry};
use crate::grid::{Image, Sinogram};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Ramp,
    RampHann,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Fraction of the Nyquist frequency above which the response is zero.
    pub cutoff_fraction: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            kind: FilterKind::RampHann,
            cutoff_fraction: 1.0,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_fraction > 0.0 && self.cutoff_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "filter cutoff fraction {} outside (0, 1]",
                self.cutoff_fraction
            )));
        }
        Ok(())
    }
}

/// Frequency response of the band-limited ramp (Ram-Lak) kernel sampled at
/// spacing `tau`, windowed by `spec`, for a transform of length `n`.
fn filter_response(n: usize, tau: f64, spec: &FilterSpec) -> Vec<Complex<f64>> {
    let mut kernel = vec![Complex::new(0.0, 0.0); n];
    kernel[0].re = 1.0 / (4.0 * tau * tau);
    for k in (1..n / 2).step_by(2) {
        let v = -1.0 / (PI * PI * (k * k) as f64 * tau * tau);
        kernel[k].re = v;
        kernel[n - k].re = v;
    }
    FftPlanner::new().plan_fft_forward(n).process(&mut kernel);
    for (k, h) in kernel.iter_mut().enumerate() {
        // Frequency in cycles per sample, in [0, 0.5].
        let f = k.min(n - k) as f64 / n as f64;
        let fc = 0.5 * spec.cutoff_fraction;
        let window = if f > fc {
            0.0
        } else {
            match spec.kind {
                FilterKind::Ramp => 1.0,
                FilterKind::RampHann => 0.5 * (1.0 + (PI * f / fc).cos()),
            }
        };
        // The kernel is real and even, so its transform is real.
        *h = Complex::new(h.re * window * tau, 0.0);
    }
    kernel
}

/// Filtered backprojection. Dropped views are skipped and the angular weight
/// is divided among kept views only.
pub fn fbp_reconstruct(
    sinogram: &Sinogram,
    geometry: &ScanGeometry,
    mask: Option<&AngularMask>,
    filter: &FilterSpec,
) -> Result<Image> {
    geometry.validate()?;
    filter.validate()?;
    let (nv, nb) = (geometry.num_views, geometry.num_bins);
    if sinogram.shape() != (nv, nb) {
        return Err(Error::Shape(format!(
            "sinogram {:?} does not match geometry ({nv}, {nb})",
            sinogram.shape()
        )));
    }
    if let Some(m) = mask {
        m.check_geometry(geometry)?;
    }
    let kept: Vec<usize> = (0..nv).filter(|&v| mask.is_none_or(|m| m.keep[v])).collect();
    let (h, w) = geometry.image_size;
    if kept.is_empty() {
        return Ok(Image::zeros(h, w));
    }

    // Detector sampling referred to the rotation centre.
    let (magnification, source_radius) = match geometry.beam_type {
        BeamType::Parallel => (1.0, None),
        BeamType::Fan => {
            let (r, d) = geometry.fan_distances().expect("validated");
            (r / d, Some(r))
        }
    };
    let tau = geometry.detector_pitch * magnification;
    let centre_bin = 0.5 * (nb as f64 - 1.0);

    let padded = (2 * nb).next_power_of_two();
    let response = filter_response(padded, tau, filter);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(padded);
    let inv = planner.plan_fft_inverse(padded);
    let filtered: Vec<Vec<f64>> = kept
        .iter()
        .map(|&v| {
            let mut buf = vec![Complex::new(0.0, 0.0); padded];
            for (b, c) in buf.iter_mut().take(nb).enumerate() {
                let mut p = sinogram.get(v, b);
                if let Some(r) = source_radius {
                    let s = (b as f64 - centre_bin) * tau;
                    p *= r / (r * r + s * s).sqrt();
                }
                c.re = p;
            }
            fwd.process(&mut buf);
            for (c, h) in buf.iter_mut().zip(&response) {
                *c *= h;
            }
            inv.process(&mut buf);
            buf.iter().take(nb).map(|c| c.re / padded as f64).collect()
        })
        .collect();

    let trig: Vec<(f64, f64)> = kept
        .iter()
        .map(|&v| geometry.view_angles[v].to_radians().sin_cos())
        .collect();
    let weight = PI / kept.len() as f64;
    let ps = geometry.pixel_size;
    let mut out = Image::zeros(h, w);
    out.as_mut_slice()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(row, values)| {
            let y = (0.5 * (h as f64 - 1.0) - row as f64) * ps;
            for (col, value) in values.iter_mut().enumerate() {
                let x = (col as f64 - 0.5 * (w as f64 - 1.0)) * ps;
                let mut acc = 0.0;
                for (q, &(sin, cos)) in filtered.iter().zip(&trig) {
                    let along_u = -sin * x + cos * y;
                    let (s, scale) = match source_radius {
                        None => (along_u, 1.0),
                        Some(r) => {
                            let dist = r - (cos * x + sin * y);
                            let u = dist / r;
                            (r * along_u / dist, 1.0 / (u * u))
                        }
                    };
                    let pos = s / tau + centre_bin;
                    if pos < 0.0 || pos > (nb - 1) as f64 {
                        continue;
                    }
                    let b0 = pos.floor() as usize;
                    let f = pos - b0 as f64;
                    let v0 = q[b0];
                    let v1 = if b0 + 1 < nb { q[b0 + 1] } else { 0.0 };
                    acc += scale * (v0 + f * (v1 - v0));
                }
                *value = acc * weight;
            }
        });
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxMethod {
    /// Parallel-beam conjugate rays, `y(θ + 180°, s) = y(θ, -s)`, falling back
    /// to interpolation where no conjugate view was measured.
    ConjugateSymmetry,
    /// Per-bin linear interpolation between the nearest kept views, cyclic
    /// over the rotation.
    AngularInterpolation,
}

impl AuxMethod {
    pub fn default_for(geometry: &ScanGeometry) -> Self {
        match geometry.beam_type {
            BeamType::Parallel => AuxMethod::ConjugateSymmetry,
            BeamType::Fan => AuxMethod::AngularInterpolation,
        }
    }
}

const ANGLE_TOL_DEG: f64 = 1e-6;

fn conjugate_view(geometry: &ScanGeometry, view: usize) -> Option<usize> {
    let span = geometry.angular_span_deg;
    let target = geometry.view_angles[view] + 180.0;
    geometry.view_angles.iter().position(|&a| {
        let d = (a - target).rem_euclid(span);
        d < ANGLE_TOL_DEG || span - d < ANGLE_TOL_DEG
    })
    .filter(|&c| c != view)
}

/// Fills the dropped views of `measured`. Kept rows are copied unchanged.
pub fn synthesize_aux_sinogram(
    measured: &Sinogram,
    mask: &AngularMask,
    geometry: &ScanGeometry,
    method: AuxMethod,
) -> Result<Sinogram> {
    mask.check_geometry(geometry)?;
    let (nv, nb) = (geometry.num_views, geometry.num_bins);
    if measured.shape() != (nv, nb) {
        return Err(Error::Shape(format!(
            "sinogram {:?} does not match geometry ({nv}, {nb})",
            measured.shape()
        )));
    }
    let kept: Vec<usize> = (0..nv).filter(|&v| mask.keep[v]).collect();
    if kept.is_empty() {
        return Err(Error::Config("auxiliary sinogram needs at least one kept view".into()));
    }
    let span = geometry.angular_span_deg;
    // Wrapping a parallel-beam rotation of 180 degrees lands on the conjugate
    // ray set, which is the mirrored detector.
    let wrap_flips = geometry.beam_type == BeamType::Parallel && (span - 180.0).abs() < ANGLE_TOL_DEG;
    let mut out = measured.clone();
    let read = |v: usize, flip: bool, b: usize| {
        if flip {
            measured.get(v, nb - 1 - b)
        } else {
            measured.get(v, b)
        }
    };
    for v in (0..nv).filter(|&v| !mask.keep[v]) {
        if method == AuxMethod::ConjugateSymmetry && geometry.beam_type == BeamType::Parallel {
            if let Some(c) = conjugate_view(geometry, v).filter(|&c| mask.keep[c]) {
                for b in 0..nb {
                    let value = measured.get(c, nb - 1 - b);
                    out.set(v, b, value);
                }
                continue;
            }
        }
        // Nearest kept views before and after `v`, cyclically.
        let next_pos = kept.partition_point(|&k| k < v);
        let (prev, prev_wrapped) = if next_pos == 0 {
            (kept[kept.len() - 1], true)
        } else {
            (kept[next_pos - 1], false)
        };
        let (next, next_wrapped) = if next_pos == kept.len() {
            (kept[0], true)
        } else {
            (kept[next_pos], false)
        };
        let angle = geometry.view_angles[v];
        let a_prev = geometry.view_angles[prev] - if prev_wrapped { span } else { 0.0 };
        let a_next = geometry.view_angles[next] + if next_wrapped { span } else { 0.0 };
        let t = if a_next > a_prev {
            (angle - a_prev) / (a_next - a_prev)
        } else {
            0.0
        };
        let flip_prev = prev_wrapped && wrap_flips;
        let flip_next = next_wrapped && wrap_flips;
        for b in 0..nb {
            let p = read(prev, flip_prev, b);
            let n = read(next, flip_next, b);
            out.set(v, b, p + t * (n - p));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_mask;
    use crate::projector::{forward_project, mask_sinogram};

    fn disk(n: usize, radius: f64) -> Image {
        let c = 0.5 * (n as f64 - 1.0);
        Image::from_fn(n, n, |r, col| {
            let (x, y) = (col as f64 - c, r as f64 - c);
            if x * x + y * y <= radius * radius { 1.0 } else { 0.0 }
        })
    }

    #[test]
    fn zero_sinogram_gives_zero_image() {
        let g = ScanGeometry::parallel(30, 180.0, (16, 16), 1.0).unwrap();
        let out = fbp_reconstruct(&Sinogram::zeros(30, g.num_bins), &g, None, &FilterSpec::default()).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_cutoff_rejected() {
        let g = ScanGeometry::parallel(30, 180.0, (16, 16), 1.0).unwrap();
        let f = FilterSpec {
            kind: FilterKind::Ramp,
            cutoff_fraction: 0.0,
        };
        assert!(fbp_reconstruct(&Sinogram::zeros(30, g.num_bins), &g, None, &f).is_err());
    }

    #[test]
    fn fbp_is_linear() {
        let g = ScanGeometry::parallel(24, 180.0, (16, 16), 1.0).unwrap();
        let a = Sinogram::from_fn(24, g.num_bins, |v, b| ((v * 7 + b * 3) % 11) as f64);
        let b = Sinogram::from_fn(24, g.num_bins, |v, b| ((v + b) % 5) as f64 - 2.0);
        let sum = Sinogram::from_fn(24, g.num_bins, |v, k| 2.0 * a.get(v, k) - b.get(v, k));
        let f = FilterSpec::default();
        let ra = fbp_reconstruct(&a, &g, None, &f).unwrap();
        let rb = fbp_reconstruct(&b, &g, None, &f).unwrap();
        let rs = fbp_reconstruct(&sum, &g, None, &f).unwrap();
        for i in 0..rs.len() {
            let expect = 2.0 * ra.as_slice()[i] - rb.as_slice()[i];
            assert!((rs.as_slice()[i] - expect).abs() < 1e-9 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn disk_recovered_parallel_and_fan() {
        let n = 64;
        let img = disk(n, 20.0);
        for g in [
            ScanGeometry::parallel(180, 180.0, (n, n), 1.0).unwrap(),
            ScanGeometry::fan(360, 160, (n, n), 1.0, 120.0, 240.0).unwrap(),
        ] {
            let s = forward_project(&img, &g).unwrap();
            let rec = fbp_reconstruct(&s, &g, None, &FilterSpec::default()).unwrap();
            // Interior of the disk away from the edge.
            let centre = rec.get(32, 32);
            assert!((centre - 1.0).abs() < 0.05, "{:?}: centre {centre}", g.beam_type);
            assert!(rec.get(2, 2).abs() < 0.05);
        }
    }

    #[test]
    fn limited_angle_is_worse() {
        let n = 64;
        let img = disk(n, 18.0);
        let g = ScanGeometry::parallel(180, 180.0, (n, n), 1.0).unwrap();
        let s = forward_project(&img, &g).unwrap();
        let m = make_mask(&g, 90.0, 0.0).unwrap();
        let f = FilterSpec::default();
        let full = fbp_reconstruct(&s, &g, None, &f).unwrap();
        let lim = fbp_reconstruct(&mask_sinogram(&s, &m).unwrap(), &g, Some(&m), &f).unwrap();
        let rmse = |a: &Image| {
            (a.as_slice().iter().zip(img.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
                / a.len() as f64)
                .sqrt()
        };
        assert!(rmse(&lim) > rmse(&full));
    }

    #[test]
    fn aux_full_mask_passthrough() {
        let g = ScanGeometry::parallel(20, 180.0, (8, 8), 1.0).unwrap();
        let s = Sinogram::from_fn(20, g.num_bins, |v, b| (v * b) as f64 + 0.25);
        let m = make_mask(&g, 180.0, 0.0).unwrap();
        for method in [AuxMethod::ConjugateSymmetry, AuxMethod::AngularInterpolation] {
            assert_eq!(synthesize_aux_sinogram(&s, &m, &g, method).unwrap(), s);
        }
    }

    #[test]
    fn aux_conjugate_symmetry_parallel_360() {
        let n = 16;
        let g = ScanGeometry::parallel(72, 360.0, (n, n), 1.0).unwrap();
        let img = Image::from_fn(n, n, |r, c| ((r * 3 + c * 5) % 7) as f64 / 7.0);
        let full = forward_project(&img, &g).unwrap();
        let m = make_mask(&g, 180.0, 0.0).unwrap();
        let measured = mask_sinogram(&full, &m).unwrap();
        let aux = synthesize_aux_sinogram(&measured, &m, &g, AuxMethod::ConjugateSymmetry).unwrap();
        let nb = g.num_bins;
        for v in 36..72 {
            for b in 0..nb {
                assert!((aux.get(v, b) - measured.get(v - 36, nb - 1 - b)).abs() < 1e-12);
            }
        }
        // The filled rows match the real projection of the conjugate rays.
        for v in 36..72 {
            for b in 0..nb {
                assert!((aux.get(v, b) - full.get(v, b)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn aux_interpolation_reproduces_linear_rows() {
        let g = ScanGeometry::fan(40, 12, (8, 8), 1.0, 30.0, 60.0).unwrap();
        // Kept arc wraps through 0 so every dropped view lies between kept ones.
        let m = make_mask(&g, 120.0, 300.0).unwrap();
        let lin = Sinogram::from_fn(40, 12, |v, b| 0.5 + 0.125 * v as f64 - 0.03 * (b as f64) * v as f64);
        let measured = mask_sinogram(&lin, &m).unwrap();
        let aux = synthesize_aux_sinogram(&measured, &m, &g, AuxMethod::AngularInterpolation).unwrap();
        for v in 0..40 {
            for b in 0..12 {
                assert!((aux.get(v, b) - lin.get(v, b)).abs() < 1e-12, "v={v} b={b}");
            }
        }
    }

    #[test]
    fn aux_conjugate_falls_back_on_fan() {
        let g = ScanGeometry::fan(40, 12, (8, 8), 1.0, 30.0, 60.0).unwrap();
        let m = make_mask(&g, 120.0, 300.0).unwrap();
        let lin = Sinogram::from_fn(40, 12, |v, b| v as f64 + b as f64);
        let measured = mask_sinogram(&lin, &m).unwrap();
        let a = synthesize_aux_sinogram(&measured, &m, &g, AuxMethod::ConjugateSymmetry).unwrap();
        let b = synthesize_aux_sinogram(&measured, &m, &g, AuxMethod::AngularInterpolation).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aux_conjugate_without_conjugates_interpolates() {
        // 180-degree parallel scan: no view has its conjugate in the set.
        let g = ScanGeometry::parallel(36, 180.0, (8, 8), 1.0).unwrap();
        let m = make_mask(&g, 90.0, 0.0).unwrap();
        let s = Sinogram::from_fn(36, g.num_bins, |v, b| (v + 2 * b) as f64);
        let measured = mask_sinogram(&s, &m).unwrap();
        let a = synthesize_aux_sinogram(&measured, &m, &g, AuxMethod::ConjugateSymmetry).unwrap();
        let b = synthesize_aux_sinogram(&measured, &m, &g, AuxMethod::AngularInterpolation).unwrap();
        assert_eq!(a, b);
        for v in 0..18 {
            assert_eq!(a.row(v), measured.row(v));
        }
    }

    #[test]
    fn aux_needs_kept_views() {
        let g = ScanGeometry::parallel(10, 180.0, (8, 8), 1.0).unwrap();
        let m = AngularMask {
            keep: vec![false; 10],
            angular_range_deg: 0.0,
            start_deg: 0.0,
        };
        let s = Sinogram::zeros(10, g.num_bins);
        assert!(matches!(
            synthesize_aux_sinogram(&s, &m, &g, AuxMethod::AngularInterpolation),
            Err(Error::Config(_))
        ));
    }
}
