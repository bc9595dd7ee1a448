//! Full-reference image quality metrics: PSNR, SSIM, nRMSE, PCC and nMI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Image;

/// SSIM Gaussian window: 11 taps, sigma 1.5.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub const DEFAULT_NMI_BINS: usize = 256;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    a.ensure_same_shape(b)
}

pub fn mse(test: &Image, reference: &Image) -> Result<f64> {
    same_shape(test, reference)?;
    let sum: f64 = test
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(sum / test.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(test: &Image, reference: &Image, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::Domain(format!("data range must be positive, got {data_range}")));
    }
    let err = mse(test, reference)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / err).log10())
}

/// `‖test − ref‖ / ‖ref‖`.
pub fn nrmse(test: &Image, reference: &Image) -> Result<f64> {
    same_shape(test, reference)?;
    let denom = reference.norm();
    if denom == 0.0 {
        return Err(Error::Domain("nRMSE undefined for an all-zero reference".into()));
    }
    let num: f64 = test
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Separable "valid" Gaussian filtering: output covers positions where the
/// whole window fits.
fn filter_valid(data: &[f64], h: usize, w: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|k| kernel[k] * data[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|k| kernel[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity over all 11x11 Gaussian-weighted windows lying
/// fully inside the image.
pub fn ssim(test: &Image, reference: &Image, data_range: f64) -> Result<f64> {
    same_shape(test, reference)?;
    let (h, w) = test.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    if !(data_range > 0.0) {
        return Err(Error::Domain(format!("data range must be positive, got {data_range}")));
    }
    let kernel = gaussian_window();
    let x = test.as_slice();
    let y = reference.as_slice();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let ux = filter_valid(x, h, w, &kernel);
    let uy = filter_valid(y, h, w, &kernel);
    let uxx = filter_valid(&xx, h, w, &kernel);
    let uyy = filter_valid(&yy, h, w, &kernel);
    let uxy = filter_valid(&xy, h, w, &kernel);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..ux.len() {
        let (mx, my) = (ux[i], uy[i]);
        let vx = uxx[i] - mx * mx;
        let vy = uyy[i] - my * my;
        let vxy = uxy[i] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * vxy + c2);
        let den = (mx * mx + my * my + c1) * (vx + vy + c2);
        total += num / den;
    }
    Ok(total / ux.len() as f64)
}

/// Pearson correlation of the flattened pixel values.
pub fn pcc(test: &Image, reference: &Image) -> Result<f64> {
    same_shape(test, reference)?;
    let n = test.len() as f64;
    let ma = test.as_slice().iter().sum::<f64>() / n;
    let mb = reference.as_slice().iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in test.as_slice().iter().zip(reference.as_slice()) {
        let (da, db) = (a - ma, b - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Domain("PCC undefined for a constant image".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

fn bin_indices(img: &Image, bins: usize) -> Vec<usize> {
    let lo = img.min_value();
    let hi = img.max_value();
    let width = hi - lo;
    img.as_slice()
        .iter()
        .map(|&v| {
            if width > 0.0 {
                (((v - lo) / width * bins as f64) as usize).min(bins - 1)
            } else {
                0
            }
        })
        .collect()
}

/// Entropy (nats) of a histogram. Counts are summed in sorted order so the
/// result does not depend on bin layout, which keeps nMI exactly symmetric.
fn entropy(counts: &[usize], total: f64) -> f64 {
    let mut nonzero: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    nonzero.sort_unstable();
    nonzero
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Normalised mutual information `(H(A) + H(B)) / H(A, B)` from a joint
/// histogram with `bins` equal-width bins per axis spanning each image's own
/// range. Lies in `[1, 2]`; returns 2 when the joint entropy is zero (both
/// images single-valued).
pub fn nmi(test: &Image, reference: &Image, bins: usize) -> Result<f64> {
    same_shape(test, reference)?;
    if bins < 2 {
        return Err(Error::Domain(format!("nMI needs at least 2 bins, got {bins}")));
    }
    let ia = bin_indices(test, bins);
    let ib = bin_indices(reference, bins);
    let mut joint = vec![0usize; bins * bins];
    let mut ca = vec![0usize; bins];
    let mut cb = vec![0usize; bins];
    for (&a, &b) in ia.iter().zip(&ib) {
        joint[a * bins + b] += 1;
        ca[a] += 1;
        cb[b] += 1;
    }
    let total = ia.len() as f64;
    let hab = entropy(&joint, total);
    if hab == 0.0 {
        return Ok(2.0);
    }
    Ok((entropy(&ca, total) + entropy(&cb, total)) / hab)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Defaults to `ref.max − ref.min`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_range: Option<f64>,
    pub nmi_bins: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            data_range: None,
            nmi_bins: DEFAULT_NMI_BINS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub psnr_db: f64,
    pub nrmse: f64,
    pub pcc: f64,
    pub nmi: f64,
    /// Data range actually used for SSIM and PSNR.
    pub data_range: f64,
}

impl MetricReport {
    pub fn compute(test: &Image, reference: &Image, options: &MetricOptions) -> Result<Self> {
        let data_range = options
            .data_range
            .unwrap_or_else(|| reference.max_value() - reference.min_value());
        Ok(MetricReport {
            ssim: ssim(test, reference, data_range)?,
            psnr_db: psnr(test, reference, data_range)?,
            nrmse: nrmse(test, reference)?,
            pcc: pcc(test, reference)?,
            nmi: nmi(test, reference, options.nmi_bins)?,
            data_range,
        })
    }

    /// Per-metric average over slices. An infinite PSNR in any slice makes the
    /// mean PSNR infinite.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            ssim: avg(|r| r.ssim),
            psnr_db: avg(|r| r.psnr_db),
            nrmse: avg(|r| r.nrmse),
            pcc: avg(|r| r.pcc),
            nmi: avg(|r| r.nmi),
            data_range: avg(|r| r.data_range),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| rng.random::<f64>())
    }

    #[test]
    fn psnr_anchors() {
        let a = random(8, 8, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let zero = Image::zeros(8, 8);
        let c = Image::filled(8, 8, 0.1);
        assert!((psnr(&c, &zero, 1.0).unwrap() - (-20.0 * 0.1f64.log10())).abs() < 1e-12);
        assert!(psnr(&a, &Image::zeros(7, 8), 1.0).is_err());
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let a = random(13, 9, 2);
        let b = random(13, 9, 3);
        let mut acc = 0.0;
        for r in 0..13 {
            for c in 0..9 {
                acc += (a.get(r, c) - b.get(r, c)).powi(2);
            }
        }
        let expected = 10.0 * (2.0f64.powi(2) / (acc / 117.0)).log10();
        assert!((psnr(&a, &b, 2.0).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn psnr_strictly_decreasing_in_mse() {
        let r = random(8, 8, 4);
        let mut last = f64::INFINITY;
        for k in 1..6 {
            let t = r.map(|v| v + 0.01 * k as f64);
            let p = psnr(&t, &r, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn nrmse_anchors() {
        let a = random(6, 6, 5);
        assert_eq!(nrmse(&a, &a).unwrap(), 0.0);
        let twice = a.map(|v| 2.0 * v);
        assert!((nrmse(&twice, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(nrmse(&a, &Image::zeros(6, 6)), Err(Error::Domain(_))));
    }

    #[test]
    fn ssim_anchors() {
        let a = random(24, 20, 6);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&neg, &a, 1.0).unwrap() < 0.1);
        assert!(ssim(&Image::zeros(10, 12), &Image::zeros(10, 12), 1.0).is_err());
    }

    #[test]
    fn pcc_anchors() {
        let a = random(10, 10, 7);
        assert!((pcc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((pcc(&a.map(|v| 3.0 * v - 2.0), &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((pcc(&a.map(|v| -v), &a).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(pcc(&Image::filled(10, 10, 1.0), &a), Err(Error::Domain(_))));
    }

    #[test]
    fn nmi_anchors() {
        let a = random(16, 16, 8);
        assert!((nmi(&a, &a, 32).unwrap() - 2.0).abs() < 1e-10);
        let b = random(16, 16, 9);
        assert_eq!(nmi(&a, &b, 16).unwrap(), nmi(&b, &a, 16).unwrap());
        assert!(nmi(&a, &b, 1).is_err());
        let c = Image::filled(16, 16, 3.0);
        assert_eq!(nmi(&c, &c, 8).unwrap(), 2.0);
        assert!((nmi(&c, &a, 8).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_independent_noise_near_one() {
        for seed in 0..20 {
            let a = random(64, 64, 100 + seed);
            let b = random(64, 64, 200 + seed);
            let v = nmi(&a, &b, 16).unwrap();
            assert!((1.0..=1.1).contains(&v), "seed {seed}: {v}");
        }
    }

    #[test]
    fn report_mean_of_single_slice() {
        let a = random(16, 16, 10);
        let b = random(16, 16, 11);
        let r = MetricReport::compute(&a, &b, &MetricOptions::default()).unwrap();
        assert_eq!(MetricReport::mean(&[r]).unwrap(), r);
        assert!(MetricReport::mean(&[]).is_none());
    }
}
