//! Dense row-major 2-D grids: reconstructed images and sinograms.

use crate::error::{Error, Result};

/// Attenuation image, `height x width`, row-major. Row 0 is the top of the
/// field of view.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Projection data, `num_views x num_bins`, row-major (one row per view).
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    num_views: usize,
    num_bins: usize,
    data: Vec<f64>,
}

fn check_len(rows: usize, cols: usize, len: usize, what: &str) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("{what} dimensions must be positive, got {rows}x{cols}")));
    }
    if rows * cols != len {
        return Err(Error::Shape(format!(
            "{what} of {rows}x{cols} needs {} values, got {len}",
            rows * cols
        )));
    }
    Ok(())
}

macro_rules! grid_common {
    ($ty:ident, $rows:ident, $cols:ident, $what:literal) => {
        impl $ty {
            pub fn zeros($rows: usize, $cols: usize) -> Self {
                Self::filled($rows, $cols, 0.0)
            }

            pub fn filled($rows: usize, $cols: usize, value: f64) -> Self {
                Self {
                    $rows,
                    $cols,
                    data: vec![value; $rows * $cols],
                }
            }

            pub fn from_vec($rows: usize, $cols: usize, data: Vec<f64>) -> Result<Self> {
                check_len($rows, $cols, data.len(), $what)?;
                Ok(Self { $rows, $cols, data })
            }

            pub fn from_fn($rows: usize, $cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
                let mut data = Vec::with_capacity($rows * $cols);
                for r in 0..$rows {
                    for c in 0..$cols {
                        data.push(f(r, c));
                    }
                }
                Self { $rows, $cols, data }
            }

            pub fn $rows(&self) -> usize {
                self.$rows
            }

            pub fn $cols(&self) -> usize {
                self.$cols
            }

            /// (rows, cols)
            pub fn shape(&self) -> (usize, usize) {
                (self.$rows, self.$cols)
            }

            pub fn len(&self) -> usize {
                self.data.len()
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.data
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.data
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.data
            }

            pub fn get(&self, r: usize, c: usize) -> f64 {
                self.data[r * self.$cols + c]
            }

            pub fn set(&mut self, r: usize, c: usize, v: f64) {
                self.data[r * self.$cols + c] = v;
            }

            pub fn row(&self, r: usize) -> &[f64] {
                &self.data[r * self.$cols..(r + 1) * self.$cols]
            }

            pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
                &mut self.data[r * self.$cols..(r + 1) * self.$cols]
            }

            pub fn norm(&self) -> f64 {
                self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
            }

            pub fn dot(&self, other: &Self) -> f64 {
                self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
            }

            pub fn all_finite(&self) -> bool {
                self.data.iter().all(|v| v.is_finite())
            }

            pub fn min_value(&self) -> f64 {
                self.data.iter().copied().fold(f64::INFINITY, f64::min)
            }

            pub fn max_value(&self) -> f64 {
                self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }

            pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
                Self {
                    $rows: self.$rows,
                    $cols: self.$cols,
                    data: self.data.iter().map(|&v| f(v)).collect(),
                }
            }

            pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
                if self.shape() != other.shape() {
                    return Err(Error::Shape(format!(
                        concat!($what, " shapes differ: {:?} vs {:?}"),
                        self.shape(),
                        other.shape()
                    )));
                }
                Ok(())
            }
        }
    };
}

grid_common!(Image, height, width, "image");
grid_common!(Sinogram, num_views, num_bins, "sinogram");

impl Image {
    /// Bilinear resampling by an integer factor with half-pixel-centred
    /// sampling and edge clamping.
    ///
    /// Interpolation uses the `a + t * (b - a)` form so constant regions stay
    /// bit-exact.
    pub fn upsample_bilinear(&self, factor: usize) -> Image {
        assert!(factor >= 1, "upsampling factor must be positive");
        let (h, w) = self.shape();
        let src_coord = |i: usize, n: usize| -> (usize, usize, f64) {
            let p = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, p - i0 as f64)
        };
        Image::from_fn(h * factor, w * factor, |r, c| {
            let (r0, r1, fr) = src_coord(r, h);
            let (c0, c1, fc) = src_coord(c, w);
            let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
            let top = lerp(self.get(r0, c0), self.get(r0, c1), fc);
            let bottom = lerp(self.get(r1, c0), self.get(r1, c1), fc);
            lerp(top, bottom, fr)
        })
    }

    /// Block-average downsampling by an integer factor that divides both
    /// dimensions.
    pub fn downsample_mean(&self, factor: usize) -> Result<Image> {
        let (h, w) = self.shape();
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not divisible by downsampling factor {factor}"
            )));
        }
        let scale = 1.0 / (factor * factor) as f64;
        Ok(Image::from_fn(h / factor, w / factor, |r, c| {
            let mut acc = 0.0;
            for dr in 0..factor {
                for dc in 0..factor {
                    acc += self.get(r * factor + dr, c * factor + dc);
                }
            }
            acc * scale
        }))
    }
}

impl Sinogram {
    /// Averages groups of `factor` adjacent detector bins. Views are kept.
    pub fn downsample_bins(&self, factor: usize) -> Result<Sinogram> {
        let (v, b) = self.shape();
        if factor == 0 || b % factor != 0 {
            return Err(Error::Shape(format!(
                "{b} detector bins are not divisible by downsampling factor {factor}"
            )));
        }
        let scale = 1.0 / factor as f64;
        Ok(Sinogram::from_fn(v, b / factor, |r, c| {
            self.row(r)[c * factor..(c + 1) * factor].iter().sum::<f64>() * scale
        }))
    }
}
