//! Scan geometries, view-angle sets and angular truncation masks.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Source-to-rotation-centre and source-to-detector distances (mm) of the
/// clinical cardiac scanner preset.
pub const CLINICAL_SOURCE_TO_CENTER_MM: f64 = 625.6;
pub const CLINICAL_SOURCE_TO_DETECTOR_MM: f64 = 1097.0;

/// Fraction of extra detector width beyond the circle circumscribing the
/// image, so edge rays never clip the field of view.
const COVERAGE_MARGIN: f64 = 1.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamType {
    Parallel,
    Fan,
}

/// Parameters of a 2-D scan. Immutable once validated.
///
/// Coordinates are physical (mm, or model units when `pixel_size = 1`). The
/// image is centred on the rotation axis. Detector bins are equispaced on a
/// flat detector with bin `b` at offset `(b - (num_bins - 1) / 2) * detector_pitch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGeometry {
    pub beam_type: BeamType,
    pub num_views: usize,
    pub num_bins: usize,
    /// Degrees, strictly increasing, spanning less than `angular_span_deg`.
    pub view_angles: Vec<f64>,
    /// Width of one full rotation for this geometry: 360 for fan beam,
    /// usually 180 for parallel beam.
    pub angular_span_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_to_center_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_to_detector_mm: Option<f64>,
    pub detector_pitch: f64,
    /// (height, width)
    pub image_size: (usize, usize),
    pub pixel_size: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeometryPreset {
    /// 1000 views over 360 degrees, 900 bins.
    CtrateFan,
    /// 984 views over 360 degrees, 835 bins, 625.6 / 1097.0 mm.
    ClinicalFan,
    /// Parallel beam over 180 degrees. `num_bins = None` picks the smallest
    /// unit-pitch detector covering the image.
    Parallel { num_views: usize, num_bins: Option<usize> },
}

impl FromStr for GeometryPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ctrate_fan" => Ok(GeometryPreset::CtrateFan),
            "clinical_fan" => Ok(GeometryPreset::ClinicalFan),
            "parallel" => Ok(GeometryPreset::Parallel {
                num_views: 180,
                num_bins: None,
            }),
            other => Err(Error::Config(format!(
                "unknown geometry preset `{other}` (expected ctrate_fan, clinical_fan or parallel)"
            ))),
        }
    }
}

/// Preset geometry by name with its default image size (512 for the fan
/// presets, 128 for parallel).
pub fn make_geometry_preset(name: &str) -> Result<ScanGeometry> {
    let preset: GeometryPreset = name.parse()?;
    let size = match preset {
        GeometryPreset::Parallel { .. } => 128,
        _ => 512,
    };
    ScanGeometry::preset(preset, size)
}

fn uniform_angles(num_views: usize, span_deg: f64) -> Vec<f64> {
    (0..num_views)
        .map(|i| span_deg * i as f64 / num_views as f64)
        .collect()
}

fn image_radius(image_size: (usize, usize), pixel_size: f64) -> f64 {
    let (h, w) = image_size;
    0.5 * pixel_size * ((h * h + w * w) as f64).sqrt()
}

impl ScanGeometry {
    pub fn preset(preset: GeometryPreset, image_size: usize) -> Result<Self> {
        match preset {
            GeometryPreset::CtrateFan => Self::fan(
                1000,
                900,
                (image_size, image_size),
                500.0 / image_size as f64,
                CLINICAL_SOURCE_TO_CENTER_MM,
                CLINICAL_SOURCE_TO_DETECTOR_MM,
            ),
            GeometryPreset::ClinicalFan => Self::fan(
                984,
                835,
                (image_size, image_size),
                500.0 / image_size as f64,
                CLINICAL_SOURCE_TO_CENTER_MM,
                CLINICAL_SOURCE_TO_DETECTOR_MM,
            ),
            GeometryPreset::Parallel { num_views, num_bins } => {
                let size = (image_size, image_size);
                match num_bins {
                    Some(bins) => Self::parallel_with_bins(num_views, bins, 180.0, size, 1.0),
                    None => Self::parallel(num_views, 180.0, size, 1.0),
                }
            }
        }
    }

    /// Parallel beam with unit-pixel detector pitch and just enough bins to
    /// cover the image diagonal.
    pub fn parallel(
        num_views: usize,
        span_deg: f64,
        image_size: (usize, usize),
        pixel_size: f64,
    ) -> Result<Self> {
        let diameter = 2.0 * image_radius(image_size, pixel_size) / pixel_size;
        let mut bins = diameter.ceil() as usize + 2;
        // Even/odd parity of bins matching the image keeps the central ray on a
        // pixel centre (odd images) or pixel edge (even images).
        if bins % 2 != image_size.1 % 2 {
            bins += 1;
        }
        Self::parallel_with_bins(num_views, bins, span_deg, image_size, pixel_size)
    }

    /// Parallel beam with a fixed bin count; the pitch is widened if needed to
    /// cover the image.
    pub fn parallel_with_bins(
        num_views: usize,
        num_bins: usize,
        span_deg: f64,
        image_size: (usize, usize),
        pixel_size: f64,
    ) -> Result<Self> {
        let needed = 2.0 * image_radius(image_size, pixel_size) * COVERAGE_MARGIN / num_bins.max(1) as f64;
        let geometry = ScanGeometry {
            beam_type: BeamType::Parallel,
            num_views,
            num_bins,
            view_angles: uniform_angles(num_views, span_deg),
            angular_span_deg: span_deg,
            source_to_center_mm: None,
            source_to_detector_mm: None,
            detector_pitch: pixel_size.max(needed),
            image_size,
            pixel_size,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    /// Fan beam over 360 degrees on a flat detector sized to cover the image.
    pub fn fan(
        num_views: usize,
        num_bins: usize,
        image_size: (usize, usize),
        pixel_size: f64,
        source_to_center_mm: f64,
        source_to_detector_mm: f64,
    ) -> Result<Self> {
        let radius = image_radius(image_size, pixel_size);
        if !(radius < source_to_center_mm) {
            return Err(Error::Config(format!(
                "image radius {radius} mm does not fit inside source radius {source_to_center_mm} mm"
            )));
        }
        let half_fan = (radius / source_to_center_mm).asin();
        let half_width = source_to_detector_mm * half_fan.tan() * COVERAGE_MARGIN;
        let geometry = ScanGeometry {
            beam_type: BeamType::Fan,
            num_views,
            num_bins,
            view_angles: uniform_angles(num_views, 360.0),
            angular_span_deg: 360.0,
            source_to_center_mm: Some(source_to_center_mm),
            source_to_detector_mm: Some(source_to_detector_mm),
            detector_pitch: 2.0 * half_width / num_bins.max(1) as f64,
            image_size,
            pixel_size,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.num_views == 0 || self.num_bins == 0 {
            return cfg("num_views and num_bins must be positive".into());
        }
        if self.view_angles.len() != self.num_views {
            return cfg(format!(
                "{} view angles given for {} views",
                self.view_angles.len(),
                self.num_views
            ));
        }
        if self.view_angles.iter().any(|a| !a.is_finite()) {
            return cfg("view angles must be finite".into());
        }
        if self.view_angles.windows(2).any(|w| w[1] <= w[0]) {
            return cfg("view angles must be strictly increasing".into());
        }
        if !(self.angular_span_deg > 0.0 && self.angular_span_deg <= 360.0) {
            return cfg(format!("angular span {} outside (0, 360]", self.angular_span_deg));
        }
        if self.view_angles[self.num_views - 1] - self.view_angles[0] >= self.angular_span_deg {
            return cfg("view angles exceed one rotation".into());
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return cfg("image size must be positive".into());
        }
        if !(self.pixel_size > 0.0) || !(self.detector_pitch > 0.0) {
            return cfg("pixel size and detector pitch must be positive".into());
        }
        let radius = image_radius(self.image_size, self.pixel_size);
        let half_detector = 0.5 * self.num_bins as f64 * self.detector_pitch;
        match self.beam_type {
            BeamType::Parallel => {
                if half_detector < radius {
                    return cfg(format!(
                        "detector half-width {half_detector} does not cover image radius {radius}"
                    ));
                }
            }
            BeamType::Fan => {
                let (Some(r), Some(d)) = (self.source_to_center_mm, self.source_to_detector_mm) else {
                    return cfg("fan geometry needs both source distances".into());
                };
                if !(r > 0.0 && d > r) {
                    return cfg(format!(
                        "fan geometry needs source_to_detector ({d}) > source_to_center ({r}) > 0"
                    ));
                }
                if radius >= r {
                    return cfg("image does not fit inside the source orbit".into());
                }
                let needed = d * (radius / r).asin().tan();
                if half_detector < needed {
                    return cfg(format!(
                        "detector half-width {half_detector} does not cover the fan {needed}"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Distances (source-to-centre, source-to-detector) of a fan geometry.
    pub fn fan_distances(&self) -> Option<(f64, f64)> {
        match self.beam_type {
            BeamType::Fan => Some((self.source_to_center_mm?, self.source_to_detector_mm?)),
            BeamType::Parallel => None,
        }
    }

    /// Signed detector coordinate of bin `b`.
    pub fn bin_offset(&self, b: usize) -> f64 {
        (b as f64 - 0.5 * (self.num_bins as f64 - 1.0)) * self.detector_pitch
    }

    /// Same scan at a coarser image and detector sampling: image size and bin
    /// count divided by `factor`, pixel size and pitch multiplied by it, views
    /// unchanged.
    pub fn downscaled(&self, factor: usize) -> Result<Self> {
        let (h, w) = self.image_size;
        if factor == 0 || h % factor != 0 || w % factor != 0 || self.num_bins % factor != 0 {
            return Err(Error::Shape(format!(
                "geometry ({h}x{w} image, {} bins) is not divisible by {factor}",
                self.num_bins
            )));
        }
        let f = factor as f64;
        let g = ScanGeometry {
            num_bins: self.num_bins / factor,
            detector_pitch: self.detector_pitch * f,
            image_size: (h / factor, w / factor),
            pixel_size: self.pixel_size * f,
            ..self.clone()
        };
        g.validate()?;
        Ok(g)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("geometry serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let g: ScanGeometry = toml::from_str(text).map_err(|e| Error::Parse {
            context: "geometry".into(),
            message: e.to_string(),
        })?;
        g.validate()?;
        Ok(g)
    }
}

/// Per-view keep/drop selector, broadcast over detector bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngularMask {
    /// 1 = measured view, 0 = missing view.
    #[serde(with = "bits")]
    pub keep: Vec<bool>,
    pub angular_range_deg: f64,
    pub start_deg: f64,
}

mod bits {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(keep: &[bool], s: S) -> Result<S::Ok, S::Error> {
        keep.iter().map(|&k| u8::from(k)).collect::<Vec<u8>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("mask entry {other} is not 0 or 1"))),
            })
            .collect()
    }
}

/// Tolerance for angle comparisons, in degrees.
const ANGLE_EPS: f64 = 1e-9;

/// Keeps views whose angle lies in `[start_deg, start_deg + angular_range_deg)`
/// modulo the geometry's rotation span.
pub fn make_mask(geometry: &ScanGeometry, angular_range_deg: f64, start_deg: f64) -> Result<AngularMask> {
    let span = geometry.angular_span_deg;
    if !(angular_range_deg > 0.0) || angular_range_deg > span + ANGLE_EPS || !start_deg.is_finite() {
        return Err(Error::Config(format!(
            "angular range {angular_range_deg} must lie in (0, {span}]"
        )));
    }
    let keep = geometry
        .view_angles
        .iter()
        .map(|&a| {
            let mut rel = (a - start_deg).rem_euclid(span);
            if rel > span - ANGLE_EPS {
                rel = 0.0;
            }
            rel < angular_range_deg - ANGLE_EPS
        })
        .collect();
    Ok(AngularMask {
        keep,
        angular_range_deg,
        start_deg,
    })
}

impl AngularMask {
    pub fn full(num_views: usize, span_deg: f64) -> Self {
        AngularMask {
            keep: vec![true; num_views],
            angular_range_deg: span_deg,
            start_deg: 0.0,
        }
    }

    pub fn num_views(&self) -> usize {
        self.keep.len()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// 1.0 for kept views, 0.0 for dropped ones.
    pub fn weights(&self) -> Vec<f64> {
        self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }

    /// Entrywise `1 - keep`, covering the rest of the rotation.
    pub fn complement(&self, span_deg: f64) -> AngularMask {
        AngularMask {
            keep: self.keep.iter().map(|k| !k).collect(),
            angular_range_deg: span_deg - self.angular_range_deg,
            start_deg: (self.start_deg + self.angular_range_deg).rem_euclid(span_deg),
        }
    }

    pub fn check_geometry(&self, geometry: &ScanGeometry) -> Result<()> {
        if self.keep.len() != geometry.num_views {
            return Err(Error::Shape(format!(
                "mask has {} views, geometry has {}",
                self.keep.len(),
                geometry.num_views
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("mask serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            context: "mask".into(),
            message: e.to_string(),
        })
    }
}

/// Complement of `mask` with respect to the geometry's rotation.
pub fn mask_complement(mask: &AngularMask, geometry: &ScanGeometry) -> AngularMask {
    mask.complement(geometry.angular_span_deg)
}
