//! Synthetic phantoms and the dataset-simulation harness.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_mask, AngularMask, ScanGeometry};
use crate::grid::Image;
use crate::io;
use crate::metadata::{self, Category, MetadataRecord, Sex};
use crate::projector::{forward_project, mask_sinogram, simulate_measurement, NoiseSpec};

/// Acquisition ranges of the truncation protocol, in degrees.
pub const STANDARD_RANGES_DEG: [f64; 6] = [60.0, 90.0, 120.0, 150.0, 180.0, 360.0];

/// Ellipse in normalised coordinates: the image spans `[-1, 1]` on both
/// axes, `y` pointing up. `angle_deg` rotates the `a` axis counter-clockwise
/// from `x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub angle_deg: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2) <= 1.0
    }
}

/// The ten-ellipse head phantom with contrast-enhanced intensities, values
/// in `[0, 1]`.
pub fn shepp_logan_ellipses() -> [Ellipse; 10] {
    let e = |x, y, a, b, t, i| Ellipse {
        center: (x, y),
        axes: (a, b),
        angle_deg: t,
        intensity: i,
    };
    [
        e(0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
        e(0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
        e(0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
        e(-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
        e(0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
        e(0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
        e(0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
        e(-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
        e(0.0, -0.605, 0.023, 0.023, 0.0, 0.1),
        e(0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
    ]
}

/// Normalised coordinates of the centre of pixel `(r, c)`.
pub fn pixel_coords(r: usize, c: usize, h: usize, w: usize) -> (f64, f64) {
    let x = (c as f64 - 0.5 * (w as f64 - 1.0)) / (0.5 * w as f64);
    let y = (0.5 * (h as f64 - 1.0) - r as f64) / (0.5 * h as f64);
    (x, y)
}

/// Sum of the intensities of every ellipse covering each pixel centre.
pub fn rasterize_ellipses(ellipses: &[Ellipse], h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |r, c| {
        let (x, y) = pixel_coords(r, c, h, w);
        ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    /// Randomly placed ellipses with positive intensities.
    EllipseSet,
    SheppLoganLike,
    /// Sum of smooth Gaussian blobs inside the unit disk.
    RandomBlobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    /// Number of random shapes; unused by `shepp_logan_like`.
    #[serde(default)]
    pub count: usize,
    /// (height, width)
    pub size: (usize, usize),
    pub seed: u64,
    /// Base values in `[0, 1]` are mapped linearly onto `[lo, hi]`.
    pub intensity_range: (f64, f64),
}

impl PhantomSpec {
    pub fn shepp_logan(size: usize) -> Self {
        PhantomSpec {
            kind: PhantomKind::SheppLoganLike,
            count: 0,
            size: (size, size),
            seed: 0,
            intensity_range: (0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.intensity_range;
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("intensity range [{lo}, {hi}] is empty")));
        }
        if self.size.0 == 0 || self.size.1 == 0 {
            return Err(Error::Config("phantom size must be positive".into()));
        }
        Ok(())
    }
}

fn random_ellipses(count: usize, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    (0..count)
        .map(|_| {
            let radius = 0.7 * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            Ellipse {
                center: (radius * phi.cos(), radius * phi.sin()),
                axes: (rng.random_range(0.05..0.35), rng.random_range(0.05..0.35)),
                angle_deg: rng.random_range(0.0..180.0),
                intensity: rng.random_range(0.1..0.6),
            }
        })
        .collect()
}

fn random_blobs(count: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            let radius = 0.6 * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            (
                radius * phi.cos(),
                radius * phi.sin(),
                rng.random_range(0.08..0.3),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let mut img = Image::from_fn(h, w, |r, c| {
        let (x, y) = pixel_coords(r, c, h, w);
        blobs
            .iter()
            .map(|&(cx, cy, s, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
            .sum()
    });
    let peak = img.max_value();
    if peak > 1.0 {
        img = img.map(|v| v / peak);
    }
    img
}

/// Deterministic phantom for `spec`, with values inside `intensity_range`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Image> {
    spec.validate()?;
    let (h, w) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = match spec.kind {
        PhantomKind::SheppLoganLike => rasterize_ellipses(&shepp_logan_ellipses(), h, w),
        PhantomKind::EllipseSet => rasterize_ellipses(&random_ellipses(spec.count, &mut rng), h, w),
        PhantomKind::RandomBlobs => random_blobs(spec.count, h, w, &mut rng),
    };
    let (lo, hi) = spec.intensity_range;
    Ok(base.map(|v| lo + (hi - lo) * v.clamp(0.0, 1.0)))
}

const DISEASE_LABELS: [&str; 8] = [
    "emphysema",
    "lung nodule",
    "atelectasis",
    "pleural effusion",
    "consolidation",
    "cardiomegaly",
    "coronary artery calcification",
    "hiatal hernia",
];

const IMPRESSIONS: [&str; 4] = [
    "findings are stable compared with the prior study",
    "no acute cardiopulmonary abnormality beyond the listed findings",
    "follow-up imaging is recommended",
    "changes are most pronounced in the lower lobes",
];

fn synthetic_record(range_deg: f64, slice_idx: u32, rng: &mut ChaCha8Rng) -> MetadataRecord {
    let n = rng.random_range(1..=3usize);
    let mut diseases: Vec<String> = Vec::with_capacity(n);
    while diseases.len() < n {
        let label = DISEASE_LABELS[rng.random_range(0..DISEASE_LABELS.len())];
        if !diseases.iter().any(|d| d == label) {
            diseases.push(label.to_string());
        }
    }
    MetadataRecord {
        scan_angle_deg: Some(range_deg),
        exposure_time: Some(format!("{} ms", rng.random_range(2..=10) * 100)),
        tube_current: Some(format!("{} mA", rng.random_range(4..=16) * 25)),
        slice_idx: Some(slice_idx),
        age: Some(rng.random_range(20..=89)),
        sex: Some(if rng.random_bool(0.5) { Sex::Male } else { Sex::Female }),
        diseases,
        impressions: Some(IMPRESSIONS[rng.random_range(0..IMPRESSIONS.len())].to_string()),
        enabled_categories: Category::ALL.to_vec(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: String,
    pub phantom: PhantomSpec,
    pub range_deg: f64,
    pub start_deg: f64,
    /// Paths relative to the manifest directory.
    pub image: PathBuf,
    pub full_sinogram: PathBuf,
    pub sinogram: PathBuf,
    pub mask: PathBuf,
    /// Index into the dataset's metadata record file.
    pub metadata_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub truncation_ranges_deg: Vec<f64>,
    pub noise_sigma: f64,
    pub geometry: PathBuf,
    pub metadata: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

pub const DATASET_MANIFEST: &str = "dataset.toml";

#[derive(Clone, Debug)]
pub struct DatasetOptions {
    pub ranges_deg: Vec<f64>,
    pub start_deg: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Simulates every phantom under every truncation range and writes the image,
/// full sinogram, masked (and optionally noisy) sinogram, mask and metadata
/// to `out_dir`. Output is byte-identical for identical inputs.
pub fn build_dataset(
    specs: &[PhantomSpec],
    geometry: &ScanGeometry,
    options: &DatasetOptions,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    geometry.validate()?;
    for spec in specs {
        spec.validate()?;
        if spec.size != geometry.image_size {
            return Err(Error::Shape(format!(
                "phantom size {:?} does not match geometry image size {:?}",
                spec.size, geometry.image_size
            )));
        }
    }
    let masks: Vec<AngularMask> = options
        .ranges_deg
        .iter()
        .map(|&r| make_mask(geometry, r, options.start_deg))
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    io::atomic_write(&out_dir.join("geometry.toml"), geometry.to_toml().as_bytes())?;

    let phantoms: Vec<_> = specs
        .par_iter()
        .enumerate()
        .map(|(p, spec)| -> Result<_> {
            let image = generate_phantom(spec)?;
            let full = forward_project(&image, geometry)?;
            let image_path = PathBuf::from(format!("p{p:03}_image.grid"));
            let full_path = PathBuf::from(format!("p{p:03}_full.grid"));
            io::write_image(&out_dir.join(&image_path), &image)?;
            io::write_sinogram(&out_dir.join(&full_path), &full)?;
            Ok((image_path, full_path, full))
        })
        .collect::<Result<_>>()?;

    let pairs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|p| (0..masks.len()).map(move |r| (p, r)))
        .collect();
    let results: Vec<(DatasetEntry, MetadataRecord)> = pairs
        .par_iter()
        .enumerate()
        .map(|(index, &(p, r))| -> Result<_> {
            let range = options.ranges_deg[r];
            let id = format!("p{p:03}_r{:03}", range.round() as i64);
            let (image_path, full_path, full) = &phantoms[p];
            let noise = NoiseSpec {
                sigma: options.noise_sigma,
                seed: options.seed.wrapping_add(1 + index as u64),
            };
            let measured = mask_sinogram(&simulate_measurement(full, &noise)?, &masks[r])?;
            let sino_path = PathBuf::from(format!("{id}_sino.grid"));
            let mask_path = PathBuf::from(format!("{id}_mask.toml"));
            io::write_sinogram(&out_dir.join(&sino_path), &measured)?;
            io::atomic_write(&out_dir.join(&mask_path), masks[r].to_toml().as_bytes())?;
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(index as u64 + 1);
            let record = synthetic_record(range, p as u32, &mut rng);
            let entry = DatasetEntry {
                id,
                phantom: specs[p].clone(),
                range_deg: range,
                start_deg: options.start_deg,
                image: image_path.clone(),
                full_sinogram: full_path.clone(),
                sinogram: sino_path,
                mask: mask_path,
                metadata_index: index,
            };
            Ok((entry, record))
        })
        .collect::<Result<_>>()?;
    let (entries, records): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    metadata::save_records(&out_dir.join("metadata.toml"), &records)?;
    let manifest = DatasetManifest {
        seed: options.seed,
        truncation_ranges_deg: options.ranges_deg.clone(),
        noise_sigma: options.noise_sigma,
        geometry: PathBuf::from("geometry.toml"),
        metadata: PathBuf::from("metadata.toml"),
        entries,
    };
    io::write_toml(&out_dir.join(DATASET_MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    io::read_toml(&dir.join(DATASET_MANIFEST))
}
