use std::path::Path;

use lact_core::geometry::{AngularMask, ScanGeometry};
use lact_core::io::{read_image, read_sinogram};
use lact_core::metadata::load_records;
use lact_core::phantoms::*;

fn specs(size: usize) -> Vec<PhantomSpec> {
    vec![
        PhantomSpec::shepp_logan(size),
        PhantomSpec {
            kind: PhantomKind::RandomBlobs,
            count: 5,
            size: (size, size),
            seed: 11,
            intensity_range: (0.0, 1.0),
        },
    ]
}

fn options(ranges: &[f64], noise: f64) -> DatasetOptions {
    DatasetOptions {
        ranges_deg: ranges.to_vec(),
        start_deg: 0.0,
        noise_sigma: noise,
        seed: 5,
    }
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn shepp_logan_centre_is_sum_of_covering_ellipses() {
    let n = 128;
    let img = generate_phantom(&PhantomSpec::shepp_logan(n)).unwrap();
    for (r, c) in [(n / 2, n / 2), (n / 2 - 20, n / 2 + 5), (30, 64)] {
        let (x, y) = pixel_coords(r, c, n, n);
        let expected: f64 = shepp_logan_ellipses().iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum();
        assert!((img.get(r, c) - expected.clamp(0.0, 1.0)).abs() < 1e-12, "pixel ({r},{c})");
    }
}

#[test]
fn dataset_counts_masks_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let geometry = ScanGeometry::parallel(36, 360.0, (32, 32), 1.0).unwrap();
    let manifest = build_dataset(&specs(32), &geometry, &options(&STANDARD_RANGES_DEG, 0.0), dir.path()).unwrap();
    assert_eq!(manifest.entries.len(), 12);
    assert_eq!(load_dataset_manifest(dir.path()).unwrap(), manifest);
    let records = load_records(&dir.path().join(&manifest.metadata)).unwrap();
    assert_eq!(records.len(), 12);
    for entry in &manifest.entries {
        let sino = read_sinogram(&dir.path().join(&entry.sinogram)).unwrap();
        let mask_text = std::fs::read_to_string(dir.path().join(&entry.mask)).unwrap();
        let mask = AngularMask::from_toml(&mask_text).unwrap();
        for (v, &keep) in mask.keep.iter().enumerate() {
            if !keep {
                assert!(sino.row(v).iter().all(|&x| x == 0.0), "{}: dropped view {v} not zero", entry.id);
            }
        }
        let record = &records[entry.metadata_index];
        assert_eq!(record.scan_angle_deg, Some(entry.range_deg));
        assert!(!record.diseases.is_empty());
        assert!(record.render_prompt().is_ok());
        if entry.range_deg == 360.0 {
            let full = read_sinogram(&dir.path().join(&entry.full_sinogram)).unwrap();
            assert_eq!(full, sino);
        }
        assert_eq!(read_image(&dir.path().join(&entry.image)).unwrap().shape(), (32, 32));
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let geometry = ScanGeometry::parallel(24, 360.0, (24, 24), 1.0).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_dataset(&specs(24), &geometry, &options(&[90.0, 360.0], 0.01), a.path()).unwrap();
    build_dataset(&specs(24), &geometry, &options(&[90.0, 360.0], 0.01), b.path()).unwrap();
    let (fa, fb) = (read_all(a.path()), read_all(b.path()));
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
}

#[test]
fn size_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let geometry = ScanGeometry::parallel(24, 360.0, (24, 24), 1.0).unwrap();
    assert!(build_dataset(&specs(32), &geometry, &options(&[90.0], 0.0), dir.path()).is_err());
}
