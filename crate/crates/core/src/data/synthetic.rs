//! Synthetic longitudinal cohorts for end-to-end exercises.
//!
//! Each patient scan is a noisy background plus one bright ellipsoid.
//! The ellipsoid's size and intensity decrease with the class index, and
//! its radius additionally shrinks from visit to visit at a class-
//! dependent rate, so both the spatial features and the temporal dynamics
//! carry the label. Generation is fully deterministic: every volume is
//! keyed by (seed, class, patient, visit) alone.

use crate::data::manifest::{visit_code, DatasetManifest, ManifestRow, Provenance};
use crate::data::nifti::{write_nifti_as, NiftiType};
use crate::data::volume::Volume;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub dims: [usize; 3],
    pub visits: usize,
    pub seed: u64,
}

const BACKGROUND_MAX: f64 = 0.15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn key(seed: u64, class: u8, patient: usize, visit: u64) -> u64 {
    splitmix(
        seed ^ splitmix((class as u64) << 48 ^ (patient as u64) << 16 ^ visit),
    )
}

/// Nominal ellipsoid semi-axes for a class at a visit, before per-patient
/// jitter: a fixed fraction of the half-extent, shrinking per visit.
pub fn structure_semi_axes(dims: [usize; 3], class: u8, visit: usize) -> [f64; 3] {
    let base = 0.62 - 0.08 * (class as f64 - 1.0);
    let shrink = (1.0 - 0.03 * class as f64 * visit as f64).max(0.2);
    [
        base * shrink * (dims[0] as f64 - 1.0) / 2.0,
        base * shrink * (dims[1] as f64 - 1.0) / 2.0,
        base * shrink * (dims[2] as f64 - 1.0) / 2.0,
    ]
}

/// Nominal peak intensity of the structure for a class.
pub fn structure_intensity(class: u8) -> f64 {
    1.0 - 0.15 * (class as f64 - 1.0)
}

fn synth_volume(spec: &SyntheticSpec, class: u8, patient: usize, visit: usize) -> Volume {
    let mut patient_rng =
        ChaCha12Rng::seed_from_u64(key(spec.seed, class, patient, u64::MAX));
    let dims = spec.dims;
    let center = [
        (dims[0] as f64 - 1.0) / 2.0 + patient_rng.gen_range(-2.0..2.0),
        (dims[1] as f64 - 1.0) / 2.0 + patient_rng.gen_range(-2.0..2.0),
        (dims[2] as f64 - 1.0) / 2.0 + patient_rng.gen_range(-2.0..2.0),
    ];
    let intensity = structure_intensity(class) * patient_rng.gen_range(0.98..1.02);
    let axes = structure_semi_axes(dims, class, visit);

    let mut visit_rng =
        ChaCha12Rng::seed_from_u64(key(spec.seed, class, patient, visit as u64));
    let mut data = Vec::with_capacity(dims.iter().product());
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let r2 = ((i as f64 - center[0]) / axes[0]).powi(2)
                    + ((j as f64 - center[1]) / axes[1]).powi(2)
                    + ((k as f64 - center[2]) / axes[2]).powi(2);
                let structure = if r2 < 1.0 { intensity * (1.0 - r2) } else { 0.0 };
                data.push(visit_rng.gen_range(0.0..BACKGROUND_MAX) + structure);
            }
        }
    }
    Volume::with_default_frame(
        Tensor::from_vec(&dims, data).expect("dims validated"),
        [1.0; 3],
    )
    .expect("positive spacing")
}

/// Generates `per_class` patients for each of the four classes, `visits`
/// scans each, written as compressed NIfTI files under `out_dir`, and
/// returns the matching manifest.
pub fn generate_synthetic_cohort(
    spec: &SyntheticSpec,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if spec.per_class == 0 {
        return Err(Error::Input("per_class must be at least 1".into()));
    }
    if spec.dims.iter().any(|&d| d < 16) {
        return Err(Error::Input(format!(
            "volume dims must be at least 16 per axis, got {:?}",
            spec.dims
        )));
    }
    if spec.visits < 2 {
        return Err(Error::Input("sequences need at least 2 visits".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut rows = Vec::with_capacity(4 * spec.per_class * spec.visits);
    for class in 1..=4u8 {
        for patient in 0..spec.per_class {
            let patient_id = format!("C{class}P{patient:03}");
            for visit in 0..spec.visits {
                let code = visit_code(visit);
                let path = out_dir.join(format!("{patient_id}_{code}.nii.gz"));
                let volume = synth_volume(spec, class, patient, visit);
                write_nifti_as(&volume, &path, NiftiType::F32)?;
                rows.push(ManifestRow {
                    patient_id: patient_id.clone(),
                    visit_code: code,
                    path,
                    class,
                    provenance: Provenance::Original,
                });
            }
        }
    }
    DatasetManifest::new(spec.seed, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::nifti::read_nifti;

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec { per_class: 2, dims: [16, 16, 16], visits: 2, seed }
    }

    #[test]
    fn preconditions_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = small_spec(0);
        s.dims = [16, 8, 16];
        assert!(generate_synthetic_cohort(&s, dir.path()).is_err());
        let mut s = small_spec(0);
        s.visits = 1;
        assert!(generate_synthetic_cohort(&s, dir.path()).is_err());
        let mut s = small_spec(0);
        s.per_class = 0;
        assert!(generate_synthetic_cohort(&s, dir.path()).is_err());
    }

    #[test]
    fn manifest_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { per_class: 10, dims: [16, 16, 16], visits: 2, seed: 5 };
        let m = generate_synthetic_cohort(&spec, dir.path()).unwrap();
        assert_eq!(m.rows.len(), 80);
        let seqs = m.sequences().unwrap();
        assert_eq!(seqs.len(), 40);
        assert!(seqs.iter().all(|s| s.is_trainable()));
        assert_eq!(m.class_counts(), [20, 20, 20, 20]);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_files() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = generate_synthetic_cohort(&small_spec(11), dir_a.path()).unwrap();
        let b = generate_synthetic_cohort(&small_spec(11), dir_b.path()).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            let bytes_a = std::fs::read(&ra.path).unwrap();
            let bytes_b = std::fs::read(&rb.path).unwrap();
            assert_eq!(bytes_a, bytes_b, "{}", ra.path.display());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = generate_synthetic_cohort(&small_spec(1), dir_a.path()).unwrap();
        let b = generate_synthetic_cohort(&small_spec(2), dir_b.path()).unwrap();
        let bytes_a = std::fs::read(&a.rows[0].path).unwrap();
        let bytes_b = std::fs::read(&b.rows[0].path).unwrap();
        assert_ne!(bytes_a, bytes_b);
    }

    #[test]
    fn structure_intensity_decreases_strictly_with_class() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { per_class: 20, dims: [16, 16, 16], visits: 2, seed: 21 };
        let m = generate_synthetic_cohort(&spec, dir.path()).unwrap();

        // Average per class over baseline scans, inside the nominal
        // structure region padded for the per-patient centre jitter.
        let mut means = [0.0f64; 4];
        for class in 1..=4u8 {
            let axes = structure_semi_axes(spec.dims, class, 0);
            let c = [
                (spec.dims[0] as f64 - 1.0) / 2.0,
                (spec.dims[1] as f64 - 1.0) / 2.0,
                (spec.dims[2] as f64 - 1.0) / 2.0,
            ];
            let mut total = 0.0;
            let mut count = 0usize;
            for row in m
                .rows
                .iter()
                .filter(|r| r.class == class && r.visit_code == "BL")
            {
                let v = read_nifti(&row.path).unwrap();
                for i in 0..spec.dims[0] {
                    for j in 0..spec.dims[1] {
                        for k in 0..spec.dims[2] {
                            let r2 = ((i as f64 - c[0]) / (axes[0] + 2.5)).powi(2)
                                + ((j as f64 - c[1]) / (axes[1] + 2.5)).powi(2)
                                + ((k as f64 - c[2]) / (axes[2] + 2.5)).powi(2);
                            if r2 < 1.0 {
                                total += v.grid.at(&[i, j, k]);
                                count += 1;
                            }
                        }
                    }
                }
            }
            means[class as usize - 1] = total / count as f64;
        }
        for c in 0..3 {
            assert!(
                means[c] > means[c + 1] + 0.01,
                "class means not strictly decreasing: {means:?}"
            );
        }
    }

    #[test]
    fn structure_shrinks_faster_for_higher_classes() {
        let d = [32, 32, 16];
        for class in 1..=4u8 {
            let bl = structure_semi_axes(d, class, 0);
            let v2 = structure_semi_axes(d, class, 2);
            assert!(v2[0] < bl[0]);
        }
        let slow = structure_semi_axes(d, 1, 3)[0] / structure_semi_axes(d, 1, 0)[0];
        let fast = structure_semi_axes(d, 4, 3)[0] / structure_semi_axes(d, 4, 0)[0];
        assert!(fast < slow);
    }
}
