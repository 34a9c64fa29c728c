//! Class balancing by template warps and axis flips.
//!
//! Planning is pure manifest arithmetic: per class, whole patient
//! sequences are copied variant by variant (all six templates, then the
//! three single-axis flips, then template-plus-flip composites) in a
//! round-robin over patients until the class row count reaches the
//! target exactly; the final copy may carry only the leading visits.
//! Every visit of a copy uses the same transform, so the within-patient
//! relationship between time points is preserved. Materialization then
//! renders the planned rows to NIfTI files.

use crate::data::manifest::{DatasetManifest, ManifestRow, Provenance, SequenceRecord};
use crate::data::nifti::{read_nifti, write_nifti_as, NiftiType};
use crate::data::volume::{affine_resample, flip_volume, AffineTransform, Volume};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// Number of mirror axes used for augmentation.
pub const FLIP_AXES: usize = 3;

fn variant_order(n_templates: usize) -> Vec<Provenance> {
    let mut v = Vec::with_capacity(n_templates + FLIP_AXES + n_templates * FLIP_AXES);
    for k in 1..=n_templates {
        v.push(Provenance::Template(k));
    }
    for a in 0..FLIP_AXES {
        v.push(Provenance::Flip(a));
    }
    for k in 1..=n_templates {
        for a in 0..FLIP_AXES {
            v.push(Provenance::TemplateFlip(k, a));
        }
    }
    v
}

fn augmented_path(source: &Path, tag: &str, out_dir: &Path) -> PathBuf {
    let name = source
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (stem, ext) = if let Some(s) = name.strip_suffix(".nii.gz") {
        (s.to_string(), ".nii.gz")
    } else if let Some(s) = name.strip_suffix(".nii") {
        (s.to_string(), ".nii")
    } else {
        (name, ".nii")
    };
    out_dir.join(format!("{stem}.{tag}{ext}"))
}

/// A sequence is a balancing source only when every visit carries the same
/// class, so a copy lands entirely inside one class count.
fn homogeneous_class(rows: &[&ManifestRow]) -> Option<u8> {
    let class = rows.first()?.class;
    rows.iter().all(|r| r.class == class).then_some(class)
}

/// Plans augmented rows so every populated class reaches exactly `target`
/// rows; classes with no rows at all stay empty. Pure: no files are read
/// or written.
pub fn plan_balance(
    m: &DatasetManifest,
    n_templates: usize,
    target: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let counts = m.class_counts();
    for (i, &count) in counts.iter().enumerate() {
        if count > target {
            return Err(Error::Input(format!(
                "target {target} is below the class {} row count {count}",
                i + 1
            )));
        }
    }

    // Original, class-homogeneous sequences per class, in manifest order.
    let mut row_lookup: HashMap<(&str, &str), &ManifestRow> = HashMap::new();
    for row in &m.rows {
        if row.provenance.is_original() {
            row_lookup.insert((row.patient_id.as_str(), row.visit_code.as_str()), row);
        }
    }
    let sequences = m.sequences()?;
    let mut pools: [Vec<&SequenceRecord>; 4] = Default::default();
    for seq in &sequences {
        if !seq.provenance.is_original() {
            continue;
        }
        let rows: Vec<&ManifestRow> = seq
            .visits
            .iter()
            .map(|(code, _)| row_lookup[&(seq.patient_id.as_str(), code.as_str())])
            .collect();
        if let Some(class) = homogeneous_class(&rows) {
            pools[class as usize - 1].push(seq);
        }
    }

    let variants = variant_order(n_templates);
    let mut rows = m.rows.clone();
    for class in 1..=4u8 {
        let pool = &pools[class as usize - 1];
        if counts[class as usize - 1] == 0 {
            continue;
        }
        let mut deficit = target - counts[class as usize - 1];
        if deficit == 0 {
            continue;
        }
        let capacity: usize = pool.iter().map(|s| s.visits.len() * variants.len()).sum();
        if deficit > capacity {
            return Err(Error::Capacity(format!(
                "class {class} needs {deficit} more rows but {} templates and {FLIP_AXES} flip \
                 axes over {} source sequences can generate only {capacity} (short by {})",
                n_templates,
                pool.len(),
                deficit - capacity
            )));
        }
        'rounds: for variant in &variants {
            for seq in pool {
                if deficit == 0 {
                    break 'rounds;
                }
                let take = seq.visits.len().min(deficit);
                for (code, path) in &seq.visits[..take] {
                    let src = row_lookup[&(seq.patient_id.as_str(), code.as_str())];
                    rows.push(ManifestRow {
                        patient_id: seq.patient_id.clone(),
                        visit_code: code.clone(),
                        path: augmented_path(path, &variant.file_tag(), out_dir),
                        class: src.class,
                        provenance: variant.clone(),
                    });
                }
                deficit -= take;
            }
        }
        debug_assert_eq!(deficit, 0);
    }

    DatasetManifest::new(seed, rows)
}

fn render_variant(
    source: &Volume,
    provenance: &Provenance,
    templates: &[AffineTransform],
) -> Result<Volume> {
    let warp = |k: usize| -> Result<Volume> {
        let t = templates.get(k - 1).ok_or_else(|| {
            Error::Input(format!(
                "provenance references template {k} but only {} are loaded",
                templates.len()
            ))
        })?;
        affine_resample(source, &t.about(source.world_center()), source.dims())
    };
    match provenance {
        Provenance::Original => Ok(source.clone()),
        Provenance::Template(k) => warp(*k),
        Provenance::Flip(a) => flip_volume(source, *a),
        Provenance::TemplateFlip(k, a) => flip_volume(&warp(*k)?, *a),
    }
}

/// Renders every augmented row of a plan to disk, reading each source scan
/// once. Returns the number of files written.
pub fn materialize_balance(
    plan: &DatasetManifest,
    templates: &[AffineTransform],
) -> Result<usize> {
    let mut sources: HashMap<(&str, &str), &PathBuf> = HashMap::new();
    for row in &plan.rows {
        if row.provenance.is_original() {
            sources.insert((row.patient_id.as_str(), row.visit_code.as_str()), &row.path);
        }
    }
    let mut cache: HashMap<&PathBuf, Volume> = HashMap::new();
    let mut written = 0usize;
    for row in &plan.rows {
        if row.provenance.is_original() {
            continue;
        }
        let src_path = sources
            .get(&(row.patient_id.as_str(), row.visit_code.as_str()))
            .ok_or_else(|| {
                Error::Manifest(format!(
                    "augmented row ({}, {}) has no original source row",
                    row.patient_id, row.visit_code
                ))
            })?;
        if !cache.contains_key(*src_path) {
            cache.insert(src_path, read_nifti(src_path)?);
        }
        let rendered = render_variant(&cache[*src_path], &row.provenance, templates)?;
        if let Some(parent) = row.path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        write_nifti_as(&rendered, &row.path, NiftiType::F32)?;
        written += 1;
    }
    Ok(written)
}

/// Parses registration transforms from text: one transform per line, 12
/// whitespace-separated numbers (the 3x3 linear part row by row, then the
/// translation), with `#` comments and blank lines ignored. Transforms are
/// numbered `template:1` onward in file order.
pub fn parse_affine_templates(text: &str) -> Result<Vec<AffineTransform>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    Error::Format(format!("template line {}: bad number {tok}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != 12 {
            return Err(Error::Format(format!(
                "template line {}: expected 12 numbers (3x3 linear then translation), got {}",
                lineno + 1,
                values.len()
            )));
        }
        let t = AffineTransform {
            linear: [
                [values[0], values[1], values[2]],
                [values[3], values[4], values[5]],
                [values[6], values[7], values[8]],
            ],
            translation: [values[9], values[10], values[11]],
            id: format!("template:{}", out.len() + 1),
        };
        t.inverse().map_err(|_| {
            Error::Transform(format!("template line {}: linear part is singular", lineno + 1))
        })?;
        out.push(t);
    }
    if out.is_empty() {
        return Err(Error::Format("template file defines no transforms".into()));
    }
    Ok(out)
}

/// Plans and materializes in one step: the returned manifest has exactly
/// `target` rows per class, with every augmented file on disk.
pub fn balance_dataset(
    m: &DatasetManifest,
    templates: &[AffineTransform],
    target: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let plan = plan_balance(m, templates.len(), target, seed, out_dir)?;
    materialize_balance(&plan, templates)?;
    Ok(plan)
}
