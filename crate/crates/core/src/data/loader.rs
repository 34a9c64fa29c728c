//! Turns manifest sequences into preprocessed tensor sequences ready for
//! the network.

use crate::data::manifest::{DatasetManifest, Provenance, SequenceRecord};
use crate::data::nifti::read_nifti;
use crate::data::volume::preprocess_volume;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// A fully loaded, preprocessed visit sequence with its training label.
#[derive(Debug, Clone)]
pub struct LoadedSequence {
    pub patient_id: String,
    pub provenance: Provenance,
    /// Class in 1..=4.
    pub label: u8,
    /// One `[D1, D2, D3, 1]` tensor per visit, in chronological order.
    pub volumes: Vec<Tensor>,
}

impl LoadedSequence {
    /// Zero-based class index used by the loss and the metrics.
    pub fn class_index(&self) -> usize {
        self.label as usize - 1
    }
}

fn load_one(seq: SequenceRecord, target: [usize; 3]) -> Result<LoadedSequence> {
    let mut volumes = Vec::with_capacity(seq.visits.len());
    for (_, path) in &seq.visits {
        let v = read_nifti(path)?;
        volumes.push(preprocess_volume(&v, target, None)?);
    }
    Ok(LoadedSequence {
        patient_id: seq.patient_id,
        provenance: seq.provenance,
        label: seq.label,
        volumes,
    })
}

/// Loads every trainable sequence (two or more visits), preprocessing each
/// scan to `target` grid dimensions. Single-visit lineages are skipped;
/// the second element of the return value counts them.
pub fn load_sequences(
    manifest: &DatasetManifest,
    target: [usize; 3],
) -> Result<(Vec<LoadedSequence>, usize)> {
    load_sequences_jobs(manifest, target, 1)
}

/// Like [`load_sequences`], reading and preprocessing sequences on `jobs`
/// worker threads. Output order matches the serial version exactly.
pub fn load_sequences_jobs(
    manifest: &DatasetManifest,
    target: [usize; 3],
    jobs: usize,
) -> Result<(Vec<LoadedSequence>, usize)> {
    let mut trainable = Vec::new();
    let mut skipped = 0usize;
    for seq in manifest.sequences()? {
        if seq.is_trainable() {
            trainable.push(seq);
        } else {
            skipped += 1;
        }
    }
    let loaded: Result<Vec<LoadedSequence>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Input(format!("worker pool: {e}")))?;
        pool.install(|| {
            trainable
                .into_par_iter()
                .map(|seq| load_one(seq, target))
                .collect()
        })
    } else {
        trainable.into_iter().map(|seq| load_one(seq, target)).collect()
    };
    Ok((loaded?, skipped))
}
