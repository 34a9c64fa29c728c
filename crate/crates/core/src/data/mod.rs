//! Volume I/O, preprocessing, augmentation, manifests, and synthetic
//! cohort generation.

mod augment;
mod loader;
mod manifest;
mod nifti;
mod synthetic;
mod volume;

pub use augment::{
    balance_dataset, materialize_balance, parse_affine_templates, plan_balance, FLIP_AXES,
};
pub use loader::{load_sequences, load_sequences_jobs, LoadedSequence};
pub use manifest::{
    visit_code, visit_rank, DatasetManifest, ManifestRow, Provenance, SequenceRecord,
    MANIFEST_COLUMNS,
};
pub use nifti::{read_nifti, write_nifti, write_nifti_as, NiftiType};
pub use synthetic::{
    generate_synthetic_cohort, structure_intensity, structure_semi_axes, SyntheticSpec,
};
pub use volume::{
    affine_resample, builtin_templates, flip_volume, preprocess_volume, resample_grid,
    AffineTransform, Volume,
};
