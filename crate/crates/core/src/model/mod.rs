//! Model assembly: architecture catalogue, parameter initialization,
//! end-to-end forward/backward, layer tables, and checkpoints.

mod arch;
mod build;
mod checkpoint;
mod forward;
mod golden;

pub use arch::{ArchitectureId, CellFlavor, ScaleProfile, NUM_CLASSES};
pub use build::{
    count_parameters, diff_tables, format_table, ConvBlock, LayerRow, Model, RecurrentLayer,
    DEFAULT_DROPOUT_RATE,
};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use forward::{backward_batch, forward_batch, ModelCache, ModelGrads};
pub use golden::{check_against_reference, reference_table};
