//! Forward and backward passes for the per-timestep 3D feature extractor
//! layers and the dense classification head.
//!
//! Every backward pass returns exact analytic gradients; the `train`
//! module's gradient checker verifies each of them against central finite
//! differences.

mod conv;
mod dense;
mod dropout;
mod norm;
mod pool;
mod softmax;

pub use conv::{conv3d_backward, conv3d_forward, conv3d_output_shape, Conv3dCache, Conv3dGrads, Conv3dParams};
pub use dense::{dense_backward, dense_forward, DenseCache, DenseGrads, DenseParams};
pub use dropout::{dropout_backward, dropout_forward, validate_rate, DropoutCache};
pub use norm::{
    batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormGrads, BatchNormState,
    BATCHNORM_EPSILON, BATCHNORM_MOMENTUM,
};
pub use pool::{
    global_maxpool3d, global_maxpool3d_backward, global_maxpool3d_forward, maxpool3d_backward,
    maxpool3d_forward, Pool3dCache, Pool3dConfig,
};
pub use softmax::{softmax, softmax_cross_entropy, CrossEntropyOutput};

/// Whether a pass runs with training semantics (batch statistics, dropout
/// active) or inference semantics (running statistics, dropout passthrough).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
