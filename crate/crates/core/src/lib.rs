//! Staging of disease progression from sequences of 3D MRI volumes.
//!
//! A shared 3D convolutional extractor turns each volume of a patient's
//! visit history into a feature vector; a recurrent layer (LSTM or GRU,
//! optionally stacked or bidirectional) consumes the visit sequence; a dense
//! head emits a probability for each of the four progression stages. All
//! forward and backward passes are implemented directly on an owned-buffer
//! tensor type, with no external autodiff.

pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod recurrent;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Activation, Tensor};
