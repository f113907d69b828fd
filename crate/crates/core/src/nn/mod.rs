//! Minimal single-image neural-network kernels with hand-written gradients.

pub mod adam;
pub mod ops;
pub mod tensor;
pub mod weights;

pub use adam::Adam;
pub use tensor::Map;
pub use weights::{Tensor, WeightSet};
