//! AAU-net: an adaptive attention U-net for breast ultrasound lesion
//! segmentation, built on its own dense-tensor reverse-mode autodiff core.
//!
//! The crate is generic over the scalar type: training runs in `f32`,
//! gradient-check suites in `f64`. Concrete aliases live at the crate root.

pub mod graph;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{NodeId, Tape};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor, TensorError};

/// Training-width tensor.
pub type Tensor32 = Tensor<f32>;
/// Gradient-check-width tensor.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
