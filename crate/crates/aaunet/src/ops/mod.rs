//! Tensor op kernels: forward computations and their gradient counterparts.
//!
//! Kernels are pure functions over [`Tensor`]s; the autodiff graph in
//! [`crate::graph`] wires them together. Parallel kernels split work over
//! disjoint output slices only, so results are bit-identical at any thread
//! count.

mod conv;
mod pointwise;
mod pool;

pub use conv::{conv2d, conv2d_grad_bias, conv2d_grad_input, conv2d_grad_weight, conv2d_out_shape, ConvSpec};
pub use pointwise::{
    add, bce_loss, bce_loss_grad_pred, broadcast_mul, broadcast_mul_grad_features,
    broadcast_mul_grad_map, concat_channels, concat_split_grad, mul, one_minus, relu, sigmoid,
    slice_channels, sum_all, BroadcastMode, Reduction,
};
pub use pool::{
    global_average_pool, global_average_pool_grad, max_pool_2x2, max_pool_2x2_grad,
    upsample_nearest_2x, upsample_nearest_2x_grad,
};
