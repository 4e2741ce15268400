//! Dense 5-D tensors with reverse-mode differentiation over exactly the operator
//! set the two segmentation networks need.

mod array;
mod checkpoint;
mod element;
pub mod gradcheck;
mod graph;
mod kernels;

pub use array::NdArray;
pub use checkpoint::{decode_arrays, encode_arrays, load_arrays, save_arrays};
pub use element::Element;
pub use gradcheck::{compare_gradients, finite_diff_check, finite_diff_check_at, relative_error};
pub use graph::{CustomOp, Graph, Tensor};
pub use kernels::conv::{conv_out_dims, Triple};

/// Plain kernels on arrays, without graph bookkeeping.
pub mod raw {
    pub use super::kernels::conv::{conv3d_forward, conv_transpose3d_forward};
    pub use super::kernels::norm::instance_norm_forward;
    pub use super::kernels::pointwise::{concat_channels_forward, leaky_relu_forward, softmax_channels_forward};
    pub use super::kernels::pool::{max_pool3d_forward, upsample_nearest_forward};
}

#[cfg(test)]
mod tests;
