//! Shared network building blocks.
//!
//! Convolutions are lowered to batched matrix multiplications (zero-pad via
//! `slice_assign`, im2col via `select`, then `matmul`) because the CPU
//! backend's direct convolution kernels are far too slow in the backward
//! pass for training. Bilinear resizing is expressed as two matmuls with
//! constant interpolation matrices, which also gives it a well-defined
//! gradient on this backend.

mod conv;
mod params;
mod resize;

pub use conv::{gemm_conv2d, Conv2d, ConvBlock, DeformConv2d};
pub(crate) use params::join;
pub use params::{
    load_from_store, named_grads, num_trainable_params, param_manifest, save_to_store,
    GradTensor, NamedParams, ParamRef, ParamStore, ParamValue, StoredTensor,
};
pub use resize::bilinear_resize;
