//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Exactly the operator set the network needs, with a fixed reduction order
//! for reproducibility. Gradients are verified against central finite
//! differences (see [`check`]).

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, op_catalog, OpCheck, DEFAULT_EPS};
pub use graph::{
    depthwise_separable_conv2d, multi_head_attention, AdError, AttnMask, AttnParams, Graph, Var,
    IGNORE_INDEX, MASK_VALUE,
};
pub use tensor::{
    col2im, conv_out_dims, im2col, layer_norm_rows, matmul, matmul_nt, matmul_tn, row_mean_var,
    softmax_row, softmax_rows, Scalar, Tensor, LN_EPS,
};
