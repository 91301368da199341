//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{compare_gradient, grad_check, rel_err, GradCheckReport, REL_ERR_FLOOR};
pub use graph::{BatchStats, Graph, Var};

use crate::error::Result;
use crate::tensor::Tensor;

/// Per-channel mean and biased variance of an `N×C×H×W` tensor.
pub fn feature_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (mean, var) = kernels::channel_stats(x)?;
    let c = mean.len();
    Ok((Tensor::from_parts(vec![c], mean), Tensor::from_parts(vec![c], var)))
}

/// Untracked `conv2d` for callers that do not need gradients.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    kernels::conv2d_forward(x, w, b, stride, pad)
}

/// Untracked transposed convolution, the adjoint of [`conv2d`] plus bias.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    kernels::conv_transpose2d_forward(x, w, b, stride, pad)
}
