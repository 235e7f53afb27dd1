//! Forward kernels of the network operations. The differentiable versions
//! live on [`crate::tape::Tape`].

mod conv;
pub(crate) mod gemm;
mod norm;
mod pool;
mod upconv;

pub use conv::{conv3d, ConvParams};
pub use norm::{instance_norm, DEFAULT_EPS};
pub use pool::maxpool3d;
pub use upconv::upconv3d;

pub(crate) use conv::conv3d_backward;
pub(crate) use norm::{instance_norm_backward, instance_norm_with_stats, NormStats};
pub(crate) use pool::maxpool3d_backward;
pub(crate) use upconv::upconv3d_backward;

use crate::volume::Volume;

/// NaN passes through so that divergence stays visible downstream.
pub fn relu(input: &Volume) -> Volume {
    input.map(|v| if v < 0.0 { 0.0 } else { v })
}

pub fn sigmoid(input: &Volume) -> Volume {
    input.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn add(a: &Volume, b: &Volume) -> crate::Result<Volume> {
    a.zip_map(b, |x, y| x + y)
}
