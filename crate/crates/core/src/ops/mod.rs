//! Differentiable primitive operations.

pub mod act;
pub mod conv;
pub mod pool;

pub use act::{prelu, prelu_backward, sigmoid, sigmoid_backward, softplus, softplus_backward};
pub use conv::{conv2d_backward, conv2d_forward, ConvSpec};
pub use pool::{avg_pool2, avg_pool2_backward, avg_pool2_n, upsample_nearest2};
