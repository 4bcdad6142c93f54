//! Forward/backward kernels. Pure functions of their inputs.

pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod pool;

pub use batchnorm::{batchnorm_backward, batchnorm_forward, BnConfig, Mode};
pub use conv::{conv_backward, conv_forward, ConvParams};
pub use dense::{linear_backward, linear_forward, relu_backward, relu_forward, softmax, softmax_xent, softmax_xent_backward};
pub use pool::{global_pool_backward, global_pool_forward, pool_backward, pool_forward, PoolKind};
