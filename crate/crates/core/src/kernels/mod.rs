//! Forward and backward kernels on plain tensors, independent of the tape.

pub mod conv;
pub mod correlation;
pub mod pool;
pub mod sample;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub use correlation::{correlation_backward, correlation_channels, correlation_forward};
pub use pool::{avg_pool2_forward, pool_forward, PoolAxis, PoolKind};
pub use sample::{backwarp_backward, backwarp_forward, upsample2x_forward};
