//! Forward and backward kernels over raw row-major buffers.
//!
//! Every reduction into a single output element runs sequentially in a fixed
//! index order. Parallelism is only ever across independent outputs (batch
//! samples or channels), so results are bitwise identical for any thread count.

pub mod conv;
pub mod elementwise;
pub mod pool;
pub mod resample;

pub use conv::{conv3d_backward, conv3d_forward, ConvGeometry};
pub use pool::{PoolGeometry, PoolSpec};
