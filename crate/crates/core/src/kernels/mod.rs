//! Raw numeric kernels over flat row-major buffers.
//!
//! Every reduction here accumulates in a fixed, documented order so results are
//! reproducible bit-for-bit regardless of thread count.

pub mod conv;
pub mod gemm;
pub mod pool;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvGrads};
pub use gemm::{gemm_acc, transpose};
pub use pool::{maxpool2d_backward, maxpool2d_forward, PoolGeometry};
