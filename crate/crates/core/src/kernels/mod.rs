//! Forward and backward kernels on plain tensors. The autodiff tape in
//! [`crate::tape`] records calls into these.

pub mod conv;
pub mod gemm;
pub mod linear;
pub mod norm;
pub mod pointwise;
pub mod pool;
pub mod softmax;
pub mod structural;

pub use conv::{conv2d, conv2d_backward, conv2d_direct, ConvSpec};
pub use linear::{cross_entropy, fully_connected};
pub use norm::{BnMode, BnState, BN_EPS, BN_MOMENTUM};
pub use pointwise::Activation;
pub use pool::{attention_pool, global_avg_pool, max_pool, PoolSpec};
pub use softmax::{softmax_over, Axis, AxisSet};
pub use structural::{binary, concat_channels, BinaryOp};
