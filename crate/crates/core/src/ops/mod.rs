//! Forward and backward kernels operating directly on tensors.
//!
//! The autodiff graph records these; they are also usable on their own for
//! inference-only code paths.

pub mod conv;
pub mod elementwise;
pub mod matmul;
pub mod norm;
pub mod pool;
pub mod shape;
pub mod softmax;

pub use conv::{conv3d, conv3d_backward, conv_out_len, Conv3dSpec, ConvGeometry};
pub use elementwise::{binary, broadcast_shape, relu, sigmoid, BinaryOp};
pub use matmul::matmul;
pub use norm::{batchnorm, BnMode};
pub use pool::avgpool_global;
pub use shape::{concat, permute, slice};
pub use softmax::softmax;
