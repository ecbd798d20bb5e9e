//! Parameterised layers built on the autodiff graph.
//!
//! Layers only hold parameter handles; values live in a [`ParamStore`] so the
//! same layer structure runs in `f32` for training and `f64` for checking.

pub mod attention;
pub mod block;
pub mod layers;
pub mod params;

pub use attention::{MhaConfig, MultiHeadAttention};
pub use block::{BasicBlock, BlockConfig};
pub use layers::{BatchNorm3d, Conv3d, Linear};
pub use params::{Buffer, BufferId, Ctx, ParamBuilder, ParamId, ParamStore, Parameter, StatUpdate};
