//! Training objective and optimizer.

pub mod adam;
pub mod loss;

pub use adam::{collect_grads, Adam, AdamState, Hyperparams};
pub use loss::{bce_with_logits, bce_with_logits_backward};
