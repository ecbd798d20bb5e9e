//! 3D ResNet-18 with optional multi-head self-attention for binary CT volume
//! classification, on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{GradMap, Graph, Var};
pub use error::{Error, Result};
pub use metrics::{Confusion, MetricsReport};
pub use model::checkpoint::Checkpoint;
pub use model::{Model, ModelConfig, Variant};
pub use ops::norm::BnMode;
pub use optim::{Adam, Hyperparams};
pub use tensor::{Scalar, Tensor};
pub use train::{StepRecord, TrainOutcome, Trainer};
