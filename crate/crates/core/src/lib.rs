pub mod augment;
pub mod autograd;
pub mod config;
pub mod corrupt;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use autograd::{Conv2dOpts, Tape, Unary, Var};
pub use config::{CutDepthMode, ModelConfig, RunConfig, TrainConfig};
pub use data::DepthSample;
pub use error::{Error, Result};
pub use metrics::{EvalConfig, MetricsReport};
pub use model::GlpDepth;
pub use tensor::Tensor;
