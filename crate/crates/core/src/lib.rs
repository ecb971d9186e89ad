//! Dual-backbone image classifier: a ConvNeXt-style branch and an
//! EfficientNet-style branch whose pooled features are concatenated and fed
//! to a softmax head. Includes the numeric core (tensors, reverse-mode
//! autodiff, Adam), a data pipeline with a synthetic texture generator,
//! training, checkpointing and evaluation metrics.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod convnext;
pub mod data;
pub mod efficientnet;
mod error;
pub mod fsutil;
pub mod fusion;
mod layers;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod report;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use fusion::{build_model, FusionModel, ModelConfig};
pub use params::{ParamId, ParamKind, ParamStore, Parameter};
pub use tensor::{DType, Scalar, Tensor};
