//! Raw numeric kernels on flat buffers. The autodiff tape wraps these.

pub mod activation;
pub mod conv;
pub mod fastmath;
pub mod norm;

pub use activation::Activation;
pub use conv::{Conv2dParams, ConvGeometry};
