//! Autoregressive pixel density model with a discretized logistic mixture
//! likelihood, built on a small tape-based autodiff engine.

pub mod ablations;
pub mod conv;
pub mod data;
pub mod dlm;
pub mod error;
mod fastmath;
pub mod gemm;
pub mod image;
pub mod logistic;
pub mod network;
pub mod ppm;
pub mod run;
pub mod sampling;
pub mod tape;
pub mod tensor;
pub mod training;

pub use conv::{ConvGeometry, Padding};
pub use dlm::{MixtureParams, Channel};
pub use error::{Error, Result};
pub use image::{Images, Pixel};
pub use network::{HeadKind, Mode, Model, ModelConfig};
pub use tape::{Grads, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
