//! Variational latent-variable knowledge transfer for device-mismatched
//! scene classifiers, with distillation baselines and a synthetic benchmark.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradsuite;
pub mod latent;
pub mod losses;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
