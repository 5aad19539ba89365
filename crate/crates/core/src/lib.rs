//! Landmark detection with a global-local embedding module, end to end:
//! tensor core with reverse-mode autodiff, the GLE block itself, the
//! encoder/decoder network around it, a synthetic garment dataset, training,
//! and evaluation.

pub mod autodiff;
pub(crate) mod binio;
pub mod data;
pub mod error;
pub mod eval;
pub mod gle;
pub mod layers;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
