//! Unsupervised image anomaly detection with a β-weighted variational
//! autoencoder.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors and a tape-based reverse-mode
//!   differentiator with the convolution, normalization and elementwise ops
//!   the model needs.
//! - [`model`]: the DCGAN-style encoder/decoder, Gaussian posterior, closed
//!   form KL, Gaussian likelihood and the training objective.
//! - [`scores`]: the six VAE / importance-weighted anomaly scores.
//! - [`data`]: PPM/PGM and raw tensor I/O, preprocessing, manifests, splits,
//!   batching and the synthetic blobs corpus.
//! - [`train`]: Adam, the training loop and checkpoints.
//! - [`metrics`]: ROC / AUC and per-class evaluation reports.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod scores;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, ParameterStore, Real, Tensor};
