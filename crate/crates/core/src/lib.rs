//! Cluster-based contrastive disentangling (CCD) for generalized zero-shot
//! learning over pre-extracted feature vectors.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`nn`], [`optim`], [`rng`], [`gradcheck`]:
//!   dense arithmetic, a reverse-mode tape, MLPs, Adam and seeded streams.
//! - [`data`]: dataset files, the synthetic benchmark generator, batches.
//! - [`clustering`]: per-batch k-means into cluster sets.
//! - [`model`], [`checkpoint`]: the conditional VAE, the disentangling
//!   autoencoder, the alignment head and their on-disk form.
//! - [`losses`]: every training objective and their weighted total.
//! - [`trainer`]: the training loop and its config file.
//! - [`eval`]: feature synthesis, the final classifier, GZSL/ZSL metrics.
//! - [`gradsuite`]: finite-difference checks of every objective on small
//!   random instances.

pub mod autodiff;
pub mod checkpoint;
pub mod clustering;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{CcdError, Result};
pub use tensor::Tensor2;
