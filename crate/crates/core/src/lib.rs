//! Resolution-aware convolutional networks for low-resolution fine-grained
//! classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and a tape-based reverse-mode autodiff graph
//!   with the handful of operators the networks need.
//! * [`optim`]: named parameters, parameter groups with per-group learning
//!   rate / weight decay multipliers, and momentum SGD.
//! * [`checkpoint`]: the `RACNN1` binary parameter format.
//! * [`imageops`]: RGB images, Keys bicubic resampling, degradation,
//!   patch-pair extraction, PSNR and the PPM codec.
//! * [`srnet`]: the three-layer convolutional super-resolution stack.
//! * [`classifier`]: the small convolutional classifier.
//! * [`racnn`]: the fused model and the baseline / g-RACNN / p-RACNN
//!   training protocols.
//! * [`data`]: manifests, the synthetic fine-grained corpus, and metrics.
//! * [`gradcheck`], [`report`], [`cli`]: tooling behind the `racnn` binary.

pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod imageops;
pub mod optim;
pub mod racnn;
pub mod report;
pub mod rng;
pub mod srnet;
pub mod tensor;

pub use error::{Error, Result};

/// Version string embedded in every report file.
pub const ARTIFACT_VERSION: &str = concat!("racnn-", env!("CARGO_PKG_VERSION"));
