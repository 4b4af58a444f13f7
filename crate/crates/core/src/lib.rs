//! EndoUDA: target-independent unsupervised domain adaptation for
//! segmentation.
//!
//! A VAE and a U-Net segmentation head share one encoder and are trained on
//! labelled source-modality images only. At test time each target image is
//! projected onto the source manifold by gradient descent on the VAE latent
//! code under a joint NCC + SSIM objective; the decoded "clone" is then
//! segmented.
//!
//! Modules, bottom-up:
//! - [`data`], [`synthetic`]: tensors, datasets, ingestion and the seeded
//!   modality-shift generator.
//! - [`edge`]: Sobel edge maps for the decoder skip.
//! - [`losses`]: every objective with closed-form gradients.
//! - [`models`]: shared encoder, VAE decoder, U-Net head, checkpoints.
//! - [`training`]: the two-stage harness with plateau schedule and early stop.
//! - [`adapt`]: test-time latent search.
//! - [`metrics`]: overlap metrics, paired t-test, evaluation reports.
//! - [`experiment`]: end-to-end protocols driven by [`config::RunConfig`].

pub mod adapt;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod edge;
pub mod experiment;
pub mod io;
mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
