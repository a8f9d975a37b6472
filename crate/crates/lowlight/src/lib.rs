//! Unsupervised low-light image enhancement.
//!
//! A dual-branch network enhances dark photographs without paired
//! supervision: a convolutional branch captures local structure, a
//! shifted-window attention branch captures long-range context, and a
//! per-pixel signal-to-noise-ratio prior steers both the attention (masking
//! message passing between noisy regions) and the fusion of the two
//! branches. Training minimizes a Retinex decomposition objective that only
//! ever reads the low-light input.
//!
//! The crate is self-contained: tensors and reverse-mode autodiff
//! ([`graph`]), the SNR prior ([`snr`]), the network ([`model`]), the
//! objective ([`loss`]), training ([`train`]), PSNR/SSIM ([`metrics`]) and
//! the checkpoint/config file formats ([`checkpoint`], [`config`]).

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod snr;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
