//! Dictionary-prior denoising and test-time adaptation for transient
//! electromagnetic (TEM) soundings.
//!
//! The pipeline has four stages, each with its own module:
//!
//! 1. [`sim`] — synthesize clean decay transients and inject calibrated
//!    field noise (Gaussian, low/high-frequency tones, impulses, compound).
//! 2. [`dict`] — learn a sparse dictionary over clean transients and encode
//!    signals against it (ISTA + rank-1 atom updates).
//! 3. [`net`] — a small convolutional denoiser whose regression branch
//!    predicts sparse codes; the dictionary reconstruction is fused back
//!    into the decoder.
//! 4. [`tta`] — source-free test-time adaptation: one optimizer step per
//!    batch against self-supervised consistency losses between a signal and
//!    a noise-augmented copy of itself.
//!
//! [`tensor`] provides the minimal reverse-mode autodiff substrate the net
//! is built on; [`report`] computes evaluation metrics and CSV reports.

pub mod dict;
pub mod error;
pub mod net;
pub mod report;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod tta;

pub use error::{Error, Result};
