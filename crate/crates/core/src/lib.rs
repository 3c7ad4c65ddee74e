//! Audio-visual speech recognition with cross-modal attention.
//!
//! The crate contains everything needed to train and inspect small
//! audio-visual sequence-to-sequence recognisers on a CPU:
//!
//! * [`autodiff`]: a tape-based reverse-mode differentiation engine over dense
//!   [`tensor::Tensor`]s, with [`gradcheck`] for finite-difference checks;
//! * [`audio`] and [`visual`]: log-mel audio features with SNR-controlled noise
//!   mixing, and a residual CNN for 36×36 lip images;
//! * [`corpus`]: a deterministic synthetic audio-visual corpus with known
//!   cross-modal lags, acoustically confusable symbol pairs and Action Unit
//!   targets;
//! * [`model`]: the AV Align network (audio-side cross-modal attention with
//!   several fusion variants and an Action Unit auxiliary loss), the AV Cat
//!   dual-attention decoder and an audio-only baseline;
//! * [`train`]: Adam, gradient clipping and staged-SNR curricula;
//! * [`analysis`]: error rates, alignment diagnostics, control experiments,
//!   modality-lag estimation and per-sentence error analysis.

pub mod analysis;
pub mod audio;
pub mod autodiff;
pub mod cli;
pub mod container;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
pub use tensor::Tensor;
