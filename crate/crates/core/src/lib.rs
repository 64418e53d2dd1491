//! Time-domain speech enhancement losses and the harness around them.
//!
//! The crate provides:
//!
//! - five loss functions over waveform pairs (time-domain MSE, short-time
//!   spectral amplitude MSE, STOI, ESTOI, SI-SDR) with analytic gradients
//!   with respect to the enhanced signal, plus a finite-difference checker;
//! - the matching forward-only metrics;
//! - the data pipeline used to build noisy/clean training corpora: WAV I/O,
//!   energy VAD, active-level SNR mixing, and speech-shaped/babble noise
//!   synthesis;
//! - a small fully convolutional encoder/decoder enhancement model with
//!   hand-written forward/backward passes;
//! - Adam training with a plateau learning-rate schedule, early stopping,
//!   and a learning-rate sweep harness;
//! - batch evaluation reports and time-shift/polarity diagnostics.

pub mod cli;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod evalreport;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod perceptual;
pub mod train;

pub use error::{Error, Result};
