//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("signal too short: {got} samples, need at least {need}")]
    SignalTooShort { got: usize, need: usize },
    #[error("length mismatch: {left} vs {right} samples")]
    LengthMismatch { left: usize, right: usize },
    #[error("sample rate mismatch or unsupported rate: {got} Hz, expected {expected} Hz")]
    SampleRate { got: u32, expected: u32 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("one-third octave band {band} maps to no DFT bin")]
    EmptyBand { band: usize },
    #[error("band {band} upper edge {edge_hz:.1} Hz exceeds Nyquist {nyquist_hz:.1} Hz")]
    NyquistExceeded { band: usize, edge_hz: f64, nyquist_hz: f64 },
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("reference signal is identically zero")]
    ZeroReference,
    #[error("signal is identically zero")]
    ZeroSignal,
    #[error("noise signal has zero energy")]
    ZeroNoise,
    #[error("corpus has {got} utterances, need at least {need}")]
    CorpusTooSmall { got: usize, need: usize },
    #[error("LPC analysis produced an unstable all-pole filter (|reflection| >= 1)")]
    UnstableFilter,
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error("loss kind {0} is not implemented")]
    Unimplemented(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stale forward cache: {0}")]
    StaleCache(String),
    #[error("malformed manifest or index: {0}")]
    Manifest(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
