//! Framing, windowing, and single-sided STFT amplitude analysis.
//!
//! All spectral metrics and losses are built on the same analysis: frames of
//! `K` samples taken every `I` samples (trailing partial frames dropped), a
//! per-frame window, a K-point DFT, and the magnitudes of bins `0..=K/2`.
//! The adjoint of that chain lives here too, so each loss only has to supply
//! the gradient with respect to the magnitude matrix.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// A mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Root mean square over all samples.
    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let e: f64 = self.samples.iter().map(|s| s * s).sum();
        (e / self.samples.len() as f64).sqrt()
    }
}

/// Analysis window applied to each frame before the DFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Rectangular,
    /// Periodic Hann, `0.5 * (1 - cos(2*pi*n/K))`.
    Hann,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; len],
            Window::Hann => (0..len)
                .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()))
                .collect(),
        }
    }
}

/// STFT analysis configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    /// DFT size `K`; frames are K samples long (no zero padding).
    pub dft_size: usize,
    /// Hop `I` between consecutive frames.
    pub hop: usize,
    pub window: Window,
}

impl StftConfig {
    /// The configuration all spectral losses default to: K=256, I=128, Hann.
    pub fn k256() -> Self {
        Self { dft_size: 256, hop: 128, window: Window::Hann }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dft_size == 0 || self.hop == 0 {
            return Err(Error::InvalidConfig("K and I must be positive".into()));
        }
        if self.hop > self.dft_size {
            return Err(Error::InvalidConfig(format!(
                "hop {} exceeds DFT size {}",
                self.hop, self.dft_size
            )));
        }
        if self.dft_size % 2 != 0 {
            return Err(Error::InvalidConfig(format!("K={} must be even", self.dft_size)));
        }
        Ok(())
    }

    /// Number of single-sided bins, K/2+1.
    pub fn bin_count(&self) -> usize {
        self.dft_size / 2 + 1
    }

    /// Frame count for a signal of `len` samples, trailing partials dropped.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.dft_size {
            0
        } else {
            (len - self.dft_size) / self.hop + 1
        }
    }
}

/// Single-sided STFT magnitudes, stored column-major by frame:
/// `magnitudes[frame * bin_count + bin]`.
#[derive(Debug, Clone)]
pub struct AmplitudeSpectrogram {
    magnitudes: Vec<f64>,
    bin_count: usize,
    frame_count: usize,
    pub config: StftConfig,
}

impl AmplitudeSpectrogram {
    pub fn bin_count(&self) -> usize {
        self.bin_count
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    /// Magnitude at 0-based bin `k` and frame `m`.
    #[inline]
    pub fn at(&self, k: usize, m: usize) -> f64 {
        self.magnitudes[m * self.bin_count + k]
    }

    pub fn frame(&self, m: usize) -> &[f64] {
        &self.magnitudes[m * self.bin_count..(m + 1) * self.bin_count]
    }
}

/// Slice a signal into `frame_len`-sample frames every `hop` samples.
///
/// Frame `m` (0-based) covers samples `m*hop .. m*hop+frame_len`; trailing
/// partial frames are dropped. Sample values are copied unmodified.
pub fn frame_signal(x: &Waveform, frame_len: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if frame_len == 0 || hop == 0 {
        return Err(Error::InvalidConfig("frame_len and hop must be positive".into()));
    }
    let len = x.len();
    if len < frame_len {
        return Err(Error::SignalTooShort { got: len, need: frame_len });
    }
    let m = (len - frame_len) / hop + 1;
    Ok((0..m)
        .map(|i| x.samples[i * hop..i * hop + frame_len].to_vec())
        .collect())
}

/// Per-frame complex spectra kept around so the magnitude adjoint can be
/// evaluated without a second forward pass.
pub struct StftCache {
    /// Full K-point spectrum per frame.
    spectra: Vec<Vec<Complex64>>,
    window: Vec<f64>,
    pub config: StftConfig,
    pub signal_len: usize,
}

/// Single-sided STFT amplitude analysis.
pub fn stft_amplitude(x: &Waveform, cfg: &StftConfig) -> Result<AmplitudeSpectrogram> {
    stft_amplitude_with_cache(x, cfg).map(|(spec, _)| spec)
}

/// As [`stft_amplitude`] but also returns the complex spectra needed by
/// [`stft_magnitude_adjoint`].
pub fn stft_amplitude_with_cache(
    x: &Waveform,
    cfg: &StftConfig,
) -> Result<(AmplitudeSpectrogram, StftCache)> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::SignalTooShort { got: 0, need: cfg.dft_size });
    }
    let k = cfg.dft_size;
    let frames = frame_signal(x, k, cfg.hop)?;
    let window = cfg.window.coefficients(k);
    let bins = cfg.bin_count();

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(k);

    let mut magnitudes = Vec::with_capacity(bins * frames.len());
    let mut spectra = Vec::with_capacity(frames.len());
    let mut buf = vec![Complex64::default(); k];
    for frame in &frames {
        for (n, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(frame[n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        magnitudes.extend(buf[..bins].iter().map(|c| c.norm()));
        spectra.push(buf.clone());
    }

    let frame_count = frames.len();
    Ok((
        AmplitudeSpectrogram { magnitudes, bin_count: bins, frame_count, config: *cfg },
        StftCache { spectra, window, config: *cfg, signal_len: x.len() },
    ))
}

/// Adjoint of the frame -> window -> DFT -> magnitude chain.
///
/// `grad_mag[m * bins + k]` is the loss gradient with respect to magnitude
/// bin `k` of frame `m`; the result is the gradient with respect to the
/// input samples (per-frame adjoints overlap-added at each frame offset).
/// Bins with exactly zero magnitude use the zero subgradient.
pub fn stft_magnitude_adjoint(cache: &StftCache, grad_mag: &[f64]) -> Vec<f64> {
    let k = cache.config.dft_size;
    let bins = cache.config.bin_count();
    let hop = cache.config.hop;
    assert_eq!(grad_mag.len(), bins * cache.spectra.len(), "gradient/spectrogram shape mismatch");

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(k);

    let mut grad_x = vec![0.0; cache.signal_len];
    let mut coef = vec![Complex64::default(); k];
    for (m, spectrum) in cache.spectra.iter().enumerate() {
        // d|X_k|/dx_n = w_n * Re(X_k * e^{+i 2 pi k n / K}) / |X_k|, so the
        // per-frame gradient is the real part of an unnormalized inverse DFT
        // of g_k * X_k / |X_k| over the single-sided bins only.
        for c in coef.iter_mut() {
            *c = Complex64::default();
        }
        let mut any = false;
        for bin in 0..bins {
            let g = grad_mag[m * bins + bin];
            if g == 0.0 {
                continue;
            }
            let mag = spectrum[bin].norm();
            if mag == 0.0 {
                continue; // subgradient 0 at magnitude zero
            }
            coef[bin] = spectrum[bin] * (g / mag);
            any = true;
        }
        if !any {
            continue;
        }
        ifft.process(&mut coef);
        let base = m * hop;
        for n in 0..k {
            grad_x[base + n] += cache.window[n] * coef[n].re;
        }
    }
    grad_x
}
