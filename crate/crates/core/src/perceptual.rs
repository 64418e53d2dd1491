//! One-third octave band analysis, short-time temporal envelopes, and the
//! energy VAD used to prepare training data.

use crate::dsp::AmplitudeSpectrogram;
use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Mapping from one-third octave bands to single-sided DFT bin ranges.
///
/// Bin indices are 0-based and inclusive; a bin belongs to band `j` when its
/// center frequency `k * fs / K` lies in `[cf(j) * 2^(-1/6), cf(j) * 2^(1/6))`
/// (half-open, so adjacent bands never share a bin).
#[derive(Debug, Clone)]
pub struct OctaveBandMap {
    pub edges: Vec<(usize, usize)>,
    pub center_freqs: Vec<f64>,
    /// Single-sided bin count K/2+1 this map was built for.
    pub bin_count: usize,
}

impl OctaveBandMap {
    pub fn band_count(&self) -> usize {
        self.edges.len()
    }
}

/// Compute the one-third octave band edge table.
///
/// Center frequencies are `f_start * 2^((j-1)/3)`; with the defaults
/// (fs=10 kHz, K=256, J=15, f_start=150 Hz) the last band sits near 3.8 kHz.
pub fn third_octave_band_edges(
    sample_rate: u32,
    dft_size: usize,
    band_count: usize,
    f_start: f64,
) -> Result<OctaveBandMap> {
    if band_count == 0 || dft_size == 0 || dft_size % 2 != 0 || f_start <= 0.0 {
        return Err(Error::InvalidConfig(
            "need band_count >= 1, even positive K, positive f_start".into(),
        ));
    }
    let fs = sample_rate as f64;
    let bins = dft_size / 2 + 1;
    let bin_hz = fs / dft_size as f64;

    let mut edges = Vec::with_capacity(band_count);
    let mut center_freqs = Vec::with_capacity(band_count);
    for j in 0..band_count {
        let cf = f_start * 2f64.powf(j as f64 / 3.0);
        let lo = cf * 2f64.powf(-1.0 / 6.0);
        let hi = cf * 2f64.powf(1.0 / 6.0);
        if hi > fs / 2.0 {
            return Err(Error::NyquistExceeded { band: j + 1, edge_hz: hi, nyquist_hz: fs / 2.0 });
        }
        // first and last bin whose center lies in [lo, hi)
        let k1 = (0..bins).find(|&k| {
            let f = k as f64 * bin_hz;
            f >= lo && f < hi
        });
        let k2 = (0..bins).rev().find(|&k| {
            let f = k as f64 * bin_hz;
            f >= lo && f < hi
        });
        match (k1, k2) {
            (Some(a), Some(b)) if a <= b => {
                edges.push((a, b));
                center_freqs.push(cf);
            }
            _ => return Err(Error::EmptyBand { band: j + 1 }),
        }
    }
    Ok(OctaveBandMap { edges, center_freqs, bin_count: bins })
}

/// Short-time one-third octave band envelopes, J rows by M frames.
#[derive(Debug, Clone)]
pub struct EnvelopeMatrix {
    values: Vec<f64>,
    band_count: usize,
    frame_count: usize,
    /// Temporal segment length N used by STOI/ESTOI (30 frames at 10 kHz).
    pub segment_len: usize,
}

/// Segment length N common to STOI and ESTOI (~384 ms at 10 kHz, I=128).
pub const SEGMENT_LEN: usize = 30;

impl EnvelopeMatrix {
    pub fn band_count(&self) -> usize {
        self.band_count
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    #[inline]
    pub fn at(&self, band: usize, frame: usize) -> f64 {
        self.values[band * self.frame_count + frame]
    }

    pub fn row(&self, band: usize) -> &[f64] {
        &self.values[band * self.frame_count..(band + 1) * self.frame_count]
    }
}

/// Band envelopes `a_j(m) = sqrt(sum over the band's bins of a(k,m)^2)`.
pub fn band_envelope(spec: &AmplitudeSpectrogram, bands: &OctaveBandMap) -> Result<EnvelopeMatrix> {
    if spec.bin_count() != bands.bin_count {
        return Err(Error::DimensionMismatch(format!(
            "spectrogram has {} bins, band map expects {}",
            spec.bin_count(),
            bands.bin_count
        )));
    }
    let frames = spec.frame_count();
    let j_count = bands.band_count();
    let mut values = vec![0.0; j_count * frames];
    for (j, &(k1, k2)) in bands.edges.iter().enumerate() {
        for m in 0..frames {
            let mut acc = 0.0;
            for k in k1..=k2 {
                let a = spec.at(k, m);
                acc += a * a;
            }
            values[j * frames + m] = acc.sqrt();
        }
    }
    Ok(EnvelopeMatrix { values, band_count: j_count, frame_count: frames, segment_len: SEGMENT_LEN })
}

/// Adjoint of [`band_envelope`]: scatter envelope gradients back onto the
/// magnitude grid. Zero envelopes use the zero subgradient.
pub fn band_envelope_adjoint(
    spec: &AmplitudeSpectrogram,
    bands: &OctaveBandMap,
    env: &EnvelopeMatrix,
    grad_env: &[f64],
) -> Vec<f64> {
    let frames = spec.frame_count();
    let bins = spec.bin_count();
    assert_eq!(grad_env.len(), env.band_count() * frames);
    let mut grad_mag = vec![0.0; bins * frames];
    for (j, &(k1, k2)) in bands.edges.iter().enumerate() {
        for m in 0..frames {
            let g = grad_env[j * frames + m];
            if g == 0.0 {
                continue;
            }
            let e = env.at(j, m);
            if e == 0.0 {
                continue;
            }
            for k in k1..=k2 {
                grad_mag[m * bins + k] += g * spec.at(k, m) / e;
            }
        }
    }
    grad_mag
}

/// The N-frame envelope slice ending at 1-based frame `m`:
/// `[a_j(m-N+1), ..., a_j(m)]`.
pub fn envelope_segment(env: &EnvelopeMatrix, band: usize, m: usize) -> Result<Vec<f64>> {
    let n = env.segment_len;
    if band >= env.band_count() {
        return Err(Error::OutOfRange(format!("band {band} of {}", env.band_count())));
    }
    if m < n || m > env.frame_count() {
        return Err(Error::OutOfRange(format!(
            "segment ending at frame {m} needs {n} <= m <= {}",
            env.frame_count()
        )));
    }
    Ok(env.row(band)[m - n..m].to_vec())
}

/// Result of [`stoi_vad_trim`]: the surviving samples plus the per-frame
/// keep mask, so the identical trim can be applied to a paired signal.
#[derive(Debug, Clone)]
pub struct VadTrim {
    pub trimmed: Waveform,
    pub kept: Vec<bool>,
    pub frame_len: usize,
}

impl VadTrim {
    /// Apply this mask to another signal of the same length and rate
    /// (noisy partner trimmed by the clean signal's mask).
    pub fn apply(&self, other: &Waveform) -> Result<Waveform> {
        let needed = self.kept.len() * self.frame_len;
        if other.len() < needed {
            return Err(Error::LengthMismatch { left: other.len(), right: needed });
        }
        let mut samples = Vec::with_capacity(needed);
        for (i, &keep) in self.kept.iter().enumerate() {
            if keep {
                samples.extend_from_slice(&other.samples[i * self.frame_len..(i + 1) * self.frame_len]);
            }
        }
        Ok(Waveform::new(samples, other.sample_rate))
    }
}

/// Energy VAD: drop every non-overlapping frame whose energy is more than
/// `threshold_db` below the loudest frame. The loudest frame is always kept.
/// The trailing partial frame is dropped.
pub fn stoi_vad_trim(x: &Waveform, frame_ms: f64, threshold_db: f64) -> Result<VadTrim> {
    if x.is_empty() {
        return Err(Error::SignalTooShort { got: 0, need: 1 });
    }
    let frame_len = ((frame_ms * x.sample_rate as f64 / 1000.0).round() as usize).max(1);
    let n_frames = x.len() / frame_len;
    if n_frames == 0 {
        return Err(Error::SignalTooShort { got: x.len(), need: frame_len });
    }
    const LOG_FLOOR: f64 = 1e-300;
    let energies: Vec<f64> = (0..n_frames)
        .map(|i| x.samples[i * frame_len..(i + 1) * frame_len].iter().map(|s| s * s).sum())
        .collect();
    let max_db = 10.0 * energies.iter().cloned().fold(0.0f64, f64::max).max(LOG_FLOOR).log10();
    let kept: Vec<bool> = energies
        .iter()
        .map(|&e| 10.0 * e.max(LOG_FLOOR).log10() >= max_db - threshold_db)
        .collect();
    let mut samples = Vec::new();
    for (i, &keep) in kept.iter().enumerate() {
        if keep {
            samples.extend_from_slice(&x.samples[i * frame_len..(i + 1) * frame_len]);
        }
    }
    Ok(VadTrim { trimmed: Waveform::new(samples, x.sample_rate), kept, frame_len })
}
