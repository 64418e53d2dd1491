//! Audio I/O and dataset construction: WAV read/write, active-speech-level
//! SNR mixing, synthetic noise (speech-shaped and babble), and
//! manifest-driven clean/noisy pair generation.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::perceptual::stoi_vad_trim;

/// VAD settings shared by dataset preparation and level estimation.
pub const VAD_FRAME_MS: f64 = 25.0;
pub const VAD_THRESHOLD_DB: f64 = 40.0;

// ---------------------------------------------------------------------------
// WAV I/O (RIFF, mono, 16-bit linear PCM, little-endian)
// ---------------------------------------------------------------------------

const PCM_SCALE: f64 = 32768.0;

/// Read a mono 16-bit PCM WAV file. Samples map to [-1, 1) via 1/32768.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::UnsupportedFormat("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::UnsupportedFormat("truncated fmt chunk".into()));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1); // chunks are word-aligned
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::UnsupportedFormat("missing fmt chunk".into()))?;
    if format != 1 {
        return Err(Error::UnsupportedFormat(format!("audio format {format}, want PCM (1)")));
    }
    if channels != 1 {
        return Err(Error::UnsupportedFormat(format!("{channels} channels, want mono")));
    }
    if bits != 16 {
        return Err(Error::UnsupportedFormat(format!("{bits}-bit samples, want 16")));
    }
    let data = data.ok_or_else(|| Error::UnsupportedFormat("missing data chunk".into()))?;
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / PCM_SCALE)
        .collect();
    Ok(Waveform::new(samples, rate))
}

/// Write a mono 16-bit PCM WAV file. Samples are quantized by
/// `round(x * 32768)` and clamped to the i16 range.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    fs::write(path, encode_wav(w))?;
    Ok(())
}

pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = (w.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

// ---------------------------------------------------------------------------
// Levels and mixing
// ---------------------------------------------------------------------------

/// Linear RMS level over speech-active frames (25 ms / 40 dB energy VAD),
/// an approximation of the ITU P.56 active speech level.
pub fn active_level(x: &Waveform) -> Result<f64> {
    if x.samples.iter().all(|&s| s == 0.0) {
        return Err(Error::ZeroSignal);
    }
    let trim = stoi_vad_trim(x, VAD_FRAME_MS, VAD_THRESHOLD_DB)?;
    Ok(trim.trimmed.rms())
}

/// Scale the noise so that the active-level to noise-RMS ratio hits
/// `snr_db`, then add: `y = x + g v`. Returns the mixture and the gain.
pub fn mix_at_snr(x: &Waveform, v: &Waveform, snr_db: f64) -> Result<(Waveform, f64)> {
    if x.len() != v.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: v.len() });
    }
    let noise_rms = v.rms();
    if noise_rms == 0.0 {
        return Err(Error::ZeroNoise);
    }
    let level = active_level(x)?;
    let gain = level / (noise_rms * 10f64.powf(snr_db / 20.0));
    let samples = x.samples.iter().zip(&v.samples).map(|(a, b)| a + gain * b).collect();

    let achieved = 20.0 * (level / (gain * noise_rms)).log10();
    debug_assert!((achieved - snr_db).abs() < 1e-9, "SNR self-check: {achieved} vs {snr_db}");
    Ok((Waveform::new(samples, x.sample_rate), gain))
}

/// Recompute the SNR a stored gain achieves for a clean/noise pair.
pub fn achieved_snr_db(clean: &Waveform, noise: &Waveform, gain: f64) -> Result<f64> {
    let level = active_level(clean)?;
    let noise_rms = noise.rms();
    if noise_rms == 0.0 || gain == 0.0 {
        return Err(Error::ZeroNoise);
    }
    Ok(20.0 * (level / (gain * noise_rms)).log10())
}

// ---------------------------------------------------------------------------
// Noise synthesis
// ---------------------------------------------------------------------------

/// Levinson-Durbin solve of the autocorrelation normal equations.
/// Returns predictor coefficients `c` such that the synthesis filter is
/// `y[n] = x[n] + sum_j c[j] * y[n-1-j]`.
pub fn levinson_durbin(r: &[f64], order: usize) -> Result<Vec<f64>> {
    if r.len() < order + 1 {
        return Err(Error::InvalidConfig("autocorrelation shorter than order".into()));
    }
    if r[0] <= 0.0 {
        return Err(Error::ZeroSignal);
    }
    let mut c = vec![0.0f64; order];
    let mut err = r[0];
    for i in 1..=order {
        let mut acc = r[i];
        for j in 1..i {
            acc -= c[j - 1] * r[i - j];
        }
        let k = acc / err;
        if !(k.abs() < 1.0) {
            return Err(Error::UnstableFilter);
        }
        let prev = c.clone();
        c[i - 1] = k;
        for j in 1..i {
            c[j - 1] = prev[j - 1] - k * prev[i - j - 1];
        }
        err *= 1.0 - k * k;
    }
    Ok(c)
}

fn autocorrelation(s: &[f64], max_lag: usize) -> Vec<f64> {
    (0..=max_lag)
        .map(|lag| s.iter().zip(&s[lag..]).map(|(a, b)| a * b).sum())
        .collect()
}

fn normalize_rms(samples: &mut [f64]) -> Result<()> {
    let e: f64 = samples.iter().map(|s| s * s).sum();
    if e == 0.0 {
        return Err(Error::ZeroSignal);
    }
    let rms = (e / samples.len() as f64).sqrt();
    for s in samples.iter_mut() {
        *s /= rms;
    }
    Ok(())
}

fn gaussian_noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    // Box-Muller on the seeded uniform stream
    let mut out = Vec::with_capacity(len + 1);
    while out.len() < len {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        out.push(r * t.cos());
        out.push(r * t.sin());
    }
    out.truncate(len);
    out
}

/// Speech-shaped noise: white Gaussian noise spectrally shaped by an
/// all-pole filter fit to the concatenated corpus (autocorrelation method).
/// Output is unit-RMS. `lpc_order = 0` degenerates to white noise.
pub fn gen_ssn(
    speech_corpus: &[Waveform],
    lpc_order: usize,
    length: usize,
    seed: u64,
) -> Result<Waveform> {
    if speech_corpus.is_empty() {
        return Err(Error::CorpusTooSmall { got: 0, need: 1 });
    }
    let rate = speech_corpus[0].sample_rate;
    let concat: Vec<f64> =
        speech_corpus.iter().flat_map(|w| w.samples.iter().copied()).collect();

    let coeffs = if lpc_order == 0 {
        Vec::new()
    } else {
        let r = autocorrelation(&concat, lpc_order);
        levinson_durbin(&r, lpc_order)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warmup = 8 * (lpc_order + 1);
    let white = gaussian_noise(&mut rng, length + warmup);
    let mut shaped = vec![0.0f64; length + warmup];
    for n in 0..shaped.len() {
        let mut acc = white[n];
        for (j, &cj) in coeffs.iter().enumerate() {
            if n > j {
                acc += cj * shaped[n - 1 - j];
            }
        }
        shaped[n] = acc;
    }
    let mut samples = shaped[warmup..].to_vec();
    normalize_rms(&mut samples)?;
    Ok(Waveform::new(samples, rate))
}

/// 6-speaker-style babble: `n_speakers` concurrent streams, each a seeded
/// random concatenation of corpus utterances. Stream `s` draws indices from
/// `ChaCha8(seed + s)`; each stream is RMS-normalized before summation and
/// the sum is normalized to unit RMS.
pub fn gen_babble(
    speech_corpus: &[Waveform],
    n_speakers: usize,
    length: usize,
    seed: u64,
) -> Result<Waveform> {
    if speech_corpus.len() < n_speakers {
        return Err(Error::CorpusTooSmall { got: speech_corpus.len(), need: n_speakers });
    }
    if n_speakers == 0 {
        return Err(Error::InvalidConfig("need at least one speaker".into()));
    }
    let rate = speech_corpus[0].sample_rate;
    let mut mix = vec![0.0f64; length];
    for s in 0..n_speakers {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64));
        let mut stream = Vec::with_capacity(length);
        while stream.len() < length {
            let idx = rng.gen_range(0..speech_corpus.len());
            stream.extend_from_slice(&speech_corpus[idx].samples);
        }
        stream.truncate(length);
        normalize_rms(&mut stream)?;
        for (m, v) in mix.iter_mut().zip(&stream) {
            *m += v;
        }
    }
    normalize_rms(&mut mix)?;
    Ok(Waveform::new(mix, rate))
}

// ---------------------------------------------------------------------------
// Manifest-driven dataset construction
// ---------------------------------------------------------------------------

/// Where an item's noise comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource {
    /// A noise recording; a seeded random start offset wraps circularly.
    File(PathBuf),
    /// Speech-shaped noise synthesized from a corpus directory or file.
    Ssn { corpus: PathBuf, lpc_order: usize },
    /// Babble synthesized from a corpus directory or file.
    Babble { corpus: PathBuf, n_speakers: usize },
}

pub const DEFAULT_LPC_ORDER: usize = 12;
pub const DEFAULT_BABBLE_SPEAKERS: usize = 6;

impl NoiseSource {
    /// Manifest syntax: `ssn:PATH`, `babble:PATH`, or a plain WAV path.
    pub fn parse(s: &str) -> Self {
        if let Some(rest) = s.strip_prefix("ssn:") {
            NoiseSource::Ssn { corpus: rest.into(), lpc_order: DEFAULT_LPC_ORDER }
        } else if let Some(rest) = s.strip_prefix("babble:") {
            NoiseSource::Babble { corpus: rest.into(), n_speakers: DEFAULT_BABBLE_SPEAKERS }
        } else {
            NoiseSource::File(s.into())
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            NoiseSource::File(_) => "file",
            NoiseSource::Ssn { .. } => "ssn",
            NoiseSource::Babble { .. } => "babble",
        }
    }
}

/// One dataset item to build.
#[derive(Debug, Clone)]
pub struct MixSpec {
    pub clean_path: PathBuf,
    pub noise: NoiseSource,
    pub snr_db: f64,
    pub seed: u64,
    /// Trim silence from the clean signal (training/validation sets).
    pub apply_vad: bool,
    pub target_rate: u32,
    /// Truncate or zero-pad (at the tail) to this many samples.
    pub target_len: usize,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    clean_path: String,
    noise: String,
    snr_db: f64,
    seed: u64,
    #[serde(default)]
    apply_vad: bool,
    target_len: usize,
    #[serde(default = "default_rate")]
    target_rate: u32,
}

fn default_rate() -> u32 {
    10_000
}

/// Read a mixing manifest CSV with header
/// `clean_path,noise,snr_db,seed,apply_vad,target_len[,target_rate]`.
pub fn read_manifest(path: &Path) -> Result<Vec<MixSpec>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut specs = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(csv_err)?;
        if !row.snr_db.is_finite() {
            return Err(Error::Manifest(format!("non-finite SNR for {}", row.clean_path)));
        }
        if row.target_len == 0 {
            return Err(Error::Manifest(format!("zero target_len for {}", row.clean_path)));
        }
        specs.push(MixSpec {
            clean_path: row.clean_path.into(),
            noise: NoiseSource::parse(&row.noise),
            snr_db: row.snr_db,
            seed: row.seed,
            apply_vad: row.apply_vad,
            target_rate: row.target_rate,
            target_len: row.target_len,
        });
    }
    Ok(specs)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Manifest(e.to_string())
}

/// One row of the dataset index CSV:
/// `id,clean_path,noisy_path,snr_db,noise_kind,seed,gain`.
/// Failed items keep their id with empty `noisy_path` and `gain`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexRow {
    pub id: String,
    pub clean_path: String,
    pub noisy_path: String,
    pub snr_db: f64,
    pub noise_kind: String,
    pub seed: u64,
    pub gain: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub rows: Vec<IndexRow>,
    /// Per-item error messages for failed rows, by id.
    pub errors: Vec<(String, String)>,
}

impl DatasetIndex {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<DatasetIndex> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut rows = Vec::new();
        for row in r.deserialize::<IndexRow>() {
            rows.push(row.map_err(csv_err)?);
        }
        Ok(DatasetIndex { rows, errors: Vec::new() })
    }
}

/// Load all WAVs beneath `path` (a file, or a directory scanned for
/// `*.wav` in name order).
pub fn load_corpus(path: &Path) -> Result<Vec<Waveform>> {
    if path.is_file() {
        return Ok(vec![load_wav(path)?]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "wav").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::CorpusTooSmall { got: 0, need: 1 });
    }
    files.iter().map(|p| load_wav(p)).collect()
}

fn pad_or_truncate(mut samples: Vec<f64>, target_len: usize) -> Vec<f64> {
    samples.truncate(target_len);
    samples.resize(target_len, 0.0); // padding goes at the tail
    samples
}

fn realize_noise(spec: &MixSpec) -> Result<Waveform> {
    match &spec.noise {
        NoiseSource::File(path) => {
            let noise = load_wav(path)?;
            if noise.sample_rate != spec.target_rate {
                return Err(Error::SampleRate {
                    got: noise.sample_rate,
                    expected: spec.target_rate,
                });
            }
            if noise.is_empty() {
                return Err(Error::ZeroNoise);
            }
            // unique seeded offset per item, wrapping circularly
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let start = rng.gen_range(0..noise.len());
            let samples = (0..spec.target_len)
                .map(|i| noise.samples[(start + i) % noise.len()])
                .collect();
            Ok(Waveform::new(samples, spec.target_rate))
        }
        NoiseSource::Ssn { corpus, lpc_order } => {
            let corpus = load_corpus(corpus)?;
            check_corpus_rate(&corpus, spec.target_rate)?;
            gen_ssn(&corpus, *lpc_order, spec.target_len, spec.seed)
        }
        NoiseSource::Babble { corpus, n_speakers } => {
            let corpus = load_corpus(corpus)?;
            check_corpus_rate(&corpus, spec.target_rate)?;
            gen_babble(&corpus, *n_speakers, spec.target_len, spec.seed)
        }
    }
}

fn check_corpus_rate(corpus: &[Waveform], rate: u32) -> Result<()> {
    for w in corpus {
        if w.sample_rate != rate {
            return Err(Error::SampleRate { got: w.sample_rate, expected: rate });
        }
    }
    Ok(())
}

fn build_item(spec: &MixSpec, id: &str, out_dir: &Path) -> Result<IndexRow> {
    let clean_raw = load_wav(&spec.clean_path)?;
    if clean_raw.sample_rate != spec.target_rate {
        return Err(Error::SampleRate { got: clean_raw.sample_rate, expected: spec.target_rate });
    }
    let clean_samples = if spec.apply_vad {
        stoi_vad_trim(&clean_raw, VAD_FRAME_MS, VAD_THRESHOLD_DB)?.trimmed.samples
    } else {
        clean_raw.samples
    };
    let clean = Waveform::new(pad_or_truncate(clean_samples, spec.target_len), spec.target_rate);

    let noise = realize_noise(spec)?;
    let (noisy, gain) = mix_at_snr(&clean, &noise, spec.snr_db)?;

    let clean_path = out_dir.join(format!("{id}_clean.wav"));
    let noisy_path = out_dir.join(format!("{id}_noisy.wav"));
    write_wav(&clean_path, &clean)?;
    write_wav(&noisy_path, &noisy)?;
    Ok(IndexRow {
        id: id.to_string(),
        clean_path: clean_path.to_string_lossy().into_owned(),
        noisy_path: noisy_path.to_string_lossy().into_owned(),
        snr_db: spec.snr_db,
        noise_kind: spec.noise.kind_name().to_string(),
        seed: spec.seed,
        gain: Some(gain),
    })
}

/// Build every manifest item (in parallel), write the clean/noisy WAV pairs
/// and `index.csv` under `out_dir`, and return the index. Per-item failures
/// are recorded and do not stop the build.
pub fn build_dataset(specs: &[MixSpec], out_dir: &Path) -> Result<DatasetIndex> {
    fs::create_dir_all(out_dir)?;
    let results: Vec<(String, std::result::Result<IndexRow, String>)> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let id = format!("item_{i:05}");
            let row = build_item(spec, &id, out_dir).map_err(|e| e.to_string());
            (id, row)
        })
        .collect();

    let mut rows = Vec::with_capacity(specs.len());
    let mut errors = Vec::new();
    for ((id, result), spec) in results.into_iter().zip(specs) {
        match result {
            Ok(row) => rows.push(row),
            Err(msg) => {
                rows.push(IndexRow {
                    id: id.clone(),
                    clean_path: spec.clean_path.to_string_lossy().into_owned(),
                    noisy_path: String::new(),
                    snr_db: spec.snr_db,
                    noise_kind: spec.noise.kind_name().to_string(),
                    seed: spec.seed,
                    gain: None,
                });
                errors.push((id, msg));
            }
        }
    }
    let index = DatasetIndex { rows, errors };
    index.write(&out_dir.join("index.csv"))?;
    Ok(index)
}

// ---------------------------------------------------------------------------
// Synthetic speech-like fixture
// ---------------------------------------------------------------------------

/// Deterministic speech-like test signal: a pitch-modulated harmonic series
/// with formant weighting, syllabic amplitude bursts, and a low broadband
/// noise floor. Unit peak is about 0.7; no region is digitally silent.
pub fn synth_speech_like(seconds: f64, sample_rate: u32, seed: u64) -> Waveform {
    let fs = sample_rate as f64;
    let len = (seconds * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let f0_base: f64 = rng.gen_range(100.0..140.0);
    let syllable_hz = 3.4;
    let syllable_len = (fs / syllable_hz) as usize;
    let n_syllables = len / syllable_len + 2;
    // per-syllable loudness; occasional weak syllables act as pauses
    let amps: Vec<f64> = (0..n_syllables)
        .map(|_| if rng.gen_bool(0.2) { rng.gen_range(0.02..0.08) } else { rng.gen_range(0.5..1.0) })
        .collect();

    let formants = [(500.0, 180.0), (1500.0, 280.0), (2500.0, 380.0)];
    let formant_gain = |f: f64| -> f64 {
        let mut g = 0.06;
        for &(fc, bw) in &formants {
            let d = (f - fc) / bw;
            g += 1.0 / (1.0 + d * d);
        }
        g
    };

    let n_harmonics = (4200.0 / f0_base).floor() as usize;
    let phases: Vec<f64> =
        (0..n_harmonics).map(|_| rng.gen_range(0.0..2.0 * std::f64::consts::PI)).collect();
    let gains: Vec<f64> = (1..=n_harmonics)
        .map(|h| formant_gain(h as f64 * f0_base) / (h as f64).sqrt())
        .collect();

    let mut samples = vec![0.0f64; len];
    let mut phase = 0.0f64;
    for n in 0..len {
        let t = n as f64 / fs;
        let f0 = f0_base * (1.0 + 0.04 * (2.0 * std::f64::consts::PI * 2.1 * t).sin());
        phase += 2.0 * std::f64::consts::PI * f0 / fs;

        let syl = n / syllable_len;
        let pos = (n % syllable_len) as f64 / syllable_len as f64;
        let env = amps[syl] * 0.5 * (1.0 - (2.0 * std::f64::consts::PI * pos).cos());

        let mut v = 0.0;
        for h in 0..n_harmonics {
            v += gains[h] * ((h + 1) as f64 * phase + phases[h]).sin();
        }
        // broadband floor keeps every envelope segment non-degenerate
        let noise = rng.gen_range(-1.0..1.0);
        samples[n] = env * (v + 0.05 * noise) + 0.003 * noise;
    }
    let peak = samples.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
    if peak > 0.0 {
        let k = 0.7 / peak;
        for s in samples.iter_mut() {
            *s *= k;
        }
    }
    Waveform::new(samples, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft_amplitude, StftConfig};
    use crate::perceptual::{band_envelope, third_octave_band_edges};

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn noise_wave(len: usize, fs: u32, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-0.9..0.9)).collect(), fs)
    }

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tmpdir();
        let x = noise_wave(2311, 10_000, 3);
        let path = dir.path().join("x.wav");
        write_wav(&path, &x).unwrap();
        let y = load_wav(&path).unwrap();
        assert_eq!(y.sample_rate, 10_000);
        assert_eq!(y.len(), x.len());
        for (a, b) in x.samples.iter().zip(&y.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0, "{a} vs {b}");
        }
    }

    #[test]
    fn wav_fixture_bytes_decode_exactly() {
        // hand-built RIFF: fs=8000, samples [0, 16384, -16384, -32768]
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 8).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&8u32.to_le_bytes());
        for v in [0i16, 16384, -16384, -32768] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let w = decode_wav(&bytes).unwrap();
        assert_eq!(w.sample_rate, 8000);
        assert_eq!(w.samples, vec![0.0, 0.5, -0.5, -1.0]);
    }

    #[test]
    fn wav_rejects_stereo_and_nonpcm() {
        let x = noise_wave(64, 8000, 4);
        let mut bytes = encode_wav(&x);
        bytes[22] = 2; // channel count
        assert!(matches!(decode_wav(&bytes), Err(Error::UnsupportedFormat(_))));

        let mut bytes = encode_wav(&x);
        bytes[20] = 3; // IEEE float format tag
        assert!(matches!(decode_wav(&bytes), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn active_level_of_tone() {
        let fs = 10_000u32;
        let a = 0.4f64;
        let tone = Waveform::new(
            (0..fs as usize)
                .map(|n| a * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / fs as f64).sin())
                .collect(),
            fs,
        );
        let level = active_level(&tone).unwrap();
        let want = a / 2f64.sqrt();
        assert!((level - want).abs() <= 1e-3 * want, "{level} vs {want}");

        // appended digital silence is trimmed away
        let mut padded = tone.samples.clone();
        padded.extend(std::iter::repeat(0.0).take(fs as usize));
        let level2 = active_level(&Waveform::new(padded, fs)).unwrap();
        assert!((level2 - level).abs() <= 1e-6 * level);

        assert!(matches!(
            active_level(&Waveform::new(vec![0.0; 100], fs)),
            Err(Error::ZeroSignal)
        ));
    }

    #[test]
    fn active_level_matches_mask_oracle() {
        let fs = 10_000u32;
        let frame = 250usize;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut samples = Vec::new();
        let pattern = [1.0, 1.0, 1e-3, 1.0, 1e-3, 1e-3, 1.0, 1.0];
        for &amp in &pattern {
            for _ in 0..frame {
                samples.push(amp * rng.gen_range(-1.0f64..1.0));
            }
        }
        let x = Waveform::new(samples.clone(), fs);
        let level = active_level(&x).unwrap();
        // oracle: mask loud frames by hand, then RMS
        let kept: Vec<f64> = pattern
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > 0.5)
            .flat_map(|(i, _)| samples[i * frame..(i + 1) * frame].to_vec())
            .collect();
        let want = (kept.iter().map(|s| s * s).sum::<f64>() / kept.len() as f64).sqrt();
        assert_eq!(level, want);
    }

    #[test]
    fn mixing_gains() {
        let fs = 10_000u32;
        let x = noise_wave(20_000, fs, 5);
        let v = noise_wave(20_000, fs, 6);

        // same pair at 0 dB vs +20 dB: amplitude gain ratio is exactly 10
        let (_, g0) = mix_at_snr(&x, &v, 0.0).unwrap();
        let (_, g20) = mix_at_snr(&x, &v, 20.0).unwrap();
        assert!((g20 / g0 - 0.1).abs() < 1e-12);

        // self-check at -5 dB
        let (y, g) = mix_at_snr(&x, &v, -5.0).unwrap();
        let achieved = achieved_snr_db(&x, &v, g).unwrap();
        assert!((achieved + 5.0).abs() < 1e-9);
        for i in 0..x.len() {
            assert_eq!(y.samples[i], x.samples[i] + g * v.samples[i]);
        }

        // equal active level and RMS at 0 dB gives unit gain: a VAD-flat
        // noise signal has active_level == rms
        let (_, g1) = mix_at_snr(&v, &v, 0.0).unwrap();
        assert!((g1 - 1.0).abs() < 1e-9, "gain {g1}");

        let zeros = Waveform::new(vec![0.0; x.len()], fs);
        assert!(matches!(mix_at_snr(&x, &zeros, 0.0), Err(Error::ZeroNoise)));
    }

    #[test]
    fn ssn_from_white_corpus_is_flat() {
        let fs = 10_000u32;
        let corpus = vec![noise_wave(40_000, fs, 7)];
        let ssn = gen_ssn(&corpus, 12, 40_000, 11).unwrap();
        assert!((ssn.rms() - 1.0).abs() < 1e-9);

        let map = third_octave_band_edges(fs, 256, 15, 150.0).unwrap();
        let spec = stft_amplitude(&ssn, &StftConfig::k256()).unwrap();
        let env = band_envelope(&spec, &map).unwrap();
        // per-bin band power in dB should be flat within +/- 3 dB
        let mut levels = Vec::new();
        for (j, &(k1, k2)) in map.edges.iter().enumerate() {
            let e: f64 = env.row(j).iter().map(|v| v * v).sum::<f64>() / (k2 - k1 + 1) as f64;
            levels.push(10.0 * e.log10());
        }
        let mean = levels.iter().sum::<f64>() / levels.len() as f64;
        for (j, l) in levels.iter().enumerate() {
            assert!((l - mean).abs() <= 3.0, "band {j}: {l} vs mean {mean}");
        }
    }

    #[test]
    fn ssn_from_tone_corpus_peaks_at_tone() {
        let fs = 10_000u32;
        let f = 1000.0;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<f64> = (0..40_000)
            .map(|n| {
                (2.0 * std::f64::consts::PI * f * n as f64 / fs as f64).sin()
                    + 0.1 * rng.gen_range(-1.0..1.0)
            })
            .collect();
        let corpus = vec![Waveform::new(samples, fs)];
        let ssn = gen_ssn(&corpus, 12, 40_000, 12).unwrap();

        let map = third_octave_band_edges(fs, 256, 15, 150.0).unwrap();
        let spec = stft_amplitude(&ssn, &StftConfig::k256()).unwrap();
        let env = band_envelope(&spec, &map).unwrap();
        let mut levels: Vec<f64> = (0..15)
            .map(|j| {
                let (k1, k2) = map.edges[j];
                let e: f64 =
                    env.row(j).iter().map(|v| v * v).sum::<f64>() / (k2 - k1 + 1) as f64;
                10.0 * e.log10()
            })
            .collect();
        // 1 kHz sits in band 9 (0-based index 8)
        let peak = levels[8];
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = levels[7];
        assert!(peak - median >= 10.0, "peak {peak} median {median}");
    }

    #[test]
    fn ssn_order_zero_is_white_passthrough() {
        let corpus = vec![noise_wave(10_000, 10_000, 13)];
        let ssn = gen_ssn(&corpus, 0, 20_000, 14).unwrap();
        // order 0 shapes nothing: output is the normalized seeded noise
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut want = gaussian_noise(&mut rng, 20_000 + 8);
        want.drain(..8);
        normalize_rms(&mut want).unwrap();
        assert_eq!(ssn.samples, want);
    }

    #[test]
    fn ssn_is_wideband_stationary() {
        let fs = 10_000u32;
        let corpus = vec![synth_speech_like(3.0, fs, 4)];
        let ssn = gen_ssn(&corpus, 12, 5 * fs as usize, 15).unwrap();
        let global = 20.0 * ssn.rms().log10();
        for start in (0..4 * fs as usize).step_by(fs as usize / 2) {
            let slice = Waveform::new(ssn.samples[start..start + fs as usize].to_vec(), fs);
            let local = 20.0 * slice.rms().log10();
            assert!((local - global).abs() <= 1.0, "slice at {start}: {local} vs {global}");
        }
    }

    #[test]
    fn babble_streams_follow_seeded_selection() {
        let fs = 10_000u32;
        let corpus: Vec<Waveform> =
            (0..10).map(|i| noise_wave(3000 + 137 * i as usize, fs, 20 + i)).collect();
        let len = 20_000usize;
        let seed = 77u64;
        let babble = gen_babble(&corpus, 6, len, seed).unwrap();
        assert!((babble.rms() - 1.0).abs() < 1e-9);

        // independent reproduction of the documented selection procedure
        let mut mix = vec![0.0f64; len];
        for s in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + s);
            let mut stream = Vec::new();
            while stream.len() < len {
                let idx = rng.gen_range(0..corpus.len());
                stream.extend_from_slice(&corpus[idx].samples);
            }
            stream.truncate(len);
            normalize_rms(&mut stream).unwrap();
            for (m, v) in mix.iter_mut().zip(&stream) {
                *m += v;
            }
        }
        normalize_rms(&mut mix).unwrap();
        assert_eq!(babble.samples, mix);
    }

    #[test]
    fn babble_single_speaker_and_determinism() {
        let fs = 10_000u32;
        let corpus: Vec<Waveform> = (0..3).map(|i| noise_wave(5000, fs, 30 + i)).collect();
        let one = gen_babble(&corpus, 1, 12_000, 5).unwrap();
        assert!((one.rms() - 1.0).abs() < 1e-9);

        let again = gen_babble(&corpus, 1, 12_000, 5).unwrap();
        assert_eq!(one.samples, again.samples);

        assert!(matches!(
            gen_babble(&corpus, 4, 1000, 5),
            Err(Error::CorpusTooSmall { got: 3, need: 4 })
        ));
    }

    #[test]
    fn dataset_build_writes_recomputable_rows() {
        let dir = tmpdir();
        let fs = 10_000u32;
        // three clean sources and one noise file on disk
        let mut specs = Vec::new();
        for i in 0..3 {
            let clean = synth_speech_like(1.0, fs, 40 + i);
            let p = dir.path().join(format!("clean{i}.wav"));
            write_wav(&p, &clean).unwrap();
            specs.push(MixSpec {
                clean_path: p,
                noise: NoiseSource::File(dir.path().join("noise.wav")),
                snr_db: -3.0 + i as f64 * 4.0,
                seed: 100 + i,
                apply_vad: i == 1,
                target_rate: fs,
                target_len: 12_000,
            });
        }
        write_wav(&dir.path().join("noise.wav"), &noise_wave(30_000, fs, 50)).unwrap();

        let out = dir.path().join("out");
        let index = build_dataset(&specs, &out).unwrap();
        assert_eq!(index.rows.len(), 3);
        assert!(index.errors.is_empty());
        for row in &index.rows {
            let clean = load_wav(Path::new(&row.clean_path)).unwrap();
            let noisy = load_wav(Path::new(&row.noisy_path)).unwrap();
            assert_eq!(clean.len(), 12_000);
            assert_eq!(noisy.len(), 12_000);
            assert!(row.gain.unwrap() > 0.0);
        }

        // reading the index back preserves the rows
        let read = DatasetIndex::read(&out.join("index.csv")).unwrap();
        assert_eq!(read.rows.len(), 3);
        assert_eq!(read.rows[0].id, index.rows[0].id);
    }

    #[test]
    fn dataset_build_is_deterministic_and_pads_at_tail() {
        let dir = tmpdir();
        let fs = 10_000u32;
        let clean = synth_speech_like(0.9, fs, 60); // 9000 samples
        let clean_path = dir.path().join("clean.wav");
        write_wav(&clean_path, &clean).unwrap();
        write_wav(&dir.path().join("noise.wav"), &noise_wave(20_000, fs, 61)).unwrap();
        let specs = vec![MixSpec {
            clean_path,
            noise: NoiseSource::File(dir.path().join("noise.wav")),
            snr_db: 2.0,
            seed: 7,
            apply_vad: false,
            target_rate: fs,
            target_len: 12_000,
        }];
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        build_dataset(&specs, &out_a).unwrap();
        build_dataset(&specs, &out_b).unwrap();
        for name in ["item_00000_clean.wav", "item_00000_noisy.wav"] {
            let a = fs::read(out_a.join(name)).unwrap();
            let b = fs::read(out_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }

        // input was 9000 samples: the tail of the clean output is zero-padded
        let built = load_wav(&out_a.join("item_00000_clean.wav")).unwrap();
        assert!(built.samples[9000..].iter().all(|&s| s == 0.0));
        assert!(built.samples[..9000].iter().any(|&s| s != 0.0));
    }

    #[test]
    fn dataset_records_per_item_errors_and_continues() {
        let dir = tmpdir();
        let fs = 10_000u32;
        let clean = synth_speech_like(0.5, fs, 70);
        let good = dir.path().join("good.wav");
        write_wav(&good, &clean).unwrap();
        write_wav(&dir.path().join("noise.wav"), &noise_wave(8000, fs, 71)).unwrap();
        let make = |p: PathBuf| MixSpec {
            clean_path: p,
            noise: NoiseSource::File(dir.path().join("noise.wav")),
            snr_db: 0.0,
            seed: 1,
            apply_vad: false,
            target_rate: fs,
            target_len: 5000,
        };
        let specs = vec![make(dir.path().join("missing.wav")), make(good)];
        let index = build_dataset(&specs, &dir.path().join("out")).unwrap();
        assert_eq!(index.rows.len(), 2);
        assert_eq!(index.errors.len(), 1);
        assert_eq!(index.errors[0].0, "item_00000");
        assert!(index.rows[0].gain.is_none());
        assert!(index.rows[0].noisy_path.is_empty());
        assert!(index.rows[1].gain.is_some());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tmpdir();
        let path = dir.path().join("m.csv");
        fs::write(
            &path,
            "clean_path,noise,snr_db,seed,apply_vad,target_len\n\
             a.wav,ssn:corpus/,0.0,1,true,40000\n\
             b.wav,n.wav,-5.5,2,false,40000\n",
        )
        .unwrap();
        let specs = read_manifest(&path).unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(
            specs[0].noise,
            NoiseSource::Ssn { corpus: "corpus/".into(), lpc_order: 12 }
        );
        assert!(specs[0].apply_vad);
        assert_eq!(specs[0].target_rate, 10_000);
        assert_eq!(specs[1].noise, NoiseSource::File("n.wav".into()));
        assert_eq!(specs[1].snr_db, -5.5);
    }

    #[test]
    fn speech_fixture_is_deterministic_and_bounded() {
        let a = synth_speech_like(1.0, 10_000, 5);
        let b = synth_speech_like(1.0, 10_000, 5);
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.len(), 10_000);
        let peak = a.samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
        assert!(peak <= 0.7 + 1e-12 && peak > 0.5);
    }
}
