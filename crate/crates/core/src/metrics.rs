//! Forward (evaluation-only) computation of the performance metrics:
//! time-domain MSE, short-time spectral amplitude MSE, STOI, ESTOI, SI-SDR.
//!
//! The spectral metrics share one analysis pipeline: K=256 / I=128 Hann STFT
//! magnitudes, a 15-band one-third octave filterbank starting at 150 Hz, and
//! 30-frame temporal envelope segments. The `*_analysis` functions return
//! the intermediate state of that pipeline so the loss module can run the
//! exact adjoint of the same forward pass.

use crate::dsp::{
    stft_amplitude_with_cache, AmplitudeSpectrogram, StftCache, StftConfig, Waveform,
};
use crate::error::{Error, Result};
use crate::perceptual::{band_envelope, third_octave_band_edges, EnvelopeMatrix, OctaveBandMap};

/// Sampling rate STOI and ESTOI are defined for.
pub const STOI_RATE: u32 = 10_000;
/// Number of one-third octave bands.
pub const BAND_COUNT: usize = 15;
/// Center frequency of the first band.
pub const FIRST_CENTER_HZ: f64 = 150.0;
/// STOI clipping constant, 1 + 10^(-0.75) (lower SDR bound of -15 dB).
pub const CLIP_CONSTANT: f64 = 1.0 + 0.17782794100389228; // 10^(-0.75)
/// Centered segments with a norm below this contribute a neutral 0.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Default cap applied to SI-SDR when the residual is exactly zero.
pub const SISDR_CAP_DB: f64 = 300.0;

/// Metric identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricKind {
    TimeMse,
    StsaMse,
    Stoi,
    Estoi,
    SiSdr,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::TimeMse => "time-mse",
            MetricKind::StsaMse => "stsa-mse",
            MetricKind::Stoi => "stoi",
            MetricKind::Estoi => "estoi",
            MetricKind::SiSdr => "si-sdr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "time-mse" => Ok(MetricKind::TimeMse),
            "stsa-mse" => Ok(MetricKind::StsaMse),
            "stoi" => Ok(MetricKind::Stoi),
            "estoi" => Ok(MetricKind::Estoi),
            "si-sdr" => Ok(MetricKind::SiSdr),
            other => Err(Error::InvalidConfig(format!("unknown metric {other:?}"))),
        }
    }

    /// True when larger values mean better enhancement.
    pub fn higher_is_better(self) -> bool {
        matches!(self, MetricKind::Stoi | MetricKind::Estoi | MetricKind::SiSdr)
    }

    pub fn valid_range(self) -> (f64, f64) {
        match self {
            MetricKind::TimeMse | MetricKind::StsaMse => (0.0, f64::INFINITY),
            MetricKind::Stoi | MetricKind::Estoi => (-1.0, 1.0),
            MetricKind::SiSdr => (-SISDR_CAP_DB, SISDR_CAP_DB),
        }
    }

    pub fn all() -> [MetricKind; 5] {
        [MetricKind::TimeMse, MetricKind::StsaMse, MetricKind::Stoi, MetricKind::Estoi, MetricKind::SiSdr]
    }
}

/// A scored metric.
#[derive(Debug, Clone, Copy)]
pub struct MetricScore {
    pub kind: MetricKind,
    pub value: f64,
    pub valid_range: (f64, f64),
}

impl MetricScore {
    fn new(kind: MetricKind, value: f64) -> Self {
        Self { kind, value, valid_range: kind.valid_range() }
    }
}

/// SI-SDR with its optimal-scale decomposition.
#[derive(Debug, Clone, Copy)]
pub struct SiSdrBreakdown {
    /// Least-squares scale of the reference, `(x_hat . x) / ||x||^2`.
    pub alpha: f64,
    /// `||alpha x||^2`.
    pub target_energy: f64,
    /// `||alpha x - x_hat||^2`.
    pub residual_energy: f64,
    pub sisdr_db: f64,
    /// Set when the ratio was infinite and `sisdr_db` was capped.
    pub saturated: bool,
}

fn check_pair(enhanced: &Waveform, clean: &Waveform) -> Result<()> {
    if enhanced.len() != clean.len() {
        return Err(Error::LengthMismatch { left: enhanced.len(), right: clean.len() });
    }
    if enhanced.sample_rate != clean.sample_rate {
        return Err(Error::SampleRate { got: enhanced.sample_rate, expected: clean.sample_rate });
    }
    if enhanced.is_empty() {
        return Err(Error::SignalTooShort { got: 0, need: 1 });
    }
    Ok(())
}

/// Time-domain mean-square error, `||x_hat - x||^2 / L`.
pub fn time_mse(enhanced: &Waveform, clean: &Waveform) -> Result<MetricScore> {
    check_pair(enhanced, clean)?;
    let l = enhanced.len() as f64;
    let sum: f64 = enhanced
        .samples
        .iter()
        .zip(&clean.samples)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(MetricScore::new(MetricKind::TimeMse, sum / l))
}

/// Mean-square error between single-sided STFT magnitudes.
pub fn stsa_mse(enhanced: &Waveform, clean: &Waveform, cfg: &StftConfig) -> Result<MetricScore> {
    Ok(MetricScore::new(MetricKind::StsaMse, stsa_analysis(enhanced, clean, cfg)?.value))
}

/// STSA forward state kept for the loss adjoint.
pub(crate) struct StsaAnalysis {
    pub value: f64,
    pub enh_spec: AmplitudeSpectrogram,
    pub clean_spec: AmplitudeSpectrogram,
    pub enh_cache: StftCache,
}

pub(crate) fn stsa_analysis(
    enhanced: &Waveform,
    clean: &Waveform,
    cfg: &StftConfig,
) -> Result<StsaAnalysis> {
    check_pair(enhanced, clean)?;
    let (enh_spec, enh_cache) = stft_amplitude_with_cache(enhanced, cfg)?;
    let (clean_spec, _) = stft_amplitude_with_cache(clean, cfg)?;
    let cells = enh_spec.bin_count() * enh_spec.frame_count();
    let mut sum = 0.0;
    for m in 0..enh_spec.frame_count() {
        for k in 0..enh_spec.bin_count() {
            let d = enh_spec.at(k, m) - clean_spec.at(k, m);
            sum += d * d;
        }
    }
    Ok(StsaAnalysis { value: sum / cells as f64, enh_spec, clean_spec, enh_cache })
}

fn centered(v: &[f64]) -> (Vec<f64>, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    (c, norm)
}

/// Spectral analysis shared by STOI and ESTOI.
pub(crate) struct EnvelopePipeline {
    pub enh_spec: AmplitudeSpectrogram,
    pub enh_cache: StftCache,
    pub enh_env: EnvelopeMatrix,
    pub clean_env: EnvelopeMatrix,
    pub bands: OctaveBandMap,
}

fn envelope_pipeline(enhanced: &Waveform, clean: &Waveform) -> Result<EnvelopePipeline> {
    check_pair(enhanced, clean)?;
    if enhanced.sample_rate != STOI_RATE {
        return Err(Error::SampleRate { got: enhanced.sample_rate, expected: STOI_RATE });
    }
    let cfg = StftConfig::k256();
    let (enh_spec, enh_cache) = stft_amplitude_with_cache(enhanced, &cfg)?;
    let (clean_spec, _) = stft_amplitude_with_cache(clean, &cfg)?;
    let bands = third_octave_band_edges(STOI_RATE, cfg.dft_size, BAND_COUNT, FIRST_CENTER_HZ)?;
    let enh_env = band_envelope(&enh_spec, &bands)?;
    let clean_env = band_envelope(&clean_spec, &bands)?;
    let n = enh_env.segment_len;
    if enh_env.frame_count() < n {
        return Err(Error::SignalTooShort {
            got: enhanced.len(),
            need: (n + 1) * cfg.hop + cfg.dft_size - cfg.hop, // >= N frames
        });
    }
    Ok(EnvelopePipeline { enh_spec, enh_cache, enh_env, clean_env, bands })
}

/// Per-segment state of the STOI correlation, kept for the adjoint.
pub(crate) struct StoiSegment {
    pub band: usize,
    /// 0-based index of the last frame in the segment.
    pub end_frame: usize,
    /// `||clean seg|| / ||enh seg||`, 0 when the enhanced segment is all zero.
    pub alpha: f64,
    pub norm_b_sq: f64,
    /// Entries where the clip branch (second argument of the min) is active.
    pub clipped: Vec<bool>,
    /// Centered clean segment and its norm.
    pub u: Vec<f64>,
    pub nu: f64,
    /// Centered normalized-and-clipped enhanced segment and its norm.
    pub v: Vec<f64>,
    pub nv: f64,
    pub d: f64,
    pub degenerate: bool,
}

pub(crate) struct StoiAnalysis {
    pub value: f64,
    pub clip_active_fraction: f64,
    pub pipeline: EnvelopePipeline,
    pub segments: Vec<StoiSegment>,
}

pub(crate) fn stoi_analysis(enhanced: &Waveform, clean: &Waveform) -> Result<StoiAnalysis> {
    let pipeline = envelope_pipeline(enhanced, clean)?;
    let n = pipeline.enh_env.segment_len;
    let frames = pipeline.enh_env.frame_count();
    let bands = pipeline.bands.band_count();

    let mut segments = Vec::with_capacity(bands * (frames - n + 1));
    let mut sum = 0.0;
    let mut clipped_total = 0usize;
    for j in 0..bands {
        let clean_row = pipeline.clean_env.row(j);
        let enh_row = pipeline.enh_env.row(j);
        for end in (n - 1)..frames {
            let a = &clean_row[end + 1 - n..=end];
            let b = &enh_row[end + 1 - n..=end];
            let norm_a_sq: f64 = a.iter().map(|x| x * x).sum();
            let norm_b_sq: f64 = b.iter().map(|x| x * x).sum();
            let alpha = if norm_b_sq == 0.0 { 0.0 } else { (norm_a_sq / norm_b_sq).sqrt() };

            // normalize and clip (tie goes to the first, normalized branch)
            let mut clipped = vec![false; n];
            let mut c = vec![0.0; n];
            for i in 0..n {
                let z = alpha * b[i];
                let cap = CLIP_CONSTANT * a[i];
                if z > cap {
                    clipped[i] = true;
                    c[i] = cap;
                } else {
                    c[i] = z;
                }
            }
            clipped_total += clipped.iter().filter(|&&x| x).count();

            let (u, nu) = centered(a);
            let (v, nv) = centered(&c);
            let degenerate = nu < DEGENERATE_NORM || nv < DEGENERATE_NORM;
            let d = if degenerate {
                0.0
            } else {
                u.iter().zip(&v).map(|(p, q)| p * q).sum::<f64>() / (nu * nv)
            };
            sum += d;
            segments.push(StoiSegment {
                band: j,
                end_frame: end,
                alpha,
                norm_b_sq,
                clipped,
                u,
                nu,
                v,
                nv,
                d,
                degenerate,
            });
        }
    }
    let count = segments.len();
    let value = sum / count as f64;
    let clip_active_fraction = clipped_total as f64 / (count * n) as f64;
    Ok(StoiAnalysis { value, clip_active_fraction, pipeline, segments })
}

/// Short-time objective intelligibility, averaged band-envelope correlation.
pub fn stoi(enhanced: &Waveform, clean: &Waveform) -> Result<MetricScore> {
    Ok(MetricScore::new(MetricKind::Stoi, stoi_analysis(enhanced, clean)?.value))
}

/// One row- or column-normalization record: the unit vector that came out
/// and the centered norm that went into the division.
pub(crate) struct NormedVec {
    pub unit: Vec<f64>,
    pub norm: f64,
    pub degenerate: bool,
}

fn normalize(v: &[f64]) -> NormedVec {
    let (c, norm) = centered(v);
    if norm < DEGENERATE_NORM {
        NormedVec { unit: vec![0.0; v.len()], norm, degenerate: true }
    } else {
        NormedVec { unit: c.iter().map(|x| x / norm).collect(), norm, degenerate: false }
    }
}

/// Row-then-column normalize one J x N short-time spectrogram.
fn normalize_matrix(env: &EnvelopeMatrix, end: usize) -> (Vec<NormedVec>, Vec<NormedVec>) {
    let n = env.segment_len;
    let j_count = env.band_count();
    let rows: Vec<NormedVec> = (0..j_count)
        .map(|j| normalize(&env.row(j)[end + 1 - n..=end]))
        .collect();
    let cols: Vec<NormedVec> = (0..n)
        .map(|col| {
            let column: Vec<f64> = rows.iter().map(|r| r.unit[col]).collect();
            normalize(&column)
        })
        .collect();
    (rows, cols)
}

/// Per-frame state of the ESTOI inner products, kept for the adjoint.
pub(crate) struct EstoiFrame {
    pub end_frame: usize,
    pub enh_rows: Vec<NormedVec>,
    pub enh_cols: Vec<NormedVec>,
    /// Fully normalized clean columns (constants for the gradient).
    pub clean_cols: Vec<NormedVec>,
}

pub(crate) struct EstoiAnalysis {
    pub value: f64,
    pub pipeline: EnvelopePipeline,
    pub frames: Vec<EstoiFrame>,
}

pub(crate) fn estoi_analysis(enhanced: &Waveform, clean: &Waveform) -> Result<EstoiAnalysis> {
    let pipeline = envelope_pipeline(enhanced, clean)?;
    let n = pipeline.enh_env.segment_len;
    let frame_count = pipeline.enh_env.frame_count();

    let mut frames = Vec::with_capacity(frame_count - n + 1);
    let mut sum = 0.0;
    for end in (n - 1)..frame_count {
        let (enh_rows, enh_cols) = normalize_matrix(&pipeline.enh_env, end);
        let (_, clean_cols) = normalize_matrix(&pipeline.clean_env, end);
        for (cc, ec) in clean_cols.iter().zip(&enh_cols) {
            sum += cc.unit.iter().zip(&ec.unit).map(|(a, b)| a * b).sum::<f64>();
        }
        frames.push(EstoiFrame { end_frame: end, enh_rows, enh_cols, clean_cols });
    }
    // average over the N * (M - N + 1) inner products that exist
    let value = sum / (n * frames.len()) as f64;
    Ok(EstoiAnalysis { value, pipeline, frames })
}

/// Extended STOI: row- and column-normalized short-time spectrogram match.
pub fn estoi(enhanced: &Waveform, clean: &Waveform) -> Result<MetricScore> {
    Ok(MetricScore::new(MetricKind::Estoi, estoi_analysis(enhanced, clean)?.value))
}

/// Scale-invariant SDR with the default saturation cap.
pub fn si_sdr(enhanced: &Waveform, clean: &Waveform) -> Result<SiSdrBreakdown> {
    si_sdr_capped(enhanced, clean, SISDR_CAP_DB)
}

/// Scale-invariant SDR; a zero residual (perfect reconstruction up to scale)
/// reports `cap_db` with the saturated flag set.
pub fn si_sdr_capped(enhanced: &Waveform, clean: &Waveform, cap_db: f64) -> Result<SiSdrBreakdown> {
    check_pair(enhanced, clean)?;
    let ref_energy: f64 = clean.samples.iter().map(|x| x * x).sum();
    if ref_energy == 0.0 {
        return Err(Error::ZeroReference);
    }
    let dot: f64 = enhanced.samples.iter().zip(&clean.samples).map(|(a, b)| a * b).sum();
    let alpha = dot / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let residual_energy: f64 = enhanced
        .samples
        .iter()
        .zip(&clean.samples)
        .map(|(&a, &b)| {
            let e = alpha * b - a;
            e * e
        })
        .sum();

    // A perfect reconstruction up to scale leaves at most rounding residue:
    // f64 energies resolve ~1e-16 relative per term, so anything below
    // 1e-24 relative (240 dB) is indistinguishable from zero residual.
    const SATURATION_EPS: f64 = 1e-24;
    if residual_energy <= SATURATION_EPS * target_energy {
        return Ok(SiSdrBreakdown {
            alpha,
            target_energy,
            residual_energy,
            sisdr_db: cap_db,
            saturated: true,
        });
    }
    if target_energy <= SATURATION_EPS * residual_energy {
        // (near-)orthogonal estimate: the ratio underflows toward -inf dB
        return Ok(SiSdrBreakdown {
            alpha,
            target_energy,
            residual_energy,
            sisdr_db: -cap_db,
            saturated: true,
        });
    }
    let sisdr_db = 10.0 * (target_energy / residual_energy).log10();
    let clamped = sisdr_db.clamp(-cap_db, cap_db);
    Ok(SiSdrBreakdown {
        alpha,
        target_energy,
        residual_energy,
        sisdr_db: clamped,
        saturated: clamped != sisdr_db,
    })
}

/// [`si_sdr`] as a [`MetricScore`].
pub fn si_sdr_score(enhanced: &Waveform, clean: &Waveform) -> Result<MetricScore> {
    Ok(MetricScore::new(MetricKind::SiSdr, si_sdr(enhanced, clean)?.sisdr_db))
}

/// Dispatch a metric by kind.
pub fn score(kind: MetricKind, enhanced: &Waveform, clean: &Waveform) -> Result<MetricScore> {
    match kind {
        MetricKind::TimeMse => time_mse(enhanced, clean),
        MetricKind::StsaMse => stsa_mse(enhanced, clean, &StftConfig::k256()),
        MetricKind::Stoi => stoi(enhanced, clean),
        MetricKind::Estoi => estoi(enhanced, clean),
        MetricKind::SiSdr => si_sdr_score(enhanced, clean),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), STOI_RATE)
    }

    fn flipped(x: &Waveform) -> Waveform {
        Waveform::new(x.samples.iter().map(|s| -s).collect(), x.sample_rate)
    }

    #[test]
    fn time_mse_examples() {
        let x = noise(1000, 1);
        assert_eq!(time_mse(&x, &x).unwrap().value, 0.0);

        let off = Waveform::new(x.samples.iter().map(|s| s + 1.0).collect(), x.sample_rate);
        let v = time_mse(&off, &x).unwrap().value;
        assert!((v - 1.0).abs() < 1e-12);

        let y = noise(1000, 2);
        let direct: f64 = x
            .samples
            .iter()
            .zip(&y.samples)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 1000.0;
        let got = time_mse(&y, &x).unwrap().value;
        assert!((got - direct).abs() <= 1e-14 * direct);

        let short = noise(999, 3);
        assert!(matches!(time_mse(&short, &x), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn stsa_mse_identities() {
        let x = noise(4000, 4);
        let cfg = StftConfig::k256();
        assert_eq!(stsa_mse(&x, &x, &cfg).unwrap().value, 0.0);
        // amplitude spectra are polarity invariant
        assert_eq!(stsa_mse(&flipped(&x), &x, &cfg).unwrap().value, 0.0);
    }

    #[test]
    fn stoi_estoi_identity_and_polarity() {
        let x = noise(10_000, 5);
        for f in [stoi, estoi] {
            let same = f(&x, &x).unwrap().value;
            assert!((same - 1.0).abs() < 1e-12, "self score {same}");
            let neg = f(&flipped(&x), &x).unwrap().value;
            assert!((neg - 1.0).abs() < 1e-12, "polarity score {neg}");
        }
    }

    #[test]
    fn stoi_estoi_joint_rescale_invariance() {
        let x = noise(8000, 6);
        let y = noise(8000, 7);
        let c = 0.37f64;
        let scale = |w: &Waveform| Waveform::new(w.samples.iter().map(|s| c * s).collect(), w.sample_rate);
        for f in [stoi, estoi] {
            let base = f(&y, &x).unwrap().value;
            let scaled = f(&scale(&y), &scale(&x)).unwrap().value;
            assert!((base - scaled).abs() < 1e-9, "{base} vs {scaled}");
        }
    }

    #[test]
    fn stoi_requires_rate_and_length() {
        let x = noise(10_000, 8);
        let wrong_rate = Waveform::new(x.samples.clone(), 8000);
        assert!(matches!(stoi(&wrong_rate, &wrong_rate), Err(Error::SampleRate { .. })));

        let short = noise(2000, 9); // 14 frames < N = 30
        assert!(matches!(stoi(&short, &short), Err(Error::SignalTooShort { .. })));
    }

    #[test]
    fn sisdr_scale_family() {
        let x = noise(1000, 10);
        for c in [-3.0, 0.01, 7.0] {
            let y = Waveform::new(x.samples.iter().map(|s| c * s).collect(), x.sample_rate);
            let b = si_sdr(&y, &x).unwrap();
            assert!(b.saturated);
            // only rounding residue survives scaling
            assert!(b.residual_energy <= 1e-20 * b.target_energy);
            assert_eq!(b.sisdr_db, SISDR_CAP_DB);
        }
    }

    #[test]
    fn sisdr_orthogonal_error() {
        // e orthogonal to x by construction: rotate sample pairs by 90 degrees
        let x = noise(1000, 11);
        let mut e = vec![0.0; 1000];
        for i in (0..1000).step_by(2) {
            e[i] = x.samples[i + 1] * 0.1;
            e[i + 1] = -x.samples[i] * 0.1;
        }
        let y = Waveform::new(
            x.samples.iter().zip(&e).map(|(a, b)| a + b).collect(),
            x.sample_rate,
        );
        let b = si_sdr(&y, &x).unwrap();
        let ex: f64 = x.samples.iter().map(|v| v * v).sum();
        let ee: f64 = e.iter().map(|v| v * v).sum();
        let expect = 10.0 * (ex / ee).log10();
        assert!((b.alpha - 1.0).abs() < 1e-9, "alpha {}", b.alpha);
        assert!((b.sisdr_db - expect).abs() < 1e-9, "{} vs {expect}", b.sisdr_db);
    }

    #[test]
    fn sisdr_scale_invariance_of_estimate() {
        let x = noise(1000, 12);
        let y = noise(1000, 13);
        let base = si_sdr(&y, &x).unwrap().sisdr_db;
        for c in [-3.0, 0.01, 7.0] {
            let yc = Waveform::new(y.samples.iter().map(|s| c * s).collect(), y.sample_rate);
            let got = si_sdr(&yc, &x).unwrap().sisdr_db;
            assert!((got - base).abs() < 1e-9, "c={c}: {got} vs {base}");
        }
    }

    #[test]
    fn sisdr_zero_reference_errors() {
        let x = Waveform::new(vec![0.0; 100], STOI_RATE);
        let y = noise(100, 14);
        assert!(matches!(si_sdr(&y, &x), Err(Error::ZeroReference)));
    }

    #[test]
    fn matched_signals_hit_ideal_values() {
        let x = noise(10_000, 15);
        assert_eq!(time_mse(&x, &x).unwrap().value, 0.0);
        assert_eq!(stsa_mse(&x, &x, &StftConfig::k256()).unwrap().value, 0.0);
        assert!((stoi(&x, &x).unwrap().value - 1.0).abs() < 1e-12);
        assert!((estoi(&x, &x).unwrap().value - 1.0).abs() < 1e-12);
        assert!(si_sdr(&x, &x).unwrap().saturated);
    }
}
