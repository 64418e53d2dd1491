//! Time-domain fully convolutional encoder/decoder: strided downsampling,
//! nearest-neighbor upsampling, skip concatenation, per-channel PReLU, and
//! dropout, with hand-written forward and backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// How a layer treats its input before convolving.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerMode {
    /// Plain same-resolution convolution.
    Plain,
    /// Convolution with stride 2 (encoder downsampling).
    EncodeStride,
    /// Nearest-neighbor 2x upsample, optional skip concat, then convolution.
    DecodeUpsample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    /// Convolution input channels, including concatenated skip channels.
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub filter_len: usize,
    pub mode: LayerMode,
    /// Encoder layer (0-based) whose output is concatenated after the
    /// upsample, for `DecodeUpsample` layers.
    pub skip_from: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: Vec<ConvLayerSpec>,
    pub input_len: usize,
    pub dropout_rate: f64,
    /// 0-based indices of layers followed by dropout in training mode.
    pub dropout_layers: Vec<usize>,
}

impl ModelConfig {
    /// The 18-layer architecture: a stride-1 input layer, eight stride-2
    /// encoder layers down to L/256, then a mirrored decoder of upsampling
    /// convolutions.
    ///
    /// Skip pairing is forced by the published channel plan: the two
    /// 512-input decode layers must concatenate the 256-channel encoder
    /// outputs at matching resolution (encoder layers 7 and 6), the
    /// 256-input decode layers at L/16 and L/8 take the 128-channel outputs
    /// of encoder layers 4 and 3, and the 128-input layers at L/2 and L
    /// take the 64-channel outputs of encoder layers 1 and 0. The decode
    /// layers at L/32 and L/4 get no skip (their upsampled stream already
    /// fills the printed input width), and the final full-resolution layer
    /// reuses encoder layer 0, which is the only 64-channel map at L.
    pub fn paper(input_len: usize) -> Self {
        let e = |ic, oc, stride| ConvLayerSpec {
            in_channels: ic,
            out_channels: oc,
            stride,
            filter_len: 11,
            mode: if stride == 2 { LayerMode::EncodeStride } else { LayerMode::Plain },
            skip_from: None,
        };
        let d = |ic, oc, skip: Option<usize>| ConvLayerSpec {
            in_channels: ic,
            out_channels: oc,
            stride: 1,
            filter_len: 11,
            mode: LayerMode::DecodeUpsample,
            skip_from: skip,
        };
        let layers = vec![
            e(1, 64, 1),
            e(64, 64, 2),
            e(64, 64, 2),
            e(64, 128, 2),
            e(128, 128, 2),
            e(128, 128, 2),
            e(128, 256, 2),
            e(256, 256, 2),
            e(256, 256, 2),
            d(512, 256, Some(7)),
            d(512, 256, Some(6)),
            d(256, 128, None),
            d(256, 128, Some(4)),
            d(256, 128, Some(3)),
            d(128, 64, None),
            d(128, 64, Some(1)),
            d(128, 64, Some(0)),
            ConvLayerSpec {
                in_channels: 128,
                out_channels: 1,
                stride: 1,
                filter_len: 11,
                mode: LayerMode::Plain,
                skip_from: Some(0),
            },
        ];
        // dropout after every third layer (1-based 3, 6, ..., 18)
        let dropout_layers = (1..=6).map(|k| 3 * k - 1).collect();
        ModelConfig { layers, input_len, dropout_rate: 0.2, dropout_layers }
    }

    /// A small encoder/decoder of the same shape for desk-scale training:
    /// two stride-2 stages around a bottleneck, with one skip.
    pub fn tiny(input_len: usize, width: usize) -> Self {
        let w = width.max(2);
        ModelConfig {
            layers: vec![
                ConvLayerSpec {
                    in_channels: 1,
                    out_channels: w,
                    stride: 1,
                    filter_len: 11,
                    mode: LayerMode::Plain,
                    skip_from: None,
                },
                ConvLayerSpec {
                    in_channels: w,
                    out_channels: w,
                    stride: 2,
                    filter_len: 11,
                    mode: LayerMode::EncodeStride,
                    skip_from: None,
                },
                ConvLayerSpec {
                    in_channels: w,
                    out_channels: 2 * w,
                    stride: 2,
                    filter_len: 11,
                    mode: LayerMode::EncodeStride,
                    skip_from: None,
                },
                ConvLayerSpec {
                    in_channels: 2 * w + w,
                    out_channels: w,
                    stride: 1,
                    filter_len: 11,
                    mode: LayerMode::DecodeUpsample,
                    skip_from: Some(1),
                },
                ConvLayerSpec {
                    in_channels: w + w,
                    out_channels: 1,
                    stride: 1,
                    filter_len: 11,
                    mode: LayerMode::DecodeUpsample,
                    skip_from: Some(0),
                },
            ],
            input_len,
            dropout_rate: 0.0,
            dropout_layers: vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("no layers".into()));
        }
        let mut len = self.input_len;
        let mut channels = 1usize;
        let mut encoder_out: Vec<(usize, usize)> = Vec::new(); // (channels, len) per layer
        for (i, l) in self.layers.iter().enumerate() {
            if l.filter_len % 2 == 0 || l.filter_len == 0 {
                return Err(Error::InvalidConfig(format!("layer {i}: filter must be odd")));
            }
            if !(l.stride == 1 || l.stride == 2) {
                return Err(Error::InvalidConfig(format!("layer {i}: stride must be 1 or 2")));
            }
            let mut in_ch = channels;
            if l.mode == LayerMode::DecodeUpsample {
                len *= 2;
            }
            if let Some(src) = l.skip_from {
                let (sc, sl) = *encoder_out
                    .get(src)
                    .ok_or_else(|| Error::InvalidConfig(format!("layer {i}: bad skip {src}")))?;
                if sl != len {
                    return Err(Error::InvalidConfig(format!(
                        "layer {i}: skip length {sl} vs stream {len}"
                    )));
                }
                in_ch += sc;
            }
            if in_ch != l.in_channels {
                return Err(Error::InvalidConfig(format!(
                    "layer {i}: spec expects {} input channels, stream provides {in_ch}",
                    l.in_channels
                )));
            }
            if l.stride == 2 {
                if len % 2 != 0 {
                    return Err(Error::InvalidConfig(format!("layer {i}: odd length {len}")));
                }
                len /= 2;
            }
            channels = l.out_channels;
            encoder_out.push((channels, len));
        }
        if len != self.input_len || channels != 1 {
            return Err(Error::InvalidConfig(format!(
                "output shape {channels}x{len}, want 1x{}",
                self.input_len
            )));
        }
        Ok(())
    }
}

/// Input-availability receptive field: the dependency cone of one sample at
/// the deepest analysis resolution (the bottleneck for encoder/decoder
/// configs, the output for pure feed-forward stacks), from filter lengths
/// and cumulative strides.
pub fn receptive_field(config: &ModelConfig) -> usize {
    let mut rf = 1usize;
    let mut jump = 1usize;
    for l in &config.layers {
        if l.mode == LayerMode::DecodeUpsample {
            break;
        }
        rf += (l.filter_len - 1) * jump;
        jump *= l.stride;
    }
    rf
}

/// Exact trainable parameter count: filter weights, biases, PReLU slopes.
pub fn param_count(config: &ModelConfig) -> usize {
    config
        .layers
        .iter()
        .map(|l| l.in_channels * l.out_channels * l.filter_len + 2 * l.out_channels)
        .sum()
}

/// One layer's trainable tensors. Weights are `[out][in][tap]` flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub slope: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// He-style init: weights uniform in +/- sqrt(6 / fan_in), biases zero,
    /// PReLU slopes 0.25. Deterministic under the seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layers
            .iter()
            .map(|l| {
                let fan_in = (l.in_channels * l.filter_len) as f64;
                let bound = (6.0 / fan_in).sqrt();
                LayerParams {
                    weights: (0..l.in_channels * l.out_channels * l.filter_len)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                    bias: vec![0.0; l.out_channels],
                    slope: vec![0.25; l.out_channels],
                }
            })
            .collect();
        Ok(ModelParams { config: config.clone(), layers })
    }

    /// Flip every PReLU into the identity; with dropout off the model is a
    /// pure cascade of convolutions (used by the impulse probes).
    pub fn linearize(&mut self) {
        for l in &mut self.layers {
            for s in &mut l.slope {
                *s = 1.0;
            }
        }
    }

    pub fn zeros_like(config: &ModelConfig) -> Self {
        let layers = config
            .layers
            .iter()
            .map(|l| LayerParams {
                weights: vec![0.0; l.in_channels * l.out_channels * l.filter_len],
                bias: vec![0.0; l.out_channels],
                slope: vec![0.0; l.out_channels],
            })
            .collect();
        ModelParams { config: config.clone(), layers }
    }

    /// Visit every tensor as a flat slice, in declared order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for l in &mut self.layers {
            f(&mut l.weights);
            f(&mut l.bias);
            f(&mut l.slope);
        }
    }

    pub fn tensor_count(&self) -> usize {
        self.layers.len() * 3
    }
}

/// Channel-major activation buffer.
#[derive(Debug, Clone, PartialEq)]
struct Tensor {
    data: Vec<f64>,
    channels: usize,
    len: usize,
}

impl Tensor {
    fn zeros(channels: usize, len: usize) -> Self {
        Tensor { data: vec![0.0; channels * len], channels, len }
    }

    #[inline]
    fn ch(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    #[inline]
    fn ch_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }
}

/// Same-padded convolution: `out[c][t] = b[c] + sum w[c][ci][tap] * in[ci][s*t + tap - r]`.
fn conv_forward(input: &Tensor, spec: &ConvLayerSpec, p: &LayerParams) -> Tensor {
    let r = spec.filter_len / 2;
    let out_len = input.len / spec.stride;
    let mut out = Tensor::zeros(spec.out_channels, out_len);
    for c_out in 0..spec.out_channels {
        out.ch_mut(c_out).fill(p.bias[c_out]);
        for c_in in 0..spec.in_channels {
            let w_base = (c_out * spec.in_channels + c_in) * spec.filter_len;
            let x = input.ch(c_in);
            let o = &mut out.data[c_out * out_len..(c_out + 1) * out_len];
            for tap in 0..spec.filter_len {
                let w = p.weights[w_base + tap];
                if w == 0.0 {
                    continue;
                }
                let off = tap as isize - r as isize;
                if spec.stride == 1 {
                    // valid t range: 0 <= t + off < len
                    let t_lo = (-off).max(0) as usize;
                    let t_hi = (input.len as isize - off).min(out_len as isize).max(0) as usize;
                    let src = &x[(t_lo as isize + off) as usize..(t_hi as isize + off) as usize];
                    for (ot, &xv) in o[t_lo..t_hi].iter_mut().zip(src) {
                        *ot += w * xv;
                    }
                } else {
                    for (t, ot) in o.iter_mut().enumerate() {
                        let u = 2 * t as isize + off;
                        if u >= 0 && (u as usize) < input.len {
                            *ot += w * x[u as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv_forward`]: gradients for the input, weights, and bias.
fn conv_backward(
    input: &Tensor,
    spec: &ConvLayerSpec,
    p: &LayerParams,
    grad_out: &Tensor,
) -> (Tensor, LayerParams) {
    let r = spec.filter_len / 2;
    let out_len = grad_out.len;
    let mut grad_in = Tensor::zeros(input.channels, input.len);
    let mut grad_p = LayerParams {
        weights: vec![0.0; p.weights.len()],
        bias: vec![0.0; p.bias.len()],
        slope: vec![0.0; p.slope.len()],
    };
    for c_out in 0..spec.out_channels {
        let g = grad_out.ch(c_out);
        grad_p.bias[c_out] = g.iter().sum();
        for c_in in 0..spec.in_channels {
            let w_base = (c_out * spec.in_channels + c_in) * spec.filter_len;
            let x = input.ch(c_in);
            let gi = &mut grad_in.data[c_in * input.len..(c_in + 1) * input.len];
            for tap in 0..spec.filter_len {
                let w = p.weights[w_base + tap];
                let off = tap as isize - r as isize;
                let mut gw = 0.0;
                if spec.stride == 1 {
                    let t_lo = (-off).max(0) as usize;
                    let t_hi = (input.len as isize - off).min(out_len as isize).max(0) as usize;
                    let u_lo = (t_lo as isize + off) as usize;
                    for (k, &gv) in g[t_lo..t_hi].iter().enumerate() {
                        let u = u_lo + k;
                        gw += gv * x[u];
                        gi[u] += w * gv;
                    }
                } else {
                    for (t, &gv) in g.iter().enumerate() {
                        let u = 2 * t as isize + off;
                        if u >= 0 && (u as usize) < input.len {
                            gw += gv * x[u as usize];
                            gi[u as usize] += w * gv;
                        }
                    }
                }
                grad_p.weights[w_base + tap] = gw;
            }
        }
    }
    (grad_in, grad_p)
}

fn upsample2(input: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(input.channels, input.len * 2);
    for c in 0..input.channels {
        let (src_ptr, dst_range) = (input.ch(c).to_vec(), c * out.len..(c + 1) * out.len);
        let dst = &mut out.data[dst_range];
        for (t, &v) in src_ptr.iter().enumerate() {
            dst[2 * t] = v;
            dst[2 * t + 1] = v;
        }
    }
    out
}

fn upsample2_adjoint(grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(grad_out.channels, grad_out.len / 2);
    for c in 0..grad_out.channels {
        let src = grad_out.ch(c).to_vec();
        let len = g.len;
        let dst = &mut g.data[c * len..(c + 1) * len];
        for t in 0..len {
            dst[t] = src[2 * t] + src[2 * t + 1];
        }
    }
    g
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.len, b.len);
    let mut out = Tensor::zeros(a.channels + b.channels, a.len);
    out.data[..a.channels * a.len].copy_from_slice(&a.data);
    out.data[a.channels * a.len..].copy_from_slice(&b.data);
    out
}

/// Cached activations from a training-mode forward pass.
pub struct ForwardCache {
    /// The tensor each conv actually consumed (post upsample/concat).
    conv_inputs: Vec<Tensor>,
    /// Pre-activation conv outputs.
    pre_act: Vec<Tensor>,
    /// Layer outputs after activation and dropout.
    outputs: Vec<Tensor>,
    /// Inverted-dropout masks (empty when a layer has none).
    dropout_masks: Vec<Vec<f64>>,
    input_len: usize,
    n_layers: usize,
}

/// Run the network. `training` enables seeded dropout and the returned
/// cache is only meaningful in that mode (validation runs dropout-free).
pub fn forward(
    params: &ModelParams,
    input: &Waveform,
    training: bool,
    seed: u64,
) -> Result<(Waveform, ForwardCache)> {
    let cfg = &params.config;
    if input.len() != cfg.input_len {
        return Err(Error::ShapeMismatch(format!(
            "input length {} vs config {}",
            input.len(),
            cfg.input_len
        )));
    }
    if params.layers.len() != cfg.layers.len() {
        return Err(Error::ShapeMismatch("parameter/config layer count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = ForwardCache {
        conv_inputs: Vec::with_capacity(cfg.layers.len()),
        pre_act: Vec::with_capacity(cfg.layers.len()),
        outputs: Vec::with_capacity(cfg.layers.len()),
        dropout_masks: vec![Vec::new(); cfg.layers.len()],
        input_len: cfg.input_len,
        n_layers: cfg.layers.len(),
    };

    let mut stream = Tensor { data: input.samples.clone(), channels: 1, len: input.len() };
    for (i, (spec, p)) in cfg.layers.iter().zip(&params.layers).enumerate() {
        if spec.mode == LayerMode::DecodeUpsample {
            stream = upsample2(&stream);
        }
        if let Some(src) = spec.skip_from {
            stream = concat(&stream, &cache.outputs[src]);
        }
        let pre = conv_forward(&stream, spec, p);
        cache.conv_inputs.push(stream);

        let mut post = pre.clone();
        for c in 0..spec.out_channels {
            let s = p.slope[c];
            for v in post.ch_mut(c) {
                if *v < 0.0 {
                    *v *= s;
                }
            }
        }
        cache.pre_act.push(pre);

        if training && cfg.dropout_rate > 0.0 && cfg.dropout_layers.contains(&i) {
            let keep = 1.0 - cfg.dropout_rate;
            let mask: Vec<f64> = (0..post.data.len())
                .map(|_| if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
                .collect();
            for (v, m) in post.data.iter_mut().zip(&mask) {
                *v *= m;
            }
            cache.dropout_masks[i] = mask;
        }
        cache.outputs.push(post.clone());
        stream = post;
    }

    Ok((Waveform::new(stream.data, input.sample_rate), cache))
}

/// Gradients of every trainable tensor, same shapes as [`ModelParams`].
pub type ParamGrads = ModelParams;

/// Exact adjoint of [`forward`]: gradients for all parameters and for the
/// network input, given `d loss / d output`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_out: &[f64],
) -> Result<(ParamGrads, Vec<f64>)> {
    let cfg = &params.config;
    if cache.n_layers != cfg.layers.len() || cache.input_len != cfg.input_len {
        return Err(Error::StaleCache("cache built for a different config".into()));
    }
    if grad_out.len() != cfg.input_len {
        return Err(Error::ShapeMismatch(format!(
            "grad length {} vs output {}",
            grad_out.len(),
            cfg.input_len
        )));
    }

    let mut grads = ModelParams::zeros_like(cfg);
    // gradient flowing into each layer's output (skip consumers add here)
    let mut out_grads: Vec<Tensor> = cfg
        .layers
        .iter()
        .enumerate()
        .map(|(i, _)| Tensor::zeros(cache.outputs[i].channels, cache.outputs[i].len))
        .collect();
    out_grads[cfg.layers.len() - 1] =
        Tensor { data: grad_out.to_vec(), channels: 1, len: grad_out.len() };

    let mut grad_input = vec![0.0; cfg.input_len];
    for i in (0..cfg.layers.len()).rev() {
        let spec = &cfg.layers[i];
        let p = &params.layers[i];
        let mut g = std::mem::replace(&mut out_grads[i], Tensor::zeros(0, 0));

        // dropout
        if !cache.dropout_masks[i].is_empty() {
            for (v, m) in g.data.iter_mut().zip(&cache.dropout_masks[i]) {
                *v *= m;
            }
        }
        // PReLU: slope gradient accumulates over negative pre-activations
        let pre = &cache.pre_act[i];
        for c in 0..spec.out_channels {
            let s = p.slope[c];
            let mut gs = 0.0;
            let pre_c = pre.ch(c);
            for (gv, &a) in g.ch_mut(c).iter_mut().zip(pre_c) {
                if a < 0.0 {
                    gs += *gv * a;
                    *gv *= s;
                }
            }
            grads.layers[i].slope[c] = gs;
        }
        // convolution
        let (mut gin, gp) = conv_backward(&cache.conv_inputs[i], spec, p, &g);
        grads.layers[i] = LayerParams {
            weights: gp.weights,
            bias: gp.bias,
            slope: std::mem::take(&mut grads.layers[i].slope),
        };
        // split skip concat back to its source
        if let Some(src) = spec.skip_from {
            let skip_ch = cache.outputs[src].channels;
            let stream_ch = gin.channels - skip_ch;
            let stream_part = Tensor {
                data: gin.data[..stream_ch * gin.len].to_vec(),
                channels: stream_ch,
                len: gin.len,
            };
            for c in 0..skip_ch {
                let seg = gin.ch(stream_ch + c).to_vec();
                for (d, s) in out_grads[src].ch_mut(c).iter_mut().zip(seg) {
                    *d += s;
                }
            }
            gin = stream_part;
        }
        if spec.mode == LayerMode::DecodeUpsample {
            gin = upsample2_adjoint(&gin);
        }
        if i == 0 {
            grad_input.copy_from_slice(&gin.data);
        } else {
            for (d, s) in out_grads[i - 1].data.iter_mut().zip(&gin.data) {
                *d += s;
            }
        }
    }
    Ok((grads, grad_input))
}

/// Dependency-cone width of the central bottleneck sample of a linearized
/// model, measured through the adjoint (nonzero span of the input
/// gradient). For configs without decode layers this is the output cone.
pub fn measured_input_cone(config: &ModelConfig, seed: u64) -> Result<usize> {
    // encoder prefix as a standalone single-output-channel model
    let split = config
        .layers
        .iter()
        .position(|l| l.mode == LayerMode::DecodeUpsample)
        .unwrap_or(config.layers.len());
    let mut layers: Vec<ConvLayerSpec> = config.layers[..split].to_vec();
    // collapse the deepest map to one channel so the probe has a scalar unit
    let last_ch = layers.last().map(|l| l.out_channels).unwrap_or(1);
    let jump: usize = layers.iter().map(|l| l.stride).product();
    layers.push(ConvLayerSpec {
        in_channels: last_ch,
        out_channels: 1,
        stride: 1,
        filter_len: 1,
        mode: LayerMode::Plain,
        skip_from: None,
    });
    // upsample back so the probe config is self-consistent (1 x L out)
    let mut up = jump;
    while up > 1 {
        layers.push(ConvLayerSpec {
            in_channels: 1,
            out_channels: 1,
            stride: 1,
            filter_len: 1,
            mode: LayerMode::DecodeUpsample,
            skip_from: None,
        });
        up /= 2;
    }
    let probe_cfg = ModelConfig {
        layers,
        input_len: config.input_len,
        dropout_rate: 0.0,
        dropout_layers: vec![],
    };
    let mut params = ModelParams::init(&probe_cfg, seed)?;
    params.linearize();
    // identity 1x1 stages so the added plumbing cannot widen the cone
    for i in split..probe_cfg.layers.len() {
        for w in params.layers[i].weights.iter_mut() {
            *w = 1.0;
        }
    }

    let zeros = Waveform::new(vec![0.0; probe_cfg.input_len], 10_000);
    let (_, cache) = forward(&params, &zeros, true, 0)?;
    // one-hot at the center; through the identity tail this is exactly the
    // adjoint of one bottleneck unit
    let mut grad_out = vec![0.0; probe_cfg.input_len];
    let center = probe_cfg.input_len / 2;
    grad_out[center - center % jump] = 1.0;
    let (_, grad_in) = backward(&params, &cache, &grad_out)?;

    let first = grad_in.iter().position(|&g| g != 0.0);
    let last = grad_in.iter().rposition(|&g| g != 0.0);
    match (first, last) {
        (Some(a), Some(b)) => Ok(b - a + 1),
        _ => Ok(0),
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"TFCN";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialize config and tensors with a trailing SHA-256 checksum.
/// Round-trips bit-exactly.
pub fn save_checkpoint(path: &std::path::Path, params: &ModelParams) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = &params.config;
    out.extend_from_slice(&(cfg.input_len as u64).to_le_bytes());
    out.extend_from_slice(&cfg.dropout_rate.to_bits().to_le_bytes());
    out.extend_from_slice(&(cfg.dropout_layers.len() as u64).to_le_bytes());
    for &d in &cfg.dropout_layers {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(cfg.layers.len() as u64).to_le_bytes());
    for l in &cfg.layers {
        out.extend_from_slice(&(l.in_channels as u64).to_le_bytes());
        out.extend_from_slice(&(l.out_channels as u64).to_le_bytes());
        out.extend_from_slice(&(l.stride as u64).to_le_bytes());
        out.extend_from_slice(&(l.filter_len as u64).to_le_bytes());
        out.push(match l.mode {
            LayerMode::Plain => 0,
            LayerMode::EncodeStride => 1,
            LayerMode::DecodeUpsample => 2,
        });
        let skip = l.skip_from.map(|s| s as i64).unwrap_or(-1);
        out.extend_from_slice(&skip.to_le_bytes());
    }
    for l in &params.layers {
        for v in l.weights.iter().chain(&l.bias).chain(&l.slope) {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 + 4 + 32 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut pos = 4usize;
    let mut take_u32 = |p: &mut usize| {
        let v = u32::from_le_bytes(body[*p..*p + 4].try_into().unwrap());
        *p += 4;
        v
    };
    let version = take_u32(&mut pos);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut take_u64 = |p: &mut usize| -> u64 {
        let v = u64::from_le_bytes(body[*p..*p + 8].try_into().unwrap());
        *p += 8;
        v
    };
    let input_len = take_u64(&mut pos) as usize;
    let dropout_rate = f64::from_bits(take_u64(&mut pos));
    let n_drop = take_u64(&mut pos) as usize;
    let mut dropout_layers = Vec::with_capacity(n_drop);
    for _ in 0..n_drop {
        dropout_layers.push(take_u64(&mut pos) as usize);
    }
    let n_layers = take_u64(&mut pos) as usize;
    let mut layers_spec = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_channels = take_u64(&mut pos) as usize;
        let out_channels = take_u64(&mut pos) as usize;
        let stride = take_u64(&mut pos) as usize;
        let filter_len = take_u64(&mut pos) as usize;
        let mode = match body[pos] {
            0 => LayerMode::Plain,
            1 => LayerMode::EncodeStride,
            2 => LayerMode::DecodeUpsample,
            other => return Err(Error::Checkpoint(format!("bad mode byte {other}"))),
        };
        pos += 1;
        let skip = i64::from_le_bytes(body[pos..pos + 8].try_into().unwrap());
        pos += 8;
        layers_spec.push(ConvLayerSpec {
            in_channels,
            out_channels,
            stride,
            filter_len,
            mode,
            skip_from: if skip < 0 { None } else { Some(skip as usize) },
        });
    }
    let config = ModelConfig { layers: layers_spec, input_len, dropout_rate, dropout_layers };
    let mut layers = Vec::with_capacity(n_layers);
    for l in &config.layers {
        let mut read_vec = |n: usize| -> Vec<f64> {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(f64::from_bits(u64::from_le_bytes(
                    body[pos..pos + 8].try_into().unwrap(),
                )));
                pos += 8;
            }
            v
        };
        layers.push(LayerParams {
            weights: read_vec(l.in_channels * l.out_channels * l.filter_len),
            bias: read_vec(l.out_channels),
            slope: read_vec(l.out_channels),
        });
    }
    Ok(ModelParams { config, layers })
}
