//! The physics extractor: maps a window of exogenous weather rasters to
//! per-height advection vectors, with exact reverse-mode gradients so the
//! network can be trained jointly with the statistical parameters.
//!
//! Architecture (compact, fully documented by [`ExtractorConfig`]):
//! each raster is standardized per channel, passed through two strided
//! 3x3 convolutions with ReLU, global-average-pooled and projected to a
//! feature vector; the last `context_len` feature vectors (with sinusoidal
//! position encodings) feed a single-head attention block whose query is
//! the latest position; a linear head maps the attended vector to `2P`
//! values squashed by `tanh` and scaled to `theta_max`.

pub mod stream;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MideError, Result};

/// Architecture descriptor. `feat_dim` is the feature-vector length F,
/// `context_len` the attention window L, and the head emits `2 * n_heights`
/// values interpreted as (x, y) advection components per height.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExtractorConfig {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub conv_channels: [usize; 2],
    pub kernel_size: usize,
    pub stride: usize,
    pub feat_dim: usize,
    pub context_len: usize,
    pub n_heights: usize,
    pub theta_max: f64,
}

impl ExtractorConfig {
    pub fn with_defaults(
        in_channels: usize,
        in_height: usize,
        in_width: usize,
        n_heights: usize,
        theta_max: f64,
    ) -> Self {
        ExtractorConfig {
            in_channels,
            in_height,
            in_width,
            conv_channels: [8, 16],
            kernel_size: 3,
            stride: 2,
            feat_dim: 32,
            context_len: 6,
            n_heights,
            theta_max,
        }
    }

    fn conv_out(&self, x: usize) -> usize {
        // padding 1, so out = floor((x + 2 - k) / stride) + 1
        (x + 2 - self.kernel_size) / self.stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size != 3 {
            return Err(MideError::Config("kernel size must be 3".into()));
        }
        if self.stride == 0 || self.context_len == 0 || self.n_heights == 0 {
            return Err(MideError::Config(
                "stride, context length, and heights must be positive".into(),
            ));
        }
        if !(self.theta_max > 0.0) {
            return Err(MideError::Config("theta_max must be positive".into()));
        }
        let (h2, w2) = self.conv2_hw();
        if h2 == 0 || w2 == 0 {
            return Err(MideError::Config(format!(
                "raster {}x{} too small for two stride-{} convolutions",
                self.in_height, self.in_width, self.stride
            )));
        }
        Ok(())
    }

    pub fn conv1_hw(&self) -> (usize, usize) {
        (self.conv_out(self.in_height), self.conv_out(self.in_width))
    }

    pub fn conv2_hw(&self) -> (usize, usize) {
        let (h1, w1) = self.conv1_hw();
        (self.conv_out(h1), self.conv_out(w1))
    }

    pub fn head_dim(&self) -> usize {
        2 * self.n_heights
    }
}

/// Offsets of each parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub conv1_w: std::ops::Range<usize>,
    pub conv1_b: std::ops::Range<usize>,
    pub conv2_w: std::ops::Range<usize>,
    pub conv2_b: std::ops::Range<usize>,
    pub lin_w: std::ops::Range<usize>,
    pub lin_b: std::ops::Range<usize>,
    pub wq: std::ops::Range<usize>,
    pub wk: std::ops::Range<usize>,
    pub wv: std::ops::Range<usize>,
    pub wo: std::ops::Range<usize>,
    pub head_w: std::ops::Range<usize>,
    pub head_b: std::ops::Range<usize>,
}

impl ParamLayout {
    pub fn new(cfg: &ExtractorConfig) -> Self {
        let k2 = cfg.kernel_size * cfg.kernel_size;
        let [c1, c2] = cfg.conv_channels;
        let f = cfg.feat_dim;
        let mut cursor = 0usize;
        let mut take = |len: usize| {
            let r = cursor..cursor + len;
            cursor += len;
            r
        };
        ParamLayout {
            conv1_w: take(c1 * cfg.in_channels * k2),
            conv1_b: take(c1),
            conv2_w: take(c2 * c1 * k2),
            conv2_b: take(c2),
            lin_w: take(f * c2),
            lin_b: take(f),
            wq: take(f * f),
            wk: take(f * f),
            wv: take(f * f),
            wo: take(f * f),
            head_w: take(cfg.head_dim() * f),
            head_b: take(cfg.head_dim()),
        }
    }

    pub fn total(&self) -> usize {
        self.head_b.end
    }

    /// Named slices in layout order, for reports and per-layer checks.
    pub fn named(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        vec![
            ("conv1.weight", self.conv1_w.clone()),
            ("conv1.bias", self.conv1_b.clone()),
            ("conv2.weight", self.conv2_w.clone()),
            ("conv2.bias", self.conv2_b.clone()),
            ("linear.weight", self.lin_w.clone()),
            ("linear.bias", self.lin_b.clone()),
            ("attn.wq", self.wq.clone()),
            ("attn.wk", self.wk.clone()),
            ("attn.wv", self.wv.clone()),
            ("attn.wo", self.wo.clone()),
            ("head.weight", self.head_w.clone()),
            ("head.bias", self.head_b.clone()),
        ]
    }
}

/// The flat network parameter vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl NetworkParams {
    pub fn zeros(cfg: &ExtractorConfig) -> Self {
        let layout = ParamLayout::new(cfg);
        NetworkParams {
            values: vec![0.0; layout.total()],
            layout,
        }
    }

    /// Glorot-uniform weights (`+-sqrt(6/(fan_in+fan_out))`), zero biases,
    /// deterministic in the seed.
    pub fn init(cfg: &ExtractorConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k2 = cfg.kernel_size * cfg.kernel_size;
        let [c1, c2] = cfg.conv_channels;
        let f = cfg.feat_dim;
        let fills: Vec<(std::ops::Range<usize>, usize, usize)> = vec![
            (p.layout.conv1_w.clone(), cfg.in_channels * k2, c1 * k2),
            (p.layout.conv2_w.clone(), c1 * k2, c2 * k2),
            (p.layout.lin_w.clone(), c2, f),
            (p.layout.wq.clone(), f, f),
            (p.layout.wk.clone(), f, f),
            (p.layout.wv.clone(), f, f),
            (p.layout.wo.clone(), f, f),
            (p.layout.head_w.clone(), f, cfg.head_dim()),
        ];
        for (range, fan_in, fan_out) in fills {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for i in range {
                p.values[i] = rng.gen_range(-a..a);
            }
        }
        p
    }

    pub fn checksum(&self) -> u64 {
        // Order-dependent bitwise hash; used to assert the freeze contract.
        let mut h = 0xcbf29ce484222325u64;
        for v in &self.values {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Per-channel (mean, std) used to standardize raster inputs. Computed on
/// the offline training maps and stored with the model.
pub type ChannelStats = Vec<(f64, f64)>;

/// Intermediate activations of one raster encoding, kept for backward.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    x_std: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    gap: Vec<f64>,
    pub feature: Vec<f64>,
}

/// Full forward cache of one advection prediction.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    positions: Vec<EncodeCache>,
    encoded: Vec<Vec<f64>>, // feature + position encoding
    q: Vec<f64>,
    keys: Vec<Vec<f64>>,
    vals: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    context: Vec<f64>,
    attn_out: Vec<f64>,
    raw_head: Vec<f64>,
    pub theta: Vec<[f64; 2]>,
}

fn standardize(cfg: &ExtractorConfig, stats: &ChannelStats, data: &[f32]) -> Result<Vec<f64>> {
    let plane = cfg.in_height * cfg.in_width;
    let want = cfg.in_channels * plane;
    if data.len() != want {
        return Err(MideError::Shape(format!(
            "raster has {} values, expected {}",
            data.len(),
            want
        )));
    }
    if stats.len() != cfg.in_channels {
        return Err(MideError::Shape(format!(
            "channel stats {} do not match channels {}",
            stats.len(),
            cfg.in_channels
        )));
    }
    let mut out = vec![0.0; want];
    for c in 0..cfg.in_channels {
        let (mean, sd) = stats[c];
        let denom = sd.max(1e-8);
        for i in 0..plane {
            out[c * plane + i] = (data[c * plane + i] as f64 - mean) / denom;
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    in_c: usize,
    in_h: usize,
    in_w: usize,
    weight: &[f64],
    bias: &[f64],
    out_c: usize,
    stride: usize,
) -> Vec<f64> {
    let out_h = (in_h + 2 - 3) / stride + 1;
    let out_w = (in_w + 2 - 3) / stride + 1;
    let mut out = vec![0.0; out_c * out_h * out_w];
    for oc in 0..out_c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = bias[oc];
                for ic in 0..in_c {
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= in_w as isize {
                                continue;
                            }
                            let wi = ((oc * in_c + ic) * 3 + ky) * 3 + kx;
                            let xi = (ic * in_h + iy as usize) * in_w + ix as usize;
                            acc += weight[wi] * input[xi];
                        }
                    }
                }
                out[(oc * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &[f64],
    in_c: usize,
    in_h: usize,
    in_w: usize,
    weight: &[f64],
    out_c: usize,
    stride: usize,
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    d_input: &mut [f64],
) {
    let out_h = (in_h + 2 - 3) / stride + 1;
    let out_w = (in_w + 2 - 3) / stride + 1;
    for oc in 0..out_c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let go = d_out[(oc * out_h + oy) * out_w + ox];
                if go == 0.0 {
                    continue;
                }
                d_bias[oc] += go;
                for ic in 0..in_c {
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= in_w as isize {
                                continue;
                            }
                            let wi = ((oc * in_c + ic) * 3 + ky) * 3 + kx;
                            let xi = (ic * in_h + iy as usize) * in_w + ix as usize;
                            d_weight[wi] += go * input[xi];
                            d_input[xi] += go * weight[wi];
                        }
                    }
                }
            }
        }
    }
}

/// Disjoint mutable weight/bias gradient slices (the bias range follows the
/// weight range immediately in the layout).
fn wb_slices<'a>(
    grad: &'a mut [f64],
    w: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(w.end, b.start);
    grad[w.start..b.end].split_at_mut(w.len())
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += w[r * cols + c] * x[c];
        }
        out[r] = acc;
    }
    out
}

/// d_w += d_out (outer) x ; d_x += w' d_out
fn matvec_backward(
    w: &[f64],
    rows: usize,
    cols: usize,
    x: &[f64],
    d_out: &[f64],
    d_w: &mut [f64],
    d_x: &mut [f64],
) {
    for r in 0..rows {
        let g = d_out[r];
        if g == 0.0 {
            continue;
        }
        for c in 0..cols {
            d_w[r * cols + c] += g * x[c];
            d_x[c] += g * w[r * cols + c];
        }
    }
}

/// Sinusoidal position encoding of dimension `dim` at position `pos`.
pub fn position_encoding(pos: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; dim];
    let pos = pos as f64;
    for k in 0..dim {
        let pair = (k / 2) as f64;
        let rate = (10_000f64).powf(2.0 * pair / dim as f64);
        pe[k] = if k % 2 == 0 {
            (pos / rate).sin()
        } else {
            (pos / rate).cos()
        };
    }
    pe
}

/// Encodes one raster into a feature vector:
/// conv -> ReLU -> conv -> ReLU -> global average pool -> linear.
pub fn encode_map(
    cfg: &ExtractorConfig,
    phi: &NetworkParams,
    stats: &ChannelStats,
    data: &[f32],
) -> Result<EncodeCache> {
    let x_std = standardize(cfg, stats, data)?;
    let [c1, c2] = cfg.conv_channels;
    let (h1, w1) = cfg.conv1_hw();
    let (h2, w2) = cfg.conv2_hw();
    let l = &phi.layout;
    let z1 = conv2d_forward(
        &x_std,
        cfg.in_channels,
        cfg.in_height,
        cfg.in_width,
        &phi.values[l.conv1_w.clone()],
        &phi.values[l.conv1_b.clone()],
        c1,
        cfg.stride,
    );
    let a1: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();
    let z2 = conv2d_forward(
        &a1,
        c1,
        h1,
        w1,
        &phi.values[l.conv2_w.clone()],
        &phi.values[l.conv2_b.clone()],
        c2,
        cfg.stride,
    );
    let a2: Vec<f64> = z2.iter().map(|&v| v.max(0.0)).collect();
    let plane2 = h2 * w2;
    let gap: Vec<f64> = (0..c2)
        .map(|c| a2[c * plane2..(c + 1) * plane2].iter().sum::<f64>() / plane2 as f64)
        .collect();
    let mut feature = matvec(&phi.values[l.lin_w.clone()], cfg.feat_dim, c2, &gap);
    for (f, b) in feature.iter_mut().zip(&phi.values[l.lin_b.clone()]) {
        *f += b;
    }
    let _ = &a2;
    Ok(EncodeCache {
        x_std,
        z1,
        a1,
        z2,
        gap,
        feature,
    })
}

/// Full forward pass over a context window of rasters (oldest first,
/// exactly `context_len` entries; pad at the stream head by repeating the
/// earliest raster). Returns per-height advection vectors and the cache.
pub fn predict_advection(
    cfg: &ExtractorConfig,
    phi: &NetworkParams,
    stats: &ChannelStats,
    window: &[&[f32]],
) -> Result<ForwardCache> {
    cfg.validate()?;
    if window.len() != cfg.context_len {
        return Err(MideError::Shape(format!(
            "window has {} rasters, expected context length {}",
            window.len(),
            cfg.context_len
        )));
    }
    let f = cfg.feat_dim;
    let l = &phi.layout;
    let positions: Vec<EncodeCache> = window
        .iter()
        .map(|data| encode_map(cfg, phi, stats, data))
        .collect::<Result<_>>()?;
    let encoded: Vec<Vec<f64>> = positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let pe = position_encoding(i, f);
            p.feature.iter().zip(pe).map(|(a, b)| a + b).collect()
        })
        .collect();
    let q = matvec(&phi.values[l.wq.clone()], f, f, encoded.last().unwrap());
    let keys: Vec<Vec<f64>> = encoded
        .iter()
        .map(|e| matvec(&phi.values[l.wk.clone()], f, f, e))
        .collect();
    let vals: Vec<Vec<f64>> = encoded
        .iter()
        .map(|e| matvec(&phi.values[l.wv.clone()], f, f, e))
        .collect();
    let scale = 1.0 / (f as f64).sqrt();
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let max_score = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max_score).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let alpha: Vec<f64> = exps.iter().map(|e| e / denom).collect();
    let mut context = vec![0.0; f];
    for (a, v) in alpha.iter().zip(&vals) {
        for (c, x) in context.iter_mut().zip(v) {
            *c += a * x;
        }
    }
    let attn_out = matvec(&phi.values[l.wo.clone()], f, f, &context);
    let mut raw_head = matvec(&phi.values[l.head_w.clone()], cfg.head_dim(), f, &attn_out);
    for (r, b) in raw_head.iter_mut().zip(&phi.values[l.head_b.clone()]) {
        *r += b;
    }
    let theta: Vec<[f64; 2]> = (0..cfg.n_heights)
        .map(|p| {
            [
                raw_head[2 * p].tanh() * cfg.theta_max,
                raw_head[2 * p + 1].tanh() * cfg.theta_max,
            ]
        })
        .collect();
    Ok(ForwardCache {
        positions,
        encoded,
        q,
        keys,
        vals,
        alpha,
        context,
        attn_out,
        raw_head,
        theta,
    })
}

/// Exact reverse-mode gradients of [`predict_advection`] with respect to the
/// parameters (and optionally the standardized raster inputs). `d_theta`
/// is the upstream gradient, one 2-vector per height.
pub fn backward(
    cfg: &ExtractorConfig,
    phi: &NetworkParams,
    cache: &ForwardCache,
    d_theta: &[[f64; 2]],
    want_d_input: bool,
) -> (Vec<f64>, Option<Vec<Vec<f64>>>) {
    let f = cfg.feat_dim;
    let l = phi.layout.clone();
    let mut grad = vec![0.0; phi.values.len()];

    // Head tanh squashing.
    let mut d_raw = vec![0.0; cfg.head_dim()];
    for p in 0..cfg.n_heights {
        for c in 0..2 {
            let t = cache.raw_head[2 * p + c].tanh();
            d_raw[2 * p + c] = d_theta[p][c] * cfg.theta_max * (1.0 - t * t);
        }
    }
    // Head linear.
    let mut d_attn_out = vec![0.0; f];
    {
        let (head_w_grad, head_b_grad, head_w) = (
            l.head_w.clone(),
            l.head_b.clone(),
            &phi.values[l.head_w.clone()],
        );
        matvec_backward(
            head_w,
            cfg.head_dim(),
            f,
            &cache.attn_out,
            &d_raw,
            &mut grad[head_w_grad],
            &mut d_attn_out,
        );
        for (g, d) in grad[head_b_grad].iter_mut().zip(&d_raw) {
            *g += d;
        }
    }
    // Output projection.
    let mut d_context = vec![0.0; f];
    matvec_backward(
        &phi.values[l.wo.clone()],
        f,
        f,
        &cache.context,
        &d_attn_out,
        &mut grad[l.wo.clone()],
        &mut d_context,
    );
    // Attention mixture.
    let ctx_len = cfg.context_len;
    let mut d_alpha = vec![0.0; ctx_len];
    let mut d_vals = vec![vec![0.0; f]; ctx_len];
    for i in 0..ctx_len {
        for k in 0..f {
            d_alpha[i] += d_context[k] * cache.vals[i][k];
            d_vals[i][k] = d_context[k] * cache.alpha[i];
        }
    }
    // Softmax.
    let dot: f64 = d_alpha
        .iter()
        .zip(&cache.alpha)
        .map(|(d, a)| d * a)
        .sum();
    let d_scores: Vec<f64> = cache
        .alpha
        .iter()
        .zip(&d_alpha)
        .map(|(a, d)| a * (d - dot))
        .collect();
    // Scores -> q and keys.
    let scale = 1.0 / (f as f64).sqrt();
    let mut d_q = vec![0.0; f];
    let mut d_keys = vec![vec![0.0; f]; ctx_len];
    for i in 0..ctx_len {
        let ds = d_scores[i] * scale;
        for k in 0..f {
            d_q[k] += ds * cache.keys[i][k];
            d_keys[i][k] = ds * cache.q[k];
        }
    }
    // Projections back to encoded vectors.
    let mut d_encoded = vec![vec![0.0; f]; ctx_len];
    matvec_backward(
        &phi.values[l.wq.clone()],
        f,
        f,
        cache.encoded.last().unwrap(),
        &d_q,
        &mut grad[l.wq.clone()],
        d_encoded.last_mut().unwrap(),
    );
    for i in 0..ctx_len {
        matvec_backward(
            &phi.values[l.wk.clone()],
            f,
            f,
            &cache.encoded[i],
            &d_keys[i],
            &mut grad[l.wk.clone()],
            &mut d_encoded[i],
        );
        matvec_backward(
            &phi.values[l.wv.clone()],
            f,
            f,
            &cache.encoded[i],
            &d_vals[i],
            &mut grad[l.wv.clone()],
            &mut d_encoded[i],
        );
    }

    // Per-position encoder backward. Position encodings are additive
    // constants, so d_feature = d_encoded.
    let [c1, c2] = cfg.conv_channels;
    let (h1, w1) = cfg.conv1_hw();
    let (h2, w2) = cfg.conv2_hw();
    let plane2 = h2 * w2;
    let mut d_inputs = if want_d_input {
        Some(Vec::with_capacity(ctx_len))
    } else {
        None
    };
    for (i, pos) in cache.positions.iter().enumerate() {
        let d_feature = &d_encoded[i];
        // Linear.
        let mut d_gap = vec![0.0; c2];
        matvec_backward(
            &phi.values[l.lin_w.clone()],
            f,
            c2,
            &pos.gap,
            d_feature,
            &mut grad[l.lin_w.clone()],
            &mut d_gap,
        );
        for (g, d) in grad[l.lin_b.clone()].iter_mut().zip(d_feature) {
            *g += d;
        }
        // Global average pool.
        let mut d_a2 = vec![0.0; c2 * plane2];
        for c in 0..c2 {
            let share = d_gap[c] / plane2 as f64;
            for x in d_a2[c * plane2..(c + 1) * plane2].iter_mut() {
                *x = share;
            }
        }
        // ReLU 2.
        let d_z2: Vec<f64> = d_a2
            .iter()
            .zip(&pos.z2)
            .map(|(d, z)| if *z > 0.0 { *d } else { 0.0 })
            .collect();
        // Conv 2.
        let mut d_a1 = vec![0.0; c1 * h1 * w1];
        {
            let (dw, db) = wb_slices(&mut grad, &l.conv2_w, &l.conv2_b);
            conv2d_backward(
                &pos.a1,
                c1,
                h1,
                w1,
                &phi.values[l.conv2_w.clone()],
                c2,
                cfg.stride,
                &d_z2,
                dw,
                db,
                &mut d_a1,
            );
        }
        // ReLU 1.
        let d_z1: Vec<f64> = d_a1
            .iter()
            .zip(&pos.z1)
            .map(|(d, z)| if *z > 0.0 { *d } else { 0.0 })
            .collect();
        // Conv 1.
        let mut d_x = vec![0.0; cfg.in_channels * cfg.in_height * cfg.in_width];
        {
            let (dw, db) = wb_slices(&mut grad, &l.conv1_w, &l.conv1_b);
            conv2d_backward(
                &pos.x_std,
                cfg.in_channels,
                cfg.in_height,
                cfg.in_width,
                &phi.values[l.conv1_w.clone()],
                c1,
                cfg.stride,
                &d_z1,
                dw,
                db,
                &mut d_x,
            );
        }
        if let Some(acc) = d_inputs.as_mut() {
            acc.push(d_x);
        }
    }
    (grad, d_inputs)
}

/// Gradient verification report.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_layer: Vec<(String, f64)>,
    pub n_checked: usize,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, err) in &self.per_layer {
            out.push_str(&format!("{name:<16} max rel err {err:.3e}\n"));
        }
        out.push_str(&format!(
            "overall          max rel err {:.3e} over {} coords => {}\n",
            self.max_rel_err,
            self.n_checked,
            if self.pass { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Compares an analytic gradient of the probe loss `sum(u . theta)` against
/// central finite differences on `coords`. Exposed separately so tests can
/// feed deliberately perturbed gradients.
pub fn check_against_fd(
    cfg: &ExtractorConfig,
    phi: &NetworkParams,
    stats: &ChannelStats,
    window: &[&[f32]],
    probe: &[[f64; 2]],
    analytic: &[f64],
    coords: &[usize],
) -> Result<GradCheckReport> {
    let loss = |params: &NetworkParams| -> Result<f64> {
        let fc = predict_advection(cfg, params, stats, window)?;
        Ok(fc
            .theta
            .iter()
            .zip(probe)
            .map(|(t, u)| t[0] * u[0] + t[1] * u[1])
            .sum())
    };
    let gmax = coords
        .iter()
        .map(|&i| analytic[i].abs())
        .fold(0.0, f64::max);
    let tau = (1e-8 * gmax).max(1e-12);
    let mut per_layer: Vec<(String, f64)> = phi
        .layout
        .named()
        .iter()
        .map(|(n, _)| (n.to_string(), 0.0))
        .collect();
    let mut max_rel = 0.0;
    for &i in coords {
        let mut pp = phi.clone();
        let h = 1e-4 * phi.values[i].abs().max(1.0);
        pp.values[i] = phi.values[i] + h;
        let up = loss(&pp)?;
        pp.values[i] = phi.values[i] - h;
        let down = loss(&pp)?;
        let fd = (up - down) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(tau);
        max_rel = rel.max(max_rel);
        for (li, (_, range)) in phi.layout.named().iter().enumerate() {
            if range.contains(&i) {
                if rel > per_layer[li].1 {
                    per_layer[li].1 = rel;
                }
                break;
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        per_layer,
        n_checked: coords.len(),
        pass: max_rel <= 1e-3,
    })
}

/// Samples at least `n_coords` parameter coordinates (covering every layer),
/// runs the analytic backward pass for a random linear probe of theta, and
/// verifies it against central finite differences.
pub fn gradient_check(
    cfg: &ExtractorConfig,
    phi: &NetworkParams,
    stats: &ChannelStats,
    window: &[&[f32]],
    seed: u64,
    n_coords: usize,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe: Vec<[f64; 2]> = (0..cfg.n_heights)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    let fc = predict_advection(cfg, phi, stats, window)?;
    let (analytic, _) = backward(cfg, phi, &fc, &probe, false);

    let mut coords: Vec<usize> = Vec::new();
    // A couple from every layer, then uniform up to n_coords.
    for (_, range) in phi.layout.named() {
        for _ in 0..2.min(range.len()) {
            coords.push(rng.gen_range(range.clone()));
        }
    }
    while coords.len() < n_coords {
        coords.push(rng.gen_range(0..phi.values.len()));
    }
    coords.sort_unstable();
    coords.dedup();
    check_against_fd(cfg, phi, stats, window, &probe, &analytic, &coords)
}
