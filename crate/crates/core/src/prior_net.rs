//! Toy conditional encoder block (conv, cross-attention, log-SNR FiLM time
//! embedding, channel attention) with hand-written reverse-mode gradients,
//! a hashing metadata embedder, and the concrete priors used by the sampler.
//!
//! Shapes: feature maps are `C x H x W`; token matrices are `N x d` with
//! `d = C`, image tokens being the `H*W` spatial positions.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::io;
use crate::metadata::MetadataRecord;
use crate::optim::{grad_adjoint, grad_operator, GradientField};
use crate::sampler::{PriorInput, PriorModel, PriorOutput};

pub type FeatureMap = Array3<f64>;

const GN_EPS: f64 = 1e-5;
const MAX_GROUPS: usize = 8;

/// Token sequence `N x d`; zero rows means "no metadata".
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    data: Array2<f64>,
}

impl TokenMatrix {
    pub fn empty(dim: usize) -> Self {
        TokenMatrix {
            data: Array2::zeros((0, dim)),
        }
    }

    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("token matrix contains non-finite values".into()));
        }
        Ok(TokenMatrix { data })
    }

    pub fn num_tokens(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.num_tokens() == 0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }
}

fn fnv1a(seed: u64, text: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic feature-hashing embedding of a prompt: each whitespace token
/// picks a bucket (row) and adds a pseudo-random Gaussian vector keyed by the
/// token text; rows are L2-normalised. An empty prompt yields zero tokens
/// when `allow_empty`, and a configuration error otherwise.
pub fn embed_prompt(prompt: &str, dim: usize, num_tokens: usize, seed: u64, allow_empty: bool) -> Result<TokenMatrix> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let words: Vec<&str> = prompt.split_whitespace().collect();
    if words.is_empty() {
        if allow_empty {
            return Ok(TokenMatrix::empty(dim));
        }
        return Err(Error::Config("cannot embed an empty prompt".into()));
    }
    if num_tokens == 0 {
        return Err(Error::Config("num_tokens must be positive".into()));
    }
    let mut data = Array2::<f64>::zeros((num_tokens, dim));
    for word in words {
        let h = fnv1a(seed, word);
        let row = (h % num_tokens as u64) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        for v in data.row_mut(row).iter_mut() {
            *v += rng.sample::<f64, _>(StandardNormal);
        }
    }
    for mut row in data.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    TokenMatrix::new(data)
}

/// Embeds the rendered prompt of `record`.
pub fn embed_metadata(
    record: &MetadataRecord,
    dim: usize,
    num_tokens: usize,
    seed: u64,
    allow_empty: bool,
) -> Result<TokenMatrix> {
    embed_prompt(&record.render_prompt()?, dim, num_tokens, seed, allow_empty)
}

// ---------------------------------------------------------------------------
// Elementary ops.

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Same-size 3x3 convolution with zero padding; `w` is `out x in x 3 x 3`.
pub fn conv3x3(x: &FeatureMap, w: &Array4<f64>, b: &Array1<f64>) -> Result<FeatureMap> {
    let (ci, h, wd) = x.dim();
    let (co, wci, kh, kw) = w.dim();
    if wci != ci || kh != 3 || kw != 3 || b.len() != co {
        return Err(Error::Shape(format!(
            "conv weight {:?} / bias {} incompatible with {ci} input channels",
            w.dim(),
            b.len()
        )));
    }
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let ws = w.as_standard_layout();
    let ws = ws.as_slice().unwrap();
    let mut out = vec![0.0; co * h * wd];
    for o in 0..co {
        let plane = &mut out[o * h * wd..(o + 1) * h * wd];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..ci {
            let src = &xs[i * h * wd..(i + 1) * h * wd];
            for dr in 0..3 {
                for dc in 0..3 {
                    let k = ws[((o * ci + i) * 3 + dr) * 3 + dc];
                    if k == 0.0 {
                        continue;
                    }
                    for r in 0..h {
                        let rr = r as isize + dr as isize - 1;
                        if rr < 0 || rr >= h as isize {
                            continue;
                        }
                        let srow = &src[rr as usize * wd..(rr as usize + 1) * wd];
                        let orow = &mut plane[r * wd..(r + 1) * wd];
                        let (c_lo, c_hi) = if dc == 0 { (1, wd) } else if dc == 2 { (0, wd.saturating_sub(1)) } else { (0, wd) };
                        for c in c_lo..c_hi {
                            orow[c] += k * srow[c + dc - 1];
                        }
                    }
                }
            }
        }
    }
    Ok(Array3::from_shape_vec((co, h, wd), out).expect("shape"))
}

/// Gradients of `conv3x3` with respect to input, weights and bias.
pub fn conv3x3_backward(
    x: &FeatureMap,
    w: &Array4<f64>,
    gy: &FeatureMap,
) -> (FeatureMap, Array4<f64>, Array1<f64>) {
    let (ci, h, wd) = x.dim();
    let co = w.dim().0;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let gys = gy.as_standard_layout();
    let gys = gys.as_slice().unwrap();
    let ws = w.as_standard_layout();
    let ws = ws.as_slice().unwrap();
    let mut gx = vec![0.0; ci * h * wd];
    let mut gw = vec![0.0; co * ci * 9];
    let mut gb = Array1::zeros(co);
    for o in 0..co {
        let gplane = &gys[o * h * wd..(o + 1) * h * wd];
        gb[o] = gplane.iter().sum();
        for i in 0..ci {
            let src = &xs[i * h * wd..(i + 1) * h * wd];
            let gsrc = &mut gx[i * h * wd..(i + 1) * h * wd];
            for dr in 0..3 {
                for dc in 0..3 {
                    let widx = ((o * ci + i) * 3 + dr) * 3 + dc;
                    let k = ws[widx];
                    let mut acc = 0.0;
                    for r in 0..h {
                        let rr = r as isize + dr as isize - 1;
                        if rr < 0 || rr >= h as isize {
                            continue;
                        }
                        let rr = rr as usize;
                        let (c_lo, c_hi) = if dc == 0 { (1, wd) } else if dc == 2 { (0, wd.saturating_sub(1)) } else { (0, wd) };
                        for c in c_lo..c_hi {
                            let g = gplane[r * wd + c];
                            let si = rr * wd + c + dc - 1;
                            acc += g * src[si];
                            gsrc[si] += k * g;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (
        Array3::from_shape_vec((ci, h, wd), gx).expect("shape"),
        Array4::from_shape_vec((co, ci, 3, 3), gw).expect("shape"),
        gb,
    )
}

/// Largest divisor of `channels` not exceeding `min(8, channels)`.
pub fn group_count(channels: usize) -> usize {
    (1..=MAX_GROUPS.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

struct GroupNormCache {
    normed: FeatureMap,
    inv_std: Vec<f64>,
}

fn group_norm(x: &FeatureMap) -> GroupNormCache {
    let (c, h, w) = x.dim();
    let groups = group_count(c);
    let per = c / groups;
    let n = (per * h * w) as f64;
    let mut normed = x.clone();
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let mut block = normed.slice_mut(s![g * per..(g + 1) * per, .., ..]);
        let mean = block.sum() / n;
        let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let istd = 1.0 / (var + GN_EPS).sqrt();
        block.mapv_inplace(|v| (v - mean) * istd);
        inv_std.push(istd);
    }
    GroupNormCache { normed, inv_std }
}

fn group_norm_backward(cache: &GroupNormCache, g_normed: &FeatureMap) -> FeatureMap {
    let (c, h, w) = g_normed.dim();
    let groups = cache.inv_std.len();
    let per = c / groups;
    let n = (per * h * w) as f64;
    let mut gx = Array3::zeros((c, h, w));
    for g in 0..groups {
        let sl = s![g * per..(g + 1) * per, .., ..];
        let gn = g_normed.slice(sl);
        let xn = cache.normed.slice(sl);
        let mean_g = gn.sum() / n;
        let mean_gx = (&gn * &xn).sum() / n;
        let istd = cache.inv_std[g];
        let mut out = gx.slice_mut(sl);
        ndarray::Zip::from(&mut out)
            .and(&gn)
            .and(&xn)
            .for_each(|o, &gv, &xv| *o = istd * (gv - mean_g - xv * mean_gx));
    }
    gx
}

/// Sinusoidal encoding of a scalar into `dim` features:
/// `[sin(h f_0), cos(h f_0), sin(h f_1), ...]`, `f_k = 10000^(-k/F)`.
pub fn time_encoding(h: f64, dim: usize) -> Array1<f64> {
    let pairs = dim.div_ceil(2).max(1);
    Array1::from_shape_fn(dim, |i| {
        let k = i / 2;
        let f = (-(10_000f64.ln()) * k as f64 / pairs as f64).exp();
        if i % 2 == 0 {
            (h * f).sin()
        } else {
            (h * f).cos()
        }
    })
}

/// Log signal-to-noise ratio used as the time input: `-2 ln sigma`.
pub fn log_snr(sigma: f64) -> f64 {
    -2.0 * sigma.ln()
}

fn to_tokens(z: &FeatureMap) -> Array2<f64> {
    let (c, h, w) = z.dim();
    z.to_shape((c, h * w)).expect("contiguous").t().to_owned()
}

fn from_tokens(t: &Array2<f64>, h: usize, w: usize) -> FeatureMap {
    Array3::from_shape_fn((t.ncols(), h, w), |(ch, r, col)| t[[r * w + col, ch]])
}

fn row_softmax(s: &Array2<f64>) -> Array2<f64> {
    let mut p = s.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    p
}

// ---------------------------------------------------------------------------
// Parameters.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Queries and keys from text tokens, values from image tokens.
    #[default]
    TextQuery,
    /// Queries from image tokens, keys and values from text tokens.
    Conventional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    /// Feature channels, equal to the token dimension `d`.
    pub channels: usize,
    pub head_dim: usize,
    pub time_hidden: usize,
    pub gca_hidden: usize,
    #[serde(default)]
    pub attention: AttentionMode,
}

impl BlockConfig {
    pub fn small(channels: usize) -> Self {
        BlockConfig {
            channels,
            head_dim: channels.div_ceil(2).max(1),
            time_hidden: 2 * channels,
            gca_hidden: channels.div_ceil(2).max(1),
            attention: AttentionMode::TextQuery,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.head_dim == 0 || self.time_hidden == 0 || self.gca_hidden == 0 {
            return Err(Error::Config("block dimensions must be positive".into()));
        }
        if self.head_dim > self.channels {
            return Err(Error::Config(format!(
                "head_dim {} exceeds token dimension {}",
                self.head_dim, self.channels
            )));
        }
        Ok(())
    }
}

/// Learned tensors of one encoder block. Linear maps are stored `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub config: BlockConfig,
    pub conv_in_w: Array4<f64>,
    pub conv_in_b: Array1<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub time_w1: Array2<f64>,
    pub time_b1: Array1<f64>,
    pub time_w2: Array2<f64>,
    pub time_b2: Array1<f64>,
    pub te_conv_w: Array4<f64>,
    pub te_conv_b: Array1<f64>,
    pub gca_w1: Array2<f64>,
    pub gca_b1: Array1<f64>,
    pub gca_w2: Array2<f64>,
    pub gca_b2: Array1<f64>,
    pub out_conv_w: Array4<f64>,
    pub out_conv_b: Array1<f64>,
}

/// Named access to a set of flat parameter tensors.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));
}

macro_rules! block_tensors {
    ($m:ident) => {
        $m!(conv_in_w, conv_in_b, w_q, w_k, w_v, w_o, time_w1, time_b1, time_w2, time_b2, te_conv_w, te_conv_b,
            gca_w1, gca_b1, gca_w2, gca_b2, out_conv_w, out_conv_b)
    };
}

impl ParamSet for BlockParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        macro_rules! go {
            ($($n:ident),*) => { $( f(stringify!($n), self.$n.shape(), self.$n.as_slice().expect("standard layout")); )* };
        }
        block_tensors!(go);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        macro_rules! go {
            ($($n:ident),*) => { $( {
                let shape = self.$n.shape().to_vec();
                f(stringify!($n), &shape, self.$n.as_slice_mut().expect("standard layout"));
            } )* };
        }
        block_tensors!(go);
    }
}

impl BlockParams {
    pub fn zeros(config: BlockConfig) -> Self {
        let c = config.channels;
        let dh = config.head_dim;
        BlockParams {
            config,
            conv_in_w: Array4::zeros((c, c, 3, 3)),
            conv_in_b: Array1::zeros(c),
            w_q: Array2::zeros((dh, c)),
            w_k: Array2::zeros((dh, c)),
            w_v: Array2::zeros((dh, c)),
            w_o: Array2::zeros((c, dh)),
            time_w1: Array2::zeros((config.time_hidden, c)),
            time_b1: Array1::zeros(config.time_hidden),
            time_w2: Array2::zeros((2 * c, config.time_hidden)),
            time_b2: Array1::zeros(2 * c),
            te_conv_w: Array4::zeros((c, c, 3, 3)),
            te_conv_b: Array1::zeros(c),
            gca_w1: Array2::zeros((config.gca_hidden, c)),
            gca_b1: Array1::zeros(config.gca_hidden),
            gca_w2: Array2::zeros((c, config.gca_hidden)),
            gca_b2: Array1::zeros(c),
            out_conv_w: Array4::zeros((c, c, 3, 3)),
            out_conv_b: Array1::zeros(c),
        }
    }

    /// Gaussian weights with standard deviation `scale / sqrt(fan_in)`; biases
    /// drawn at `0.1 * scale`.
    pub fn random(config: BlockConfig, seed: u64, scale: f64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.visit_mut(&mut |name, shape, data| {
            let std = if shape.len() == 1 {
                0.1 * scale
            } else {
                scale / (shape[1..].iter().product::<usize>() as f64).sqrt()
            };
            let _ = name;
            for v in data.iter_mut() {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        });
        p
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorManifest {
    format: String,
    tensors: Vec<TensorEntry>,
}

/// Writes every tensor as little-endian f64 to `path`, with a TOML manifest
/// of names, shapes and element offsets at `path.toml`.
pub fn save_params(params: &dyn ParamSet, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    params.visit(&mut |name, shape, data| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
        offset += data.len();
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    });
    io::atomic_write(path, &bytes)?;
    let manifest = TensorManifest {
        format: "f64-le".into(),
        tensors,
    };
    io::write_toml(&manifest_path(path), &manifest)
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    s.into()
}

/// Loads tensors saved by [`save_params`] into `params`, checking names and
/// shapes against the manifest.
pub fn load_params(params: &mut dyn ParamSet, path: &Path) -> Result<()> {
    let manifest: TensorManifest = io::read_toml(&manifest_path(path))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let values: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    let mut idx = 0;
    let mut failure = None;
    params.visit_mut(&mut |name, shape, data| {
        if failure.is_some() {
            return;
        }
        match manifest.tensors.get(idx) {
            Some(t) if t.name == name && t.shape == shape && t.offset + data.len() <= values.len() => {
                data.copy_from_slice(&values[t.offset..t.offset + data.len()]);
            }
            _ => failure = Some(format!("tensor `{name}` {shape:?} does not match the manifest")),
        }
        idx += 1;
    });
    match failure {
        Some(m) => Err(Error::Parse {
            context: path.display().to_string(),
            message: m,
        }),
        None if idx != manifest.tensors.len() => Err(Error::Parse {
            context: path.display().to_string(),
            message: format!("manifest lists {} tensors, model has {idx}", manifest.tensors.len()),
        }),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Cross-attention.

struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    p: Array2<f64>,
    v: Array2<f64>,
    /// Text-query mode: attention gate and the un-gated projection `V W_oᵀ`.
    gate: f64,
    u: Array2<f64>,
    /// Conventional mode: attended values `P V`.
    a: Array2<f64>,
}

/// Gradients of the attention parameters and inputs.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub text: Array2<f64>,
    pub image: Array2<f64>,
}

fn check_tokens(text: &ArrayView2<f64>, image: &ArrayView2<f64>, params: &BlockParams) -> Result<()> {
    let d = params.config.channels;
    if text.ncols() != d || image.ncols() != d {
        return Err(Error::Shape(format!(
            "token dims (text {}, image {}) must equal block dim {d}",
            text.ncols(),
            image.ncols()
        )));
    }
    Ok(())
}

/// Attention weights: `N_t x N_t` over text tokens in text-query mode,
/// `N_v x N_t` in conventional mode. Rows sum to one.
pub fn attention_weights(text: &TokenMatrix, image_tokens: &TokenMatrix, params: &BlockParams) -> Result<Array2<f64>> {
    check_tokens(&text.view(), &image_tokens.view(), params)?;
    Ok(attention_forward(&text.view(), &image_tokens.view(), params).1.p)
}

fn attention_forward(t: &ArrayView2<f64>, x: &ArrayView2<f64>, params: &BlockParams) -> (Array2<f64>, AttentionCache) {
    let scale = 1.0 / (params.config.channels as f64).sqrt();
    match params.config.attention {
        AttentionMode::TextQuery => {
            let q = t.dot(&params.w_q.t());
            let k = t.dot(&params.w_k.t());
            let p = row_softmax(&(q.dot(&k.t()) * scale));
            let gate = p.diag().sum() / p.nrows() as f64;
            let v = x.dot(&params.w_v.t());
            let u = v.dot(&params.w_o.t());
            let out = &u * gate;
            let a = Array2::zeros((0, 0));
            (out, AttentionCache { q, k, p, v, gate, u, a })
        }
        AttentionMode::Conventional => {
            let q = x.dot(&params.w_q.t());
            let k = t.dot(&params.w_k.t());
            let v = t.dot(&params.w_v.t());
            let p = row_softmax(&(q.dot(&k.t()) * scale));
            let a = p.dot(&v);
            let out = a.dot(&params.w_o.t());
            let u = Array2::zeros((0, 0));
            (out, AttentionCache { q, k, p, v, gate: 0.0, u, a })
        }
    }
}

fn attention_backward(
    t: &ArrayView2<f64>,
    x: &ArrayView2<f64>,
    params: &BlockParams,
    cache: &AttentionCache,
    g_out: &Array2<f64>,
) -> AttentionGrads {
    let scale = 1.0 / (params.config.channels as f64).sqrt();
    let softmax_back = |p: &Array2<f64>, gp: &Array2<f64>| -> Array2<f64> {
        let mut gs = p * gp;
        for (mut row, prow) in gs.rows_mut().into_iter().zip(p.rows()) {
            let dot = row.sum();
            ndarray::Zip::from(&mut row).and(&prow).for_each(|g, &pv| *g -= pv * dot);
        }
        gs
    };
    match params.config.attention {
        AttentionMode::TextQuery => {
            let nt = cache.p.nrows();
            let g_gate = (g_out * &cache.u).sum();
            let g_u = g_out * cache.gate;
            let w_o = g_u.t().dot(&cache.v);
            let g_v = g_u.dot(&params.w_o);
            let w_v = g_v.t().dot(x);
            let image = g_v.dot(&params.w_v);
            let mut g_p = Array2::zeros((nt, nt));
            g_p.diag_mut().fill(g_gate / nt as f64);
            let g_s = softmax_back(&cache.p, &g_p) * scale;
            let g_q = g_s.dot(&cache.k);
            let g_k = g_s.t().dot(&cache.q);
            AttentionGrads {
                w_q: g_q.t().dot(t),
                w_k: g_k.t().dot(t),
                w_v,
                w_o,
                text: g_q.dot(&params.w_q) + g_k.dot(&params.w_k),
                image,
            }
        }
        AttentionMode::Conventional => {
            let w_o = g_out.t().dot(&cache.a);
            let g_a = g_out.dot(&params.w_o);
            let g_p = g_a.dot(&cache.v.t());
            let g_v = cache.p.t().dot(&g_a);
            let g_s = softmax_back(&cache.p, &g_p) * scale;
            let g_q = g_s.dot(&cache.k);
            let g_k = g_s.t().dot(&cache.q);
            AttentionGrads {
                w_q: g_q.t().dot(x),
                w_k: g_k.t().dot(t),
                w_v: g_v.t().dot(t),
                w_o,
                text: g_k.dot(&params.w_k) + g_v.dot(&params.w_v),
                image: g_q.dot(&params.w_q),
            }
        }
    }
}

/// Cross-attention update for the image tokens (`N_v x d`). In text-query mode
/// the text-token attention map `softmax(q_n·k_m/√d)` gates the projected
/// image values by its mean self-attention weight, so a single text token
/// passes `W_o W_v z_im` through unchanged. Zero text tokens give a zero
/// update.
pub fn cross_attention(text: &TokenMatrix, image_tokens: &TokenMatrix, params: &BlockParams) -> Result<TokenMatrix> {
    check_tokens(&text.view(), &image_tokens.view(), params)?;
    if text.is_empty() {
        return TokenMatrix::new(Array2::zeros(image_tokens.view().dim()));
    }
    TokenMatrix::new(attention_forward(&text.view(), &image_tokens.view(), params).0)
}

/// Vector-Jacobian product of [`cross_attention`] for output gradient `g_out`.
pub fn cross_attention_backward(
    text: &TokenMatrix,
    image_tokens: &TokenMatrix,
    params: &BlockParams,
    g_out: &Array2<f64>,
) -> Result<AttentionGrads> {
    check_tokens(&text.view(), &image_tokens.view(), params)?;
    let (c, dh) = (params.config.channels, params.config.head_dim);
    if text.is_empty() {
        return Ok(AttentionGrads {
            w_q: Array2::zeros((dh, c)),
            w_k: Array2::zeros((dh, c)),
            w_v: Array2::zeros((dh, c)),
            w_o: Array2::zeros((c, dh)),
            text: Array2::zeros((0, c)),
            image: Array2::zeros(image_tokens.view().dim()),
        });
    }
    let (_, cache) = attention_forward(&text.view(), &image_tokens.view(), params);
    Ok(attention_backward(&text.view(), &image_tokens.view(), params, &cache, g_out))
}

// ---------------------------------------------------------------------------
// Time embedding with FiLM.

struct TimeMlpCache {
    enc: Array1<f64>,
    pre: Array1<f64>,
    act: Array1<f64>,
}

/// FiLM `(gamma, beta)` per channel from the log-SNR `h`: sinusoidal
/// encoding, one SiLU hidden layer, linear output; `gamma = 1 + out[..C]`.
pub fn film_parameters(h: f64, params: &BlockParams) -> (Array1<f64>, Array1<f64>) {
    let (g, b, _) = time_mlp(h, params);
    (g, b)
}

fn time_mlp(h: f64, params: &BlockParams) -> (Array1<f64>, Array1<f64>, TimeMlpCache) {
    let c = params.config.channels;
    let enc = time_encoding(h, c);
    let pre = params.time_w1.dot(&enc) + &params.time_b1;
    let act = pre.mapv(silu);
    let out = params.time_w2.dot(&act) + &params.time_b2;
    let gamma = out.slice(s![..c]).mapv(|v| 1.0 + v);
    let beta = out.slice(s![c..]).to_owned();
    (gamma, beta, TimeMlpCache { enc, pre, act })
}

fn time_mlp_backward(
    params: &BlockParams,
    cache: &TimeMlpCache,
    g_gamma: &Array1<f64>,
    g_beta: &Array1<f64>,
    grads: &mut BlockParams,
) {
    let c = params.config.channels;
    let mut g_out = Array1::zeros(2 * c);
    g_out.slice_mut(s![..c]).assign(g_gamma);
    g_out.slice_mut(s![c..]).assign(g_beta);
    let outer = |a: &Array1<f64>, b: &Array1<f64>| {
        a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
    };
    grads.time_w2 += &outer(&g_out, &cache.act);
    grads.time_b2 += &g_out;
    let g_act = params.time_w2.t().dot(&g_out);
    let g_pre = &g_act * &cache.pre.mapv(silu_grad);
    grads.time_w1 += &outer(&g_pre, &cache.enc);
    grads.time_b1 += &g_pre;
}

struct FilmCache {
    gn: GroupNormCache,
    pre_act: FeatureMap,
    act: FeatureMap,
}

fn check_features(x: &FeatureMap, params: &BlockParams) -> Result<()> {
    if x.dim().0 != params.config.channels {
        return Err(Error::Shape(format!(
            "feature map has {} channels, block expects {}",
            x.dim().0,
            params.config.channels
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("feature map contains non-finite values".into()));
    }
    Ok(())
}

fn film_forward(x: &FeatureMap, gamma: &Array1<f64>, beta: &Array1<f64>, params: &BlockParams) -> Result<(FeatureMap, FilmCache)> {
    let gn = group_norm(x);
    let mut pre_act = gn.normed.clone();
    for (ch, mut plane) in pre_act.outer_iter_mut().enumerate() {
        let (g, b) = (gamma[ch], beta[ch]);
        plane.mapv_inplace(|v| g * v + b);
    }
    let act = pre_act.mapv(silu);
    let out = conv3x3(&act, &params.te_conv_w, &params.te_conv_b)?;
    Ok((out, FilmCache { gn, pre_act, act }))
}

/// `conv(SiLU(gamma ⊙ GroupNorm(x) + beta))` with explicit FiLM parameters.
pub fn film_modulate(x: &FeatureMap, gamma: &Array1<f64>, beta: &Array1<f64>, params: &BlockParams) -> Result<FeatureMap> {
    check_features(x, params)?;
    let c = params.config.channels;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape("FiLM parameters must have one entry per channel".into()));
    }
    Ok(film_forward(x, gamma, beta, params)?.0)
}

/// Time embedding: FiLM parameters from log-SNR `h`, applied to the
/// group-normalised features, then SiLU and a 3x3 convolution.
pub fn time_embed_modulate(h: f64, x: &FeatureMap, params: &BlockParams) -> Result<FeatureMap> {
    if !h.is_finite() {
        return Err(Error::Numeric(format!("time input {h} is not finite")));
    }
    check_features(x, params)?;
    let (gamma, beta, _) = time_mlp(h, params);
    Ok(film_forward(x, &gamma, &beta, params)?.0)
}

fn film_backward(
    params: &BlockParams,
    gamma: &Array1<f64>,
    cache: &FilmCache,
    g_out: &FeatureMap,
    grads: &mut BlockParams,
) -> (FeatureMap, Array1<f64>, Array1<f64>) {
    let (g_act, g_w, g_b) = conv3x3_backward(&cache.act, &params.te_conv_w, g_out);
    grads.te_conv_w += &g_w;
    grads.te_conv_b += &g_b;
    let g_pre = &g_act * &cache.pre_act.mapv(silu_grad);
    let c = gamma.len();
    let mut g_gamma = Array1::zeros(c);
    let mut g_beta = Array1::zeros(c);
    let mut g_norm = g_pre.clone();
    for ch in 0..c {
        let gp = g_pre.index_axis(Axis(0), ch);
        g_gamma[ch] = (&gp * &cache.gn.normed.index_axis(Axis(0), ch)).sum();
        g_beta[ch] = gp.sum();
        g_norm.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v * gamma[ch]);
    }
    (group_norm_backward(&cache.gn, &g_norm), g_gamma, g_beta)
}

/// Gradients of `sum(g_out ⊙ time_embed_modulate(h, x))`: returns the input
/// gradient and fills the TE parameter gradients (time MLP and TE conv).
pub fn time_embed_modulate_backward(
    h: f64,
    x: &FeatureMap,
    params: &BlockParams,
    g_out: &FeatureMap,
) -> Result<(FeatureMap, BlockParams)> {
    check_features(x, params)?;
    let (gamma, beta, mlp) = time_mlp(h, params);
    let (_, cache) = film_forward(x, &gamma, &beta, params)?;
    let mut grads = BlockParams::zeros(params.config);
    let (gx, g_gamma, g_beta) = film_backward(params, &gamma, &cache, g_out, &mut grads);
    time_mlp_backward(params, &mlp, &g_gamma, &g_beta, &mut grads);
    Ok((gx, grads))
}

// ---------------------------------------------------------------------------
// Guided contextual (channel) attention.

struct GcaCache {
    mean: Array1<f64>,
    pre: Array1<f64>,
    act: Array1<f64>,
    gate: Array1<f64>,
}

fn gca_forward(x: &FeatureMap, params: &BlockParams) -> (FeatureMap, GcaCache) {
    let mean = x.mean_axis(Axis(2)).unwrap().mean_axis(Axis(1)).unwrap();
    let pre = params.gca_w1.dot(&mean) + &params.gca_b1;
    let act = pre.mapv(silu);
    let gate = (params.gca_w2.dot(&act) + &params.gca_b2).mapv(sigmoid);
    (gate_channels(x, &gate), GcaCache { mean, pre, act, gate })
}

/// Multiplies each channel of `x` by its gate.
pub fn gate_channels(x: &FeatureMap, gates: &Array1<f64>) -> FeatureMap {
    let mut out = x.clone();
    for (ch, mut plane) in out.outer_iter_mut().enumerate() {
        let g = gates[ch];
        plane.mapv_inplace(|v| v * g);
    }
    out
}

/// Channel attention: global average pool, SiLU MLP, sigmoid gates in
/// (0, 1), channel-wise rescaling.
pub fn guided_contextual_attention(x: &FeatureMap, params: &BlockParams) -> Result<FeatureMap> {
    check_features(x, params)?;
    Ok(gca_forward(x, params).0)
}

/// Per-channel gates that [`guided_contextual_attention`] would apply.
pub fn gca_gates(x: &FeatureMap, params: &BlockParams) -> Result<Array1<f64>> {
    check_features(x, params)?;
    Ok(gca_forward(x, params).1.gate)
}

fn gca_backward(x: &FeatureMap, params: &BlockParams, cache: &GcaCache, g_out: &FeatureMap, grads: &mut BlockParams) -> FeatureMap {
    let (c, h, w) = x.dim();
    let n = (h * w) as f64;
    let g_gate = Array1::from_shape_fn(c, |ch| (&g_out.index_axis(Axis(0), ch) * &x.index_axis(Axis(0), ch)).sum());
    let g_z = &g_gate * &cache.gate.mapv(|s| s * (1.0 - s));
    let outer = |a: &Array1<f64>, b: &Array1<f64>| a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)));
    grads.gca_w2 += &outer(&g_z, &cache.act);
    grads.gca_b2 += &g_z;
    let g_act = params.gca_w2.t().dot(&g_z);
    let g_pre = &g_act * &cache.pre.mapv(silu_grad);
    grads.gca_w1 += &outer(&g_pre, &cache.mean);
    grads.gca_b1 += &g_pre;
    let g_mean = params.gca_w1.t().dot(&g_pre);
    let mut gx = gate_channels(g_out, &cache.gate);
    for (ch, mut plane) in gx.outer_iter_mut().enumerate() {
        let add = g_mean[ch] / n;
        plane.mapv_inplace(|v| v + add);
    }
    gx
}

/// Gradients of `sum(g_out ⊙ guided_contextual_attention(x))`.
pub fn guided_contextual_attention_backward(
    x: &FeatureMap,
    params: &BlockParams,
    g_out: &FeatureMap,
) -> Result<(FeatureMap, BlockParams)> {
    check_features(x, params)?;
    let (_, cache) = gca_forward(x, params);
    let mut grads = BlockParams::zeros(params.config);
    let gx = gca_backward(x, params, &cache, g_out, &mut grads);
    Ok((gx, grads))
}

// ---------------------------------------------------------------------------
// Encoder block.

/// Text-side sequence for the block: metadata tokens followed by one time
/// token (the sinusoidal encoding of `h`). Empty when there is no metadata.
pub fn text_sequence(tokens: &TokenMatrix, h: f64) -> Array2<f64> {
    if tokens.is_empty() {
        return Array2::zeros((0, tokens.dim()));
    }
    let time = time_encoding(h, tokens.dim());
    ndarray::concatenate(Axis(0), &[tokens.view(), time.view().insert_axis(Axis(0))]).expect("same width")
}

struct BlockCache {
    pre_in: FeatureMap,
    z1: FeatureMap,
    text: Array2<f64>,
    image_tokens: Array2<f64>,
    attention: Option<AttentionCache>,
    z_comb: FeatureMap,
    gamma: Array1<f64>,
    mlp: TimeMlpCache,
    film: FilmCache,
    te: FeatureMap,
    gca: GcaCache,
    gated: FeatureMap,
}

fn block_forward(z: &FeatureMap, tokens: &TokenMatrix, h: f64, params: &BlockParams) -> Result<(FeatureMap, BlockCache)> {
    params.config.validate()?;
    check_features(z, params)?;
    if tokens.dim() != params.config.channels {
        return Err(Error::Shape(format!(
            "metadata token dim {} != block channels {}",
            tokens.dim(),
            params.config.channels
        )));
    }
    if !h.is_finite() {
        return Err(Error::Numeric(format!("time input {h} is not finite")));
    }
    let (_, hh, ww) = z.dim();
    let pre_in = conv3x3(z, &params.conv_in_w, &params.conv_in_b)?;
    let z1 = pre_in.mapv(silu);
    let text = text_sequence(tokens, h);
    let image_tokens = to_tokens(&z1);
    let (z_comb, attention) = if text.nrows() > 0 {
        let (upd, cache) = attention_forward(&text.view(), &image_tokens.view(), params);
        (&z1 + &from_tokens(&upd, hh, ww), Some(cache))
    } else {
        (z1.clone(), None)
    };
    let (gamma, beta, mlp) = time_mlp(h, params);
    let (te, film) = film_forward(&z_comb, &gamma, &beta, params)?;
    let (gated, gca) = gca_forward(&te, params);
    let out = z + &conv3x3(&gated, &params.out_conv_w, &params.out_conv_b)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("encoder block produced non-finite values".into()));
    }
    Ok((
        out,
        BlockCache {
            pre_in,
            z1,
            text,
            image_tokens,
            attention,
            z_comb,
            gamma,
            mlp,
            film,
            te,
            gca,
            gated,
        },
    ))
}

/// One conditioned encoder block:
///
/// ```text
/// z1     = SiLU(conv_in(z))
/// z_comb = z1 + CrossAttn([tokens; time_token], z1)
/// out    = z + conv_out(GCA(TE(h, z_comb)))
/// ```
pub fn encoder_block_forward(z: &FeatureMap, tokens: &TokenMatrix, h: f64, params: &BlockParams) -> Result<FeatureMap> {
    Ok(block_forward(z, tokens, h, params)?.0)
}

/// Gradients of `sum(g_out ⊙ encoder_block_forward(z, ...))` with respect to
/// `z` and every block parameter.
pub fn encoder_block_backward(
    z: &FeatureMap,
    tokens: &TokenMatrix,
    h: f64,
    params: &BlockParams,
    g_out: &FeatureMap,
) -> Result<(FeatureMap, BlockParams)> {
    let (_, cache) = block_forward(z, tokens, h, params)?;
    if g_out.dim() != z.dim() {
        return Err(Error::Shape("output gradient does not match the block output".into()));
    }
    let (_, hh, ww) = z.dim();
    let mut grads = BlockParams::zeros(params.config);
    let (g_gated, g_w, g_b) = conv3x3_backward(&cache.gated, &params.out_conv_w, g_out);
    grads.out_conv_w += &g_w;
    grads.out_conv_b += &g_b;
    let g_te = gca_backward(&cache.te, params, &cache.gca, &g_gated, &mut grads);
    let (g_comb, g_gamma, g_beta) = film_backward(params, &cache.gamma, &cache.film, &g_te, &mut grads);
    time_mlp_backward(params, &cache.mlp, &g_gamma, &g_beta, &mut grads);
    let mut g_z1 = g_comb.clone();
    if let Some(att) = &cache.attention {
        let g_upd = to_tokens(&g_comb);
        let ag = attention_backward(&cache.text.view(), &cache.image_tokens.view(), params, att, &g_upd);
        grads.w_q += &ag.w_q;
        grads.w_k += &ag.w_k;
        grads.w_v += &ag.w_v;
        grads.w_o += &ag.w_o;
        g_z1 += &from_tokens(&ag.image, hh, ww);
    }
    let _ = &cache.z1;
    let _ = &cache.z_comb;
    let g_pre = &g_z1 * &cache.pre_in.mapv(silu_grad);
    let (g_in, g_w, g_b) = conv3x3_backward(z, &params.conv_in_w, &g_pre);
    grads.conv_in_w += &g_w;
    grads.conv_in_b += &g_b;
    Ok((g_out + &g_in, grads))
}

// ---------------------------------------------------------------------------
// Priors.

/// Returns zero velocity and score.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPrior;

impl PriorModel for ZeroPrior {
    fn evaluate(&self, input: &PriorInput) -> Result<PriorOutput> {
        let (h, w) = input.x.shape();
        Ok(PriorOutput {
            velocity: Image::zeros(h, w),
            score: Image::zeros(h, w),
        })
    }
}

/// TV denoising `argmin_u ½‖u − f‖² + λ TV(u)` by Chambolle's dual projection
/// iteration.
pub fn tv_denoise(f: &Image, lambda: f64, iters: usize) -> Result<Image> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("TV weight must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(f.clone());
    }
    let (h, w) = f.shape();
    let tau = 0.125;
    let mut p = GradientField::zeros(h, w);
    for _ in 0..iters {
        // div p = -Dᵀp.
        let dtp = grad_adjoint(&p);
        let inner = Image::from_vec(
            h,
            w,
            dtp.as_slice().iter().zip(f.as_slice()).map(|(d, fv)| -d - fv / lambda).collect(),
        )?;
        let g = grad_operator(&inner);
        for i in 0..h * w {
            let denom = 1.0 + tau * g.gx[i].hypot(g.gy[i]);
            p.gx[i] = (p.gx[i] + tau * g.gx[i]) / denom;
            p.gy[i] = (p.gy[i] + tau * g.gy[i]) / denom;
        }
    }
    let dtp = grad_adjoint(&p);
    Image::from_vec(h, w, f.as_slice().iter().zip(dtp.as_slice()).map(|(fv, d)| fv + lambda * d).collect())
}

/// Analytic prior: denoise with TV weight `weight * sigma`; velocity and
/// score follow from the denoiser residual.
#[derive(Clone, Copy, Debug)]
pub struct TvDenoiserPrior {
    pub weight: f64,
    pub iters: usize,
}

impl PriorModel for TvDenoiserPrior {
    fn evaluate(&self, input: &PriorInput) -> Result<PriorOutput> {
        let sigma = input.sigma;
        let denoised = tv_denoise(input.x, self.weight * sigma, self.iters)?;
        Ok(PriorOutput::from_denoised(input.x, &denoised, sigma))
    }
}

/// Two-level network of encoder blocks with fixed random weights, used to
/// exercise the conditioning paths end to end.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyBlockNet {
    pub lift_w: Array4<f64>,
    pub lift_b: Array1<f64>,
    pub block1: BlockParams,
    pub block2: BlockParams,
    pub head_w: Array4<f64>,
    pub head_b: Array1<f64>,
}

impl ParamSet for TinyBlockNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("lift_w", self.lift_w.shape(), self.lift_w.as_slice().unwrap());
        f("lift_b", self.lift_b.shape(), self.lift_b.as_slice().unwrap());
        self.block1.visit(&mut |n, s, d| f(&format!("block1.{n}"), s, d));
        self.block2.visit(&mut |n, s, d| f(&format!("block2.{n}"), s, d));
        f("head_w", self.head_w.shape(), self.head_w.as_slice().unwrap());
        f("head_b", self.head_b.shape(), self.head_b.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let s = self.lift_w.shape().to_vec();
        f("lift_w", &s, self.lift_w.as_slice_mut().unwrap());
        let s = self.lift_b.shape().to_vec();
        f("lift_b", &s, self.lift_b.as_slice_mut().unwrap());
        self.block1.visit_mut(&mut |n, s, d| f(&format!("block1.{n}"), s, d));
        self.block2.visit_mut(&mut |n, s, d| f(&format!("block2.{n}"), s, d));
        let s = self.head_w.shape().to_vec();
        f("head_w", &s, self.head_w.as_slice_mut().unwrap());
        let s = self.head_b.shape().to_vec();
        f("head_b", &s, self.head_b.as_slice_mut().unwrap());
    }
}

impl TinyBlockNet {
    pub fn random(config: BlockConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize], std: f64| -> Vec<f64> {
            (0..shape.iter().product::<usize>()).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let lift_w = Array4::from_shape_vec((c, 2, 3, 3), normal(&[c, 2, 3, 3], 1.0 / 18f64.sqrt())).unwrap();
        let lift_b = Array1::from(normal(&[c], 0.1));
        let head_w = Array4::from_shape_vec((1, c, 3, 3), normal(&[1, c, 3, 3], 0.1 / (9.0 * c as f64).sqrt())).unwrap();
        let head_b = Array1::from(normal(&[1], 0.01));
        Ok(TinyBlockNet {
            lift_w,
            lift_b,
            block1: BlockParams::random(config, seed.wrapping_add(1), 0.5),
            block2: BlockParams::random(config, seed.wrapping_add(2), 0.5),
            head_w,
            head_b,
        })
    }

    pub fn channels(&self) -> usize {
        self.block1.config.channels
    }

    /// Network output for image `x`, optional conditioning image, log-SNR
    /// `h` and metadata tokens. Image sides must be even.
    pub fn forward(&self, x: &Image, condition: Option<&Image>, h: f64, tokens: &TokenMatrix) -> Result<Image> {
        let (hh, ww) = x.shape();
        if hh % 2 != 0 || ww % 2 != 0 {
            return Err(Error::Shape(format!("tiny_block_net needs even image sides, got {hh}x{ww}")));
        }
        let mut input = Array3::zeros((2, hh, ww));
        input.index_axis_mut(Axis(0), 0).assign(&ArrayView2::from_shape((hh, ww), x.as_slice()).unwrap());
        if let Some(cond) = condition {
            cond.ensure_same_shape(x)?;
            input.index_axis_mut(Axis(0), 1).assign(&ArrayView2::from_shape((hh, ww), cond.as_slice()).unwrap());
        }
        let f0 = conv3x3(&input, &self.lift_w, &self.lift_b)?;
        let f1 = encoder_block_forward(&f0, tokens, h, &self.block1)?;
        let c = self.channels();
        let pooled = Array3::from_shape_fn((c, hh / 2, ww / 2), |(ch, r, col)| {
            0.25 * (f1[[ch, 2 * r, 2 * col]] + f1[[ch, 2 * r + 1, 2 * col]] + f1[[ch, 2 * r, 2 * col + 1]] + f1[[ch, 2 * r + 1, 2 * col + 1]])
        });
        let f2 = encoder_block_forward(&pooled, tokens, h, &self.block2)?;
        let merged = Array3::from_shape_fn((c, hh, ww), |(ch, r, col)| f1[[ch, r, col]] + f2[[ch, r / 2, col / 2]]);
        let out = conv3x3(&merged, &self.head_w, &self.head_b)?;
        Image::from_vec(hh, ww, out.into_iter().collect())
    }
}

impl PriorModel for TinyBlockNet {
    /// The network output is read as the noise-normalised residual
    /// `(D − x) / sigma`.
    fn evaluate(&self, input: &PriorInput) -> Result<PriorOutput> {
        let sigma = input.sigma;
        if !(sigma > 0.0) {
            return Err(Error::Domain(format!("prior evaluated at sigma {sigma}")));
        }
        let o = self.forward(input.x, input.condition, log_snr(sigma), input.metadata)?;
        let denoised = Image::from_vec(
            o.height(),
            o.width(),
            input.x.as_slice().iter().zip(o.as_slice()).map(|(x, r)| x + sigma * r).collect(),
        )?;
        Ok(PriorOutput::from_denoised(input.x, &denoised, sigma))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Zero,
    TvDenoiser,
    TinyBlockNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub kind: PriorKind,
    /// TV weight per unit noise level (tv_denoiser).
    pub tv_weight: f64,
    pub tv_iters: usize,
    /// Network width (tiny_block_net); also the metadata token dimension.
    pub channels: usize,
    pub attention: AttentionMode,
    /// Metadata token rows.
    pub num_tokens: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            kind: PriorKind::Zero,
            tv_weight: 0.5,
            tv_iters: 30,
            channels: 8,
            attention: AttentionMode::TextQuery,
            num_tokens: 4,
        }
    }
}

/// Builds one of the toy priors; network weights are drawn from `seed`.
pub fn toy_prior(config: &PriorConfig, seed: u64) -> Result<Box<dyn PriorModel>> {
    Ok(match config.kind {
        PriorKind::Zero => Box::new(ZeroPrior),
        PriorKind::TvDenoiser => {
            if !(config.tv_weight >= 0.0) {
                return Err(Error::Config("tv_weight must be >= 0".into()));
            }
            Box::new(TvDenoiserPrior {
                weight: config.tv_weight,
                iters: config.tv_iters,
            })
        }
        PriorKind::TinyBlockNet => {
            let block = BlockConfig {
                attention: config.attention,
                ..BlockConfig::small(config.channels)
            };
            Box::new(TinyBlockNet::random(block, seed)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_count_divides() {
        assert_eq!(group_count(8), 8);
        assert_eq!(group_count(12), 6);
        assert_eq!(group_count(7), 7);
        assert_eq!(group_count(9), 3);
        assert_eq!(group_count(1), 1);
    }

    #[test]
    fn token_round_trip() {
        let z = Array3::from_shape_fn((3, 2, 4), |(c, r, w)| (c * 100 + r * 10 + w) as f64);
        let t = to_tokens(&z);
        assert_eq!(t.dim(), (8, 3));
        assert_eq!(t[[5, 2]], z[[2, 1, 1]]);
        assert_eq!(from_tokens(&t, 2, 4), z);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut w = Array4::zeros((2, 2, 3, 3));
        w[[0, 0, 1, 1]] = 1.0;
        w[[1, 1, 1, 1]] = 1.0;
        let x = Array3::from_shape_fn((2, 3, 4), |(c, r, k)| (c + r * k) as f64);
        assert_eq!(conv3x3(&x, &w, &Array1::zeros(2)).unwrap(), x);
    }

    #[test]
    fn tv_denoise_zero_weight_is_identity() {
        let f = Image::from_fn(4, 4, |r, c| (r * c) as f64);
        assert_eq!(tv_denoise(&f, 0.0, 10).unwrap(), f);
        let c = Image::filled(5, 5, 2.0);
        let d = tv_denoise(&c, 1.0, 20).unwrap();
        assert!(d.as_slice().iter().all(|v| (v - 2.0).abs() < 1e-12));
    }
}
