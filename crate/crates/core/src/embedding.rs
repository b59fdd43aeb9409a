//! The descriptor network: a frozen handcrafted backbone producing patch
//! statistics, followed by a trainable MLP head whose output is L2-normalized.
//!
//! The head is small enough that its gradients are computed analytically and
//! checked against finite differences in the tests.

use std::fmt;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::color::{chroma, luma};
use crate::error::{Result, VprError};
use crate::image::RgbImage;
use crate::seed::{rng_for, stream};

/// Side of the canonical canvas the backbone resizes every image to.
pub const CANVAS: usize = 64;
/// Patches per side.
pub const GRID: usize = 8;
pub const PATCH: usize = CANVAS / GRID;
pub const STATS_PER_PATCH: usize = 8;
pub const RAW_DIM: usize = GRID * GRID * STATS_PER_PATCH;
pub const ORIENTATION_BINS: usize = 4;

pub const DEFAULT_OUTPUT_DIM: usize = 128;
pub const DEFAULT_HIDDEN_DIMS: [usize; 1] = [256];

/// Norms below this are treated as degenerate and padded by the same amount.
pub const NORM_EPS: f64 = 1e-12;

const MODEL_MAGIC: &[u8; 4] = b"VPRH";
const MODEL_VERSION: u16 = 1;
const ACTIVATION_TANH: u8 = 1;

/// Backbone output.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatures(pub Vec<f64>);

impl RawFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Unit-norm output of the head.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor(pub Vec<f64>);

impl Descriptor {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Area-averaging resize of one image axis: for each output cell, the source
/// pixels it overlaps and the overlap weights (summing to one).
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let a = o as f64 * scale;
            let b = (o + 1) as f64 * scale;
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(src);
            (first..last)
                .filter_map(|i| {
                    let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Resizes to `CANVAS x CANVAS` by area averaging.
pub fn resize_area(image: &RgbImage) -> RgbImage {
    if image.width() == CANVAS && image.height() == CANVAS {
        return image.clone();
    }
    let wx = area_weights(image.width(), CANVAS);
    let wy = area_weights(image.height(), CANVAS);
    // horizontal pass into a height x CANVAS buffer
    let mut tmp = vec![[0.0f64; 3]; image.height() * CANVAS];
    for y in 0..image.height() {
        for (ox, weights) in wx.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for &(x, w) in weights {
                let p = image.pixel(x, y);
                for c in 0..3 {
                    acc[c] += w * p[c] as f64;
                }
            }
            tmp[y * CANVAS + ox] = acc;
        }
    }
    RgbImage::from_fn(CANVAS, CANVAS, |ox, oy| {
        let mut acc = [0.0f64; 3];
        for &(y, w) in &wy[oy] {
            let p = tmp[y * CANVAS + ox];
            for c in 0..3 {
                acc[c] += w * p[c];
            }
        }
        acc.map(|v| v.clamp(0.0, 1.0) as f32)
    })
}

/// Orientation bin of a luma gradient, folded to `[0, 180)` degrees in four 45 degree bins.
#[inline]
pub fn orientation_bin(gx: f64, gy: f64) -> usize {
    let mut deg = gy.atan2(gx).to_degrees();
    if deg < 0.0 {
        deg += 180.0;
    }
    if deg >= 180.0 {
        deg -= 180.0;
    }
    ((deg / 45.0) as usize).min(ORIENTATION_BINS - 1)
}

/// The frozen backbone. Per 8x8 patch of the 64x64 canvas, in row-major patch
/// order: luma mean, luma standard deviation, the two chroma means, and a
/// magnitude-weighted 4-bin histogram of luma gradient orientation
/// (central differences, replicated border) normalized by the patch area.
pub fn extract_raw(image: &RgbImage) -> RawFeatures {
    let canvas = resize_area(image);
    let n = CANVAS * CANVAS;
    let mut y_plane = vec![0.0f64; n];
    let mut cb_plane = vec![0.0f64; n];
    let mut cr_plane = vec![0.0f64; n];
    for (i, px) in canvas.data().chunks_exact(3).enumerate() {
        let rgb = [px[0], px[1], px[2]];
        y_plane[i] = luma(rgb);
        let (cb, cr) = chroma(rgb);
        cb_plane[i] = cb;
        cr_plane[i] = cr;
    }
    let at = |x: isize, y: isize| -> f64 {
        let x = x.clamp(0, CANVAS as isize - 1) as usize;
        let y = y.clamp(0, CANVAS as isize - 1) as usize;
        y_plane[y * CANVAS + x]
    };

    let area = (PATCH * PATCH) as f64;
    let mut out = Vec::with_capacity(RAW_DIM);
    for py in 0..GRID {
        for px in 0..GRID {
            let mut sum_y = 0.0;
            let mut sum_y2 = 0.0;
            let mut sum_cb = 0.0;
            let mut sum_cr = 0.0;
            let mut hist = [0.0f64; ORIENTATION_BINS];
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    let x = px * PATCH + dx;
                    let y = py * PATCH + dy;
                    let idx = y * CANVAS + x;
                    let v = y_plane[idx];
                    sum_y += v;
                    sum_y2 += v * v;
                    sum_cb += cb_plane[idx];
                    sum_cr += cr_plane[idx];
                    let (xi, yi) = (x as isize, y as isize);
                    let gx = 0.5 * (at(xi + 1, yi) - at(xi - 1, yi));
                    let gy = 0.5 * (at(xi, yi + 1) - at(xi, yi - 1));
                    let mag = gx.hypot(gy);
                    if mag > 0.0 {
                        hist[orientation_bin(gx, gy)] += mag;
                    }
                }
            }
            let mean = sum_y / area;
            let var = (sum_y2 / area - mean * mean).max(0.0);
            out.push(mean);
            out.push(var.sqrt());
            out.push(sum_cb / area);
            out.push(sum_cr / area);
            out.extend(hist.iter().map(|h| h / area));
        }
    }
    RawFeatures(out)
}

/// One affine layer. `weights` is `input_dim x output_dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub input_dim: usize,
    pub output_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            weights: vec![0.0; input_dim * output_dim],
            bias: vec![0.0; output_dim],
        }
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.output_dim + j]
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &x) in input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.output_dim..(i + 1) * self.output_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        out
    }
}

/// Content hash of a model's parameters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Leading 12 hex characters, for tables.
    pub fn short(&self) -> String {
        self.to_hex()[..12].to_string()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 64 {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, b) in out.iter_mut().enumerate() {
            *b = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
        }
        Some(Self(out))
    }
}

impl serde::Serialize for Fingerprint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.short())
    }
}

/// MLP head: affine layers with tanh between them, then L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel {
    layers: Vec<Layer>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input of every layer; entry 0 is the raw feature vector.
    inputs: Vec<Vec<f64>>,
    /// Pre-normalization output.
    pre_norm: Vec<f64>,
    norm: f64,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn descriptor(&self) -> Descriptor {
        Descriptor(self.output.clone())
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Gradients with the same shapes as the model's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub layers: Vec<Layer>,
}

impl ParamGradients {
    pub fn zeros_like(model: &EmbeddingModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.input_dim, l.output_dim))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights
                .iter_mut()
                .zip(&b.weights)
                .for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= factor);
            l.bias.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|&v| v == 0.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl EmbeddingModel {
    /// Builds a model from explicit layers, checking that consecutive
    /// dimensions agree.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(VprError::InvalidConfig(
                "model needs at least one layer".into(),
            ));
        }
        for l in &layers {
            if l.weights.len() != l.input_dim * l.output_dim || l.bias.len() != l.output_dim {
                return Err(VprError::ShapeError {
                    expected: l.input_dim * l.output_dim,
                    actual: l.weights.len(),
                });
            }
            if l.input_dim == 0 || l.output_dim == 0 {
                return Err(VprError::InvalidConfig(
                    "layer dims must be positive".into(),
                ));
            }
        }
        for w in layers.windows(2) {
            if w[0].output_dim != w[1].input_dim {
                return Err(VprError::ShapeError {
                    expected: w[0].output_dim,
                    actual: w[1].input_dim,
                });
            }
        }
        Ok(Self { layers })
    }

    /// Seeded init: weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(
        input_dim: usize,
        hidden_dims: &[usize],
        output_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_for(seed, &[stream::INIT]);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden_dims);
        dims.push(output_dim);
        if dims.contains(&0) {
            return Err(VprError::InvalidConfig(
                "model dims must be positive".into(),
            ));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut layer = Layer::zeros(w[0], w[1]);
                for v in &mut layer.weights {
                    *v = rng.random_range(-bound..=bound);
                }
                layer
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.output_dim)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint(Sha256::digest(self.to_bytes()).into())
    }

    pub fn forward_cached(&self, raw: &[f64]) -> Result<ForwardCache> {
        if raw.len() != self.input_dim() {
            return Err(VprError::ShapeError {
                expected: self.input_dim(),
                actual: raw.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = raw.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(&current);
            if k < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut current, z));
        }
        let norm = l2_norm(&current);
        let denom = if norm < NORM_EPS {
            norm + NORM_EPS
        } else {
            norm
        };
        let output = current.iter().map(|v| v / denom).collect();
        Ok(ForwardCache {
            inputs,
            pre_norm: current,
            norm,
            output,
        })
    }

    pub fn forward(&self, raw: &RawFeatures) -> Result<Descriptor> {
        Ok(self.forward_cached(raw.as_slice())?.descriptor())
    }

    /// Gradient of `<upstream, forward(raw)>` with respect to every parameter.
    pub fn backward(&self, raw: &RawFeatures, upstream: &[f64]) -> Result<ParamGradients> {
        let cache = self.forward_cached(raw.as_slice())?;
        let mut grads = ParamGradients::zeros_like(self);
        self.backward_into(&cache, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates the gradient of `<upstream, output>` into `grads`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut ParamGradients,
    ) -> Result<()> {
        if upstream.len() != self.output_dim() {
            return Err(VprError::ShapeError {
                expected: self.output_dim(),
                actual: upstream.len(),
            });
        }
        if upstream.iter().all(|&u| u == 0.0) {
            return Ok(());
        }
        // d output / d pre_norm applied to upstream: (I - f f^T) u / |z|
        let mut delta: Vec<f64> = if cache.norm >= NORM_EPS {
            let dot: f64 = cache.output.iter().zip(upstream).map(|(f, u)| f * u).sum();
            upstream
                .iter()
                .zip(&cache.output)
                .map(|(u, f)| (u - f * dot) / cache.norm)
                .collect()
        } else if cache.norm > 0.0 {
            let denom = cache.norm + NORM_EPS;
            let zu: f64 = cache
                .pre_norm
                .iter()
                .zip(upstream)
                .map(|(z, u)| z * u)
                .sum();
            upstream
                .iter()
                .zip(&cache.pre_norm)
                .map(|(u, z)| u / denom - z * zu / (cache.norm * denom * denom))
                .collect()
        } else {
            upstream.iter().map(|u| u / NORM_EPS).collect()
        };

        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &cache.inputs[k];
            let g = &mut grads.layers[k];
            for (i, &x) in input.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let row = &mut g.weights[i * layer.output_dim..(i + 1) * layer.output_dim];
                for (gw, d) in row.iter_mut().zip(&delta) {
                    *gw += x * d;
                }
            }
            g.bias.iter_mut().zip(&delta).for_each(|(gb, d)| *gb += d);
            if k == 0 {
                break;
            }
            // back through the affine map, then through tanh of the previous layer
            delta = input
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let row = &layer.weights[i * layer.output_dim..(i + 1) * layer.output_dim];
                    let s: f64 = row.iter().zip(&delta).map(|(w, d)| w * d).sum();
                    s * (1.0 - a * a)
                })
                .collect();
        }
        Ok(())
    }

    /// Plain gradient-descent step.
    pub fn apply_gradients(&mut self, grads: &ParamGradients, learning_rate: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weights
                .iter_mut()
                .zip(&g.weights)
                .for_each(|(w, d)| *w -= learning_rate * d);
            l.bias
                .iter_mut()
                .zip(&g.bias)
                .for_each(|(b, d)| *b -= learning_rate * d);
        }
    }

    /// Serialized form: magic `VPRH`, version u16, activation u8, layer count
    /// u32, input dim u32, one output dim u32 per layer, then for each layer
    /// the weights followed by the bias as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.parameter_count());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.push(ACTIVATION_TANH);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.input_dim() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.output_dim as u32).to_le_bytes());
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const FIXED: usize = 4 + 2 + 1 + 4 + 4;
        let actual = bytes.len() as u64;
        if bytes.len() < 4 {
            return Err(VprError::TruncatedError {
                expected: FIXED as u64,
                actual,
            });
        }
        if &bytes[..4] != MODEL_MAGIC {
            return Err(VprError::FormatError(format!(
                "bad model magic {:02x?}",
                &bytes[..4]
            )));
        }
        if bytes.len() < FIXED {
            return Err(VprError::TruncatedError {
                expected: FIXED as u64,
                actual,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != MODEL_VERSION {
            return Err(VprError::FormatError(format!(
                "unsupported model version {version}"
            )));
        }
        if bytes[6] != ACTIVATION_TANH {
            return Err(VprError::FormatError(format!(
                "unknown activation code {}",
                bytes[6]
            )));
        }
        let read_u32 =
            |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let n_layers = read_u32(7);
        let input_dim = read_u32(11);
        if n_layers == 0 || input_dim == 0 {
            return Err(VprError::FormatError("empty model header".into()));
        }
        let header_len = FIXED as u64 + 4 * n_layers as u64;
        if actual < header_len {
            return Err(VprError::TruncatedError {
                expected: header_len,
                actual,
            });
        }
        let mut dims = vec![input_dim];
        for k in 0..n_layers {
            dims.push(read_u32(FIXED + 4 * k));
        }
        if dims.contains(&0) {
            return Err(VprError::FormatError("zero layer dimension".into()));
        }
        let params: u64 = dims.windows(2).map(|w| (w[0] * w[1] + w[1]) as u64).sum();
        let expected = header_len + 8 * params;
        if actual < expected {
            return Err(VprError::TruncatedError { expected, actual });
        }
        if actual > expected {
            return Err(VprError::FormatError(format!(
                "{} trailing bytes after model parameters",
                actual - expected
            )));
        }
        let mut pos = header_len as usize;
        let mut take = |n: usize| -> Vec<f64> {
            let v = bytes[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 8 * n;
            v
        };
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                input_dim: w[0],
                output_dim: w[1],
                weights: take(w[0] * w[1]),
                bias: take(w[1]),
            })
            .collect();
        Self::from_layers(layers)
    }
}

pub fn init_model(hidden_dims: &[usize], output_dim: usize, seed: u64) -> Result<EmbeddingModel> {
    EmbeddingModel::init(RAW_DIM, hidden_dims, output_dim, seed)
}

pub fn save_model(model: &EmbeddingModel, path: &Path) -> Result<()> {
    crate::config::write_atomic(path, &model.to_bytes())
}

pub fn load_model(path: &Path) -> Result<EmbeddingModel> {
    EmbeddingModel::from_bytes(&std::fs::read(path)?)
}

/// Backbone plus head for one image.
pub fn embed(model: &EmbeddingModel, image: &RgbImage) -> Result<Descriptor> {
    model.forward(&extract_raw(image))
}
