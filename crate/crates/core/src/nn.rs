//! Dense-network engine: stacks of fully connected layers with exact
//! reverse-mode gradients, the gradient-reversal layer, cross-entropy
//! losses, momentum SGD with exponential learning-rate decay, and the
//! model file format.

use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded;
use crate::scalar::Real;

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Magic bytes at the start of every model file.
pub const MODEL_MAGIC: &[u8; 8] = b"DSPKNN1\0";

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("non-finite gradient in {0}; step rejected")]
    NonFinite(String),
    #[error("bad model file: {0}")]
    Format(String),
    #[error("model file truncated inside tensor {0}")]
    Truncated(String),
    #[error("model checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
    /// Only valid on the last layer of a stack.
    Softmax,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
            Activation::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "linear" => Some(Activation::Linear),
            "softmax" => Some(Activation::Softmax),
            _ => None,
        }
    }
}

/// `y = act(x W + b)` with `W` stored `[in x out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    pub activation: Activation,
}

impl<T: Real> DenseLayer<T> {
    /// He-uniform for relu layers, Glorot-uniform otherwise; zero bias.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = match activation {
            Activation::Relu => (6.0 / fan_in as f64).sqrt(),
            _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        let weights = Array2::from_shape_fn((fan_in, fan_out), |_| T::lit(rng.random_range(-limit..limit)));
        Self {
            weights,
            bias: Array1::zeros(fan_out),
            activation,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weights: Array2::eye(n),
            bias: Array1::zeros(n),
            activation: Activation::Linear,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|z| (z - max).exp());
        let total = row.sum();
        row.mapv_inplace(|e| e / total);
    }
    out
}

/// Intermediate values kept by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
    pub output: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Real> MlpGrads<T> {
    pub fn scaled(mut self, k: T) -> Self {
        for l in &mut self.layers {
            l.weights.mapv_inplace(|g| g * k);
            l.bias.mapv_inplace(|g| g * k);
        }
        self
    }

    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn new(layers: Vec<DenseLayer<T>>) -> Result<Self, NnError> {
        let mlp = Self { layers };
        mlp.check()?;
        Ok(mlp)
    }

    /// Builds `dims[0] -> dims[1] -> ... -> dims[n]`, relu on hidden layers
    /// and `last` on the final one.
    pub fn init<R: Rng>(dims: &[usize], last: Activation, rng: &mut R) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { Activation::Relu };
                DenseLayer::init(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    fn check(&self) -> Result<(), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::Shape("empty layer stack".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(NnError::Shape(format!("layer {i}: bias length {} != {}", l.bias.len(), l.output_dim())));
            }
            if l.activation == Activation::Softmax && i + 1 != self.layers.len() {
                return Err(NnError::Shape(format!("layer {i}: softmax only allowed on the last layer")));
            }
            if i > 0 && self.layers[i - 1].output_dim() != l.input_dim() {
                return Err(NnError::Shape(format!(
                    "layer {i}: input {} does not match previous output {}",
                    l.input_dim(),
                    self.layers[i - 1].output_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<MlpCache<T>, NnError> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::Shape(format!("input has {} columns, expected {}", x.ncols(), self.input_dim())));
        }
        if x.nrows() == 0 {
            return Err(NnError::Shape("empty batch".into()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let z = h.dot(&layer.weights) + &layer.bias;
            let a = match layer.activation {
                Activation::Relu => z.mapv(|v| v.max(T::zero())),
                Activation::Linear => z.clone(),
                Activation::Softmax => softmax(&z),
            };
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        Ok(MlpCache { inputs, pre, output: h })
    }

    pub fn predict(&self, x: ArrayView2<T>) -> Result<Array2<T>, NnError> {
        Ok(self.forward(x)?.output)
    }

    /// Reverse pass.
    ///
    /// `d_top` is the gradient with respect to the last layer's logits when
    /// that layer is softmax (as returned by [`cross_entropy`]), and with
    /// respect to its output otherwise. Returns parameter gradients and,
    /// when requested, the gradient with respect to the stack input.
    pub fn backward(&self, cache: &MlpCache<T>, d_top: ArrayView2<T>, want_input_grad: bool) -> (MlpGrads<T>, Option<Array2<T>>) {
        let n = self.layers.len();
        let mut grads: Vec<Option<LayerGrads<T>>> = vec![None; n];
        let mut d = d_top.to_owned();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            if layer.activation == Activation::Relu {
                ndarray::Zip::from(&mut d)
                    .and(&cache.pre[i])
                    .for_each(|g, &z| {
                        if z <= T::zero() {
                            *g = T::zero();
                        }
                    });
            }
            let dw = cache.inputs[i].t().dot(&d);
            let db = d.sum_axis(Axis(0));
            grads[i] = Some(LayerGrads { weights: dw, bias: db });
            if i > 0 || want_input_grad {
                d = d.dot(&layer.weights.t());
            }
        }
        let layers = grads.into_iter().map(|g| g.expect("every layer visited")).collect();
        (MlpGrads { layers }, want_input_grad.then_some(d))
    }

    /// Gradient with respect to the input only, for a frozen stack.
    pub fn input_gradient(&self, cache: &MlpCache<T>, d_top: ArrayView2<T>) -> Array2<T> {
        let mut d = d_top.to_owned();
        for i in (0..self.layers.len()).rev() {
            if self.layers[i].activation == Activation::Relu {
                ndarray::Zip::from(&mut d).and(&cache.pre[i]).for_each(|g, &z| {
                    if z <= T::zero() {
                        *g = T::zero();
                    }
                });
            }
            d = d.dot(&self.layers[i].weights.t());
        }
        d
    }

    /// Parameters flattened in serialization order.
    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    /// FNV-1a 64 over the little-endian `f64` bytes of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h = FnvHasher::default();
        for v in self.flatten() {
            h.write(&v.to_f64_lossless().to_le_bytes());
        }
        h.finish()
    }
}

/// Identity forward, negated gradient backward.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientReversal;

impl GradientReversal {
    pub fn forward<T: Clone>(&self, x: ArrayView2<T>) -> Array2<T> {
        x.to_owned()
    }

    pub fn backward<T: Real>(&self, upstream: ArrayView2<T>) -> Array2<T> {
        upstream.mapv(|g| -g)
    }
}

/// Training targets for [`cross_entropy`].
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a, T> {
    /// Sparse class indices (condition head).
    Sparse(&'a [usize]),
    /// One-hot rows (speaker head).
    Categorical(ArrayView2<'a, T>),
}

/// Mean negative log-likelihood over the batch and its gradient with
/// respect to the softmax logits, `(probs - onehot) / batch`.
pub fn cross_entropy<T: Real>(probs: ArrayView2<T>, targets: Targets<'_, T>) -> Result<(T, Array2<T>), NnError> {
    let (batch, classes) = probs.dim();
    if batch == 0 {
        return Err(NnError::Shape("empty batch".into()));
    }
    let onehot = match targets {
        Targets::Sparse(labels) => {
            if labels.len() != batch {
                return Err(NnError::Shape(format!("{} labels for a batch of {batch}", labels.len())));
            }
            let mut m = Array2::zeros((batch, classes));
            for (r, &l) in labels.iter().enumerate() {
                if l >= classes {
                    return Err(NnError::Label { label: l, classes });
                }
                m[[r, l]] = T::one();
            }
            m
        }
        Targets::Categorical(m) => {
            if m.dim() != (batch, classes) {
                return Err(NnError::Shape(format!("targets {:?} vs probs {:?}", m.dim(), probs.dim())));
            }
            m.to_owned()
        }
    };
    let floor = T::lit(PROB_FLOOR);
    let nb = T::from_count(batch);
    let loss = -ndarray::Zip::from(&probs)
        .and(&onehot)
        .fold(T::zero(), |acc, &p, &y| acc + y * p.max(floor).ln())
        / nb;
    let grad = (&probs - &onehot).mapv(|g| g / nb);
    Ok((loss, grad))
}

/// One-hot matrix for `labels` over `classes`.
pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Array2<T>, NnError> {
    let mut m = Array2::zeros((labels.len(), classes));
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(NnError::Label { label: l, classes });
        }
        m[[r, l]] = T::one();
    }
    Ok(m)
}

/// `lambda * l_cond - (1 - lambda) * l_spk`.
pub fn total_loss<T: Real>(l_cond: T, l_spk: T, lambda: T) -> T {
    lambda * l_cond - (T::one() - lambda) * l_spk
}

/// Layer sizes of the three blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub head_hidden: Vec<usize>,
    pub n_conditions: usize,
}

impl Default for Architecture {
    /// Encoder 38 -> 64 -> 128, heads 128 -> 64 -> out.
    fn default() -> Self {
        Self {
            input_dim: crate::corpus::FEATURE_DIM,
            encoder_hidden: vec![64],
            embedding_dim: 128,
            head_hidden: vec![64],
            n_conditions: 2,
        }
    }
}

impl Architecture {
    fn encoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.encoder_hidden);
        d.push(self.embedding_dim);
        d
    }

    fn head_dims(&self, out: usize) -> Vec<usize> {
        let mut d = vec![self.embedding_dim];
        d.extend(&self.head_hidden);
        d.push(out);
        d
    }

    /// A fresh speaker head with `n_speakers` outputs.
    pub fn speaker_head<T: Real>(&self, n_speakers: usize, seed: u64) -> Mlp<T> {
        Mlp::init(&self.head_dims(n_speakers), Activation::Softmax, &mut seeded(seed))
    }
}

/// Encoder, condition head and speaker head.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub encoder: Mlp<T>,
    pub cond_head: Mlp<T>,
    pub spk_head: Mlp<T>,
}

/// Outputs of [`NetworkParams::forward`].
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub encoder: MlpCache<T>,
    pub cond: MlpCache<T>,
    pub spk: MlpCache<T>,
}

impl<T> Forward<T> {
    pub fn embeddings(&self) -> &Array2<T> {
        &self.encoder.output
    }
    pub fn cond_probs(&self) -> &Array2<T> {
        &self.cond.output
    }
    pub fn spk_probs(&self) -> &Array2<T> {
        &self.spk.output
    }
}

const BLOCKS: [&str; 3] = ["encoder", "cond", "spk"];

impl<T: Real> NetworkParams<T> {
    pub fn init(arch: &Architecture, n_speakers: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let encoder = Mlp::init(&arch.encoder_dims(), Activation::Relu, &mut rng);
        let cond_head = Mlp::init(&arch.head_dims(arch.n_conditions), Activation::Softmax, &mut rng);
        let spk_head = Mlp::init(&arch.head_dims(n_speakers), Activation::Softmax, &mut rng);
        Self {
            encoder,
            cond_head,
            spk_head,
        }
    }

    pub fn new(encoder: Mlp<T>, cond_head: Mlp<T>, spk_head: Mlp<T>) -> Result<Self, NnError> {
        let p = Self {
            encoder,
            cond_head,
            spk_head,
        };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<(), NnError> {
        for m in [&self.encoder, &self.cond_head, &self.spk_head] {
            m.check()?;
        }
        let emb = self.encoder.output_dim();
        for (name, head) in [("cond", &self.cond_head), ("spk", &self.spk_head)] {
            if head.input_dim() != emb {
                return Err(NnError::Shape(format!(
                    "{name} head expects {} inputs, encoder emits {emb}",
                    head.input_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn n_speakers(&self) -> usize {
        self.spk_head.output_dim()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<Forward<T>, NnError> {
        let encoder = self.encoder.forward(x)?;
        let cond = self.cond_head.forward(encoder.output.view())?;
        let spk = self.spk_head.forward(GradientReversal.forward(encoder.output.view()).view())?;
        Ok(Forward { encoder, cond, spk })
    }

    fn blocks(&self) -> [(&'static str, &Mlp<T>); 3] {
        [
            (BLOCKS[0], &self.encoder),
            (BLOCKS[1], &self.cond_head),
            (BLOCKS[2], &self.spk_head),
        ]
    }

    /// Serializes to the model file layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let mut payload: Vec<u8> = Vec::new();
        for (block, mlp) in self.blocks() {
            for (i, l) in mlp.layers.iter().enumerate() {
                header.push_str(&format!(
                    "{block}.{i} {} {} {}\n",
                    l.input_dim(),
                    l.output_dim(),
                    l.activation.name()
                ));
                for v in l.weights.iter().chain(l.bias.iter()) {
                    payload.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
                }
            }
        }
        let mut h = FnvHasher::default();
        h.write(&payload);
        let mut out = Vec::with_capacity(8 + 4 + header.len() + payload.len() + 8);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&h.finish().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        if bytes.len() < 12 || &bytes[..8] != MODEL_MAGIC {
            return Err(NnError::Format("missing DSPKNN1 magic (wrong file type or version)".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = 12 + header_len;
        let header = bytes
            .get(12..header_end)
            .ok_or_else(|| NnError::Format("header truncated".into()))?;
        let header = std::str::from_utf8(header).map_err(|_| NnError::Format("header is not UTF-8".into()))?;

        let mut blocks: [Vec<DenseLayer<T>>; 3] = Default::default();
        let mut pos = header_end;
        let mut hasher = FnvHasher::default();
        for line in header.lines() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, rows, cols, act] = parts[..] else {
                return Err(NnError::Format(format!("bad header line {line:?}")));
            };
            let (block, index) = name
                .split_once('.')
                .ok_or_else(|| NnError::Format(format!("bad layer name {name:?}")))?;
            let b = BLOCKS
                .iter()
                .position(|&x| x == block)
                .ok_or_else(|| NnError::Format(format!("unknown block {block:?}")))?;
            if index.parse::<usize>().ok() != Some(blocks[b].len()) {
                return Err(NnError::Format(format!("layer {name} out of order")));
            }
            let parse_dim = |s: &str| {
                s.parse::<usize>()
                    .ok()
                    .filter(|&d| d > 0)
                    .ok_or_else(|| NnError::Format(format!("bad dimension {s:?} for {name}")))
            };
            let (rows, cols) = (parse_dim(rows)?, parse_dim(cols)?);
            let activation = Activation::parse(act).ok_or_else(|| NnError::Format(format!("unknown activation {act:?}")))?;
            let mut read = |count: usize, tensor: String| -> Result<Vec<T>, NnError> {
                let need = count.checked_mul(8).ok_or_else(|| NnError::Format(format!("{tensor} too large")))?;
                let chunk = bytes.get(pos..pos + need).ok_or(NnError::Truncated(tensor))?;
                hasher.write(chunk);
                pos += need;
                Ok(chunk
                    .chunks_exact(8)
                    .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                    .collect())
            };
            let w = read(rows * cols, format!("{name}.weight"))?;
            let bias = read(cols, format!("{name}.bias"))?;
            blocks[b].push(DenseLayer {
                weights: Array2::from_shape_vec((rows, cols), w).expect("sized above"),
                bias: Array1::from_vec(bias),
                activation,
            });
        }
        if bytes.len() < pos + 8 {
            return Err(NnError::Truncated("checksum".into()));
        }
        if bytes.len() != pos + 8 {
            return Err(NnError::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() as i64 - pos as i64 - 8
            )));
        }
        let stored = u64::from_le_bytes(bytes[pos..].try_into().expect("8 bytes"));
        let computed = hasher.finish();
        if stored != computed {
            return Err(NnError::Checksum { stored, computed });
        }
        let [enc, cond, spk] = blocks;
        Self::new(Mlp { layers: enc }, Mlp { layers: cond }, Mlp { layers: spk })
    }
}

pub fn save_model<T: Real>(params: &NetworkParams<T>, path: &Path) -> Result<(), NnError> {
    let io = |source| NnError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&params.to_bytes()).map_err(io)
}

pub fn load_model<T: Real>(path: &Path) -> Result<NetworkParams<T>, NnError> {
    let bytes = fs::read(path).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    NetworkParams::from_bytes(&bytes)
}

/// `lr(t) = starter_lr * decay_rate^(t / decay_steps)`, continuous (no staircase).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub starter_lr: f64,
    pub decay_steps: u64,
    pub decay_rate: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            starter_lr: 1e-9,
            decay_steps: 10_000,
            decay_rate: 0.96,
        }
    }
}

impl LrSchedule {
    /// Floored at the smallest positive normal `f64` so that the rate never
    /// underflows to zero on very long runs.
    pub fn lr(&self, step: u64) -> f64 {
        (self.starter_lr * self.decay_rate.powf(step as f64 / self.decay_steps as f64)).max(f64::MIN_POSITIVE)
    }
}

/// Momentum SGD: `v <- mu v - lr(t) g; theta <- theta + v; t <- t + 1`.
#[derive(Debug, Clone)]
pub struct MomentumSgd<T> {
    pub momentum: f64,
    pub schedule: LrSchedule,
    pub step: u64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> MomentumSgd<T> {
    pub fn new(momentum: f64, schedule: LrSchedule) -> Self {
        Self {
            momentum,
            schedule,
            step: 0,
            velocity: Vec::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// Applies one update to every layer of `params` (in order) using the
    /// matching `grads`. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Mlp<T>], grads: &[&MlpGrads<T>]) -> Result<(), NnError> {
        if params.len() != grads.len() {
            return Err(NnError::Shape(format!("{} parameter stacks, {} gradients", params.len(), grads.len())));
        }
        let mut tensors = 0usize;
        for (s, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.layers.len() != g.layers.len() {
                return Err(NnError::Shape(format!("stack {s}: layer count mismatch")));
            }
            for (i, (l, lg)) in p.layers.iter().zip(&g.layers).enumerate() {
                if l.weights.dim() != lg.weights.dim() || l.bias.dim() != lg.bias.dim() {
                    return Err(NnError::Shape(format!("stack {s} layer {i}: gradient shape mismatch")));
                }
                if !lg.weights.iter().chain(lg.bias.iter()).all(|v| v.is_finite()) {
                    return Err(NnError::NonFinite(format!("stack {s} layer {i}")));
                }
                tensors += 2;
            }
        }
        if self.velocity.len() != tensors {
            self.velocity = params
                .iter()
                .flat_map(|p| p.layers.iter().flat_map(|l| [vec![T::zero(); l.weights.len()], vec![T::zero(); l.bias.len()]]))
                .collect();
        }
        let lr = T::lit(self.current_lr());
        let mu = T::lit(self.momentum);
        let mut vel = self.velocity.iter_mut();
        for (p, g) in params.iter_mut().zip(grads) {
            for (l, lg) in p.layers.iter_mut().zip(&g.layers) {
                for (theta, grad) in [
                    (l.weights.as_slice_mut().expect("standard layout"), lg.weights.as_slice().expect("standard layout")),
                    (l.bias.as_slice_mut().expect("contiguous"), lg.bias.as_slice().expect("contiguous")),
                ] {
                    let v = vel.next().expect("velocity sized above");
                    for ((t, &gr), vi) in theta.iter_mut().zip(grad).zip(v.iter_mut()) {
                        *vi = mu * *vi - lr * gr;
                        *t = *t + *vi;
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}
