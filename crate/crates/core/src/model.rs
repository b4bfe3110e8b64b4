//! The occupancy probability model: a small perceptron over binary contexts.
//!
//! The network is `n_C -> 2 n_C (ReLU) [-> 2 n_C (ReLU)] -> 2 | 1`. With two
//! outputs `(a_occ, a_empty)` the occupancy probability is the softmax
//! `e^a_occ / (e^a_occ + e^a_empty)`; with one output it is `sigmoid(a)`.
//!
//! Inputs are binary, so the first layer is evaluated as a sum of the weight
//! columns of the set bits, in ascending bit order. Every reduction has a
//! fixed order, which makes `forward` bit-reproducible for a given input no
//! matter how the batch is split. Encoder and decoder depend on that.
//!
//! Coding runs in `f32`. Training keeps `f64` master weights, and the
//! gradient check harness also runs in `f64`.

use std::io::Write as _;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::context::{ContextHistogram, ContextVector, Counts};
use crate::entropy::{QuantizedDist, PROB_TOTAL};
use crate::variant::Variant;

/// Context lengths the model accepts.
pub const SUPPORTED_CONTEXT_LENGTHS: [usize; 4] = [100, 75, 50, 36];

const MODEL_MAGIC: &[u8; 8] = b"NNOCMDL1";
const MODEL_VERSION: u8 = 1;

/// Probabilities leaving `forward` are kept inside `[P_MIN, 1 - P_MIN]`.
pub const P_MIN: f32 = 1.0 / (1u32 << 24) as f32;
/// Probability clamp applied inside [`loss`].
pub const LOSS_P_MIN: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unsupported context length {0}")]
    UnsupportedContextLength(usize),
    #[error("context has {got} bits, model expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("probability {0} is outside (0, 1)")]
    DegenerateProbability(f64),
    #[error("training histogram is empty")]
    EmptyHistogram,
    #[error("histogram template {hist} does not match variant {variant}")]
    TemplateMismatch { hist: String, variant: Variant },
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
    #[error("parameters became non-finite during training")]
    NonFinite,
    #[error("corrupt model file: {0}")]
    CorruptModelFile(String),
    #[error("unsupported model format version {0}")]
    VersionMismatch(u8),
    #[error("model content hash mismatch")]
    HashMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutputArch {
    /// Two logits and a softmax.
    Softmax2,
    /// One logit and a sigmoid.
    Sigmoid1,
}

impl OutputArch {
    pub fn id(self) -> u8 {
        match self {
            OutputArch::Softmax2 => 0,
            OutputArch::Sigmoid1 => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(OutputArch::Softmax2),
            1 => Some(OutputArch::Sigmoid1),
            _ => None,
        }
    }

    pub fn outputs(self) -> usize {
        match self {
            OutputArch::Softmax2 => 2,
            OutputArch::Sigmoid1 => 1,
        }
    }
}

/// Fully connected layer, weights row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Float> Dense<T> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    fn cast<U: Float>(&self) -> Dense<U> {
        let c = |v: &T| U::from(*v).unwrap();
        Dense {
            inputs: self.inputs,
            outputs: self.outputs,
            weights: self.weights.iter().map(c).collect(),
            bias: self.bias.iter().map(c).collect(),
        }
    }

    /// `out = W x + b` for dense `x`, accumulating inputs in ascending order.
    fn apply(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        for (row, &b) in self.weights.chunks_exact(self.inputs).zip(&self.bias) {
            let mut acc = b;
            for (&w, &xi) in row.iter().zip(x) {
                acc = acc + w * xi;
            }
            out.push(acc);
        }
    }

    /// `out = W x + b` for binary `x` given by its set indices (ascending).
    fn apply_sparse(&self, active: &[usize], out: &mut Vec<T>) {
        out.clear();
        for (row, &b) in self.weights.chunks_exact(self.inputs).zip(&self.bias) {
            let mut acc = b;
            for &k in active {
                acc = acc + row[k];
            }
            out.push(acc);
        }
    }
}

/// Layer stack: hidden ReLU layers followed by the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub arch: OutputArch,
    pub layers: Vec<Dense<T>>,
}

/// Reusable activations for one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Scratch<T> {
    active: Vec<usize>,
    acts: Vec<Vec<T>>,
}

impl<T: Float + Send + Sync> Network<T> {
    /// All-zero parameters: every context maps to probability 1/2.
    pub fn zeros(n_c: usize, arch: OutputArch, hidden_layers: usize) -> Result<Self, ModelError> {
        if !SUPPORTED_CONTEXT_LENGTHS.contains(&n_c) {
            return Err(ModelError::UnsupportedContextLength(n_c));
        }
        assert!((1..=2).contains(&hidden_layers));
        let width = 2 * n_c;
        let mut layers = vec![Dense::zeros(n_c, width)];
        for _ in 1..hidden_layers {
            layers.push(Dense::zeros(width, width));
        }
        layers.push(Dense::zeros(width, arch.outputs()));
        Ok(Network { arch, layers })
    }

    /// Glorot-uniform weights, `U(-sqrt(6 / (fan_in + fan_out)), +...)`,
    /// drawn layer by layer, row-major, from ChaCha8 seeded with `seed`.
    /// Biases start at zero.
    pub fn init(n_c: usize, arch: OutputArch, hidden_layers: usize, seed: u64) -> Result<Self, ModelError> {
        let mut net = Self::zeros(n_c, arch, hidden_layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = T::from(rng.gen_range(-limit..limit)).unwrap();
            }
        }
        Ok(net)
    }

    pub fn context_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn cast<U: Float + Send + Sync>(&self) -> Network<U> {
        Network {
            arch: self.arch,
            layers: self.layers.iter().map(Dense::cast).collect(),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    fn check_len(&self, ctx: &ContextVector) -> Result<(), ModelError> {
        if ctx.len() != self.context_len() {
            return Err(ModelError::LengthMismatch {
                expected: self.context_len(),
                got: ctx.len(),
            });
        }
        Ok(())
    }

    /// Runs all layers; `scratch.acts[i]` holds layer `i`'s output
    /// (post-ReLU for hidden layers, raw logits for the last).
    fn run(&self, ctx: &ContextVector, scratch: &mut Scratch<T>) {
        scratch.active.clear();
        scratch.active.extend(ctx.active());
        scratch.acts.resize_with(self.layers.len(), Vec::new);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (prev, rest) = scratch.acts.split_at_mut(i);
            let out = &mut rest[0];
            if i == 0 {
                layer.apply_sparse(&scratch.active, out);
            } else {
                layer.apply(&prev[i - 1], out);
            }
            if i < last {
                for v in out.iter_mut() {
                    *v = v.max(T::zero());
                }
            }
        }
    }

    /// Logit difference `d` with `p_occupied = sigmoid(d)`.
    fn margin(&self, logits: &[T]) -> T {
        match self.arch {
            OutputArch::Softmax2 => logits[0] - logits[1],
            OutputArch::Sigmoid1 => logits[0],
        }
    }

    /// Unclamped occupancy probability.
    pub fn p_occupied(&self, ctx: &ContextVector, scratch: &mut Scratch<T>) -> Result<T, ModelError> {
        self.check_len(ctx)?;
        self.run(ctx, scratch);
        let d = self.margin(scratch.acts.last().unwrap());
        Ok(T::one() / (T::one() + (-d).exp()))
    }
}

impl Network<f32> {
    /// Occupancy probabilities, each strictly inside `(0, 1)`. Elements are
    /// independent, so any batching gives bit-identical results.
    pub fn forward(&self, batch: &[ContextVector]) -> Result<Vec<f32>, ModelError> {
        for ctx in batch {
            self.check_len(ctx)?;
        }
        let eval = |s: &mut Scratch<f32>, ctx: &ContextVector| {
            let p = self.p_occupied(ctx, s).expect("length checked");
            p.clamp(P_MIN, 1.0 - P_MIN)
        };
        if batch.len() < 64 {
            let mut s = Scratch::default();
            Ok(batch.iter().map(|c| eval(&mut s, c)).collect())
        } else {
            Ok(batch
                .par_iter()
                .with_min_len(32)
                .map_init(Scratch::default, eval)
                .collect())
        }
    }
}

/// Stable `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Network<f64> {
    /// Loss in bits of one context from its logit margin, with
    /// `ln p1 = -softplus(-d)` and `ln p0 = -softplus(d)`.
    fn context_loss(d: f64, c: Counts) -> f64 {
        (c.zeros as f64 * softplus(d) + c.ones as f64 * softplus(-d)) / std::f64::consts::LN_2
    }

    /// Occurrence-weighted loss in bits over `batch`.
    pub fn batch_loss(&self, batch: &[(ContextVector, Counts)]) -> Result<f64, ModelError> {
        let mut s = Scratch::default();
        let mut total = 0.0;
        for (ctx, c) in batch {
            self.check_len(ctx)?;
            self.run(ctx, &mut s);
            total += Self::context_loss(self.margin(s.acts.last().unwrap()), *c);
        }
        Ok(total)
    }

    /// Adds `d loss / d params` of one context to `grad`; returns its loss.
    fn backprop(&self, ctx: &ContextVector, c: Counts, s: &mut Scratch<f64>, grad: &mut Network<f64>) -> f64 {
        self.run(ctx, s);
        let last = self.layers.len() - 1;
        let d = self.margin(&s.acts[last]);
        let p1 = 1.0 / (1.0 + (-d).exp());
        let dd = (c.total() as f64 * p1 - c.ones as f64) / std::f64::consts::LN_2;
        let mut delta: Vec<f64> = match self.arch {
            OutputArch::Softmax2 => vec![dd, -dd],
            OutputArch::Sigmoid1 => vec![dd],
        };
        for i in (0..=last).rev() {
            let layer = &self.layers[i];
            let g = &mut grad.layers[i];
            for (o, &dv) in delta.iter().enumerate() {
                g.bias[o] += dv;
            }
            if i == 0 {
                for (o, &dv) in delta.iter().enumerate() {
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for &k in &s.active {
                        row[k] += dv;
                    }
                }
                break;
            }
            let input = &s.acts[i - 1];
            let mut next = vec![0.0; layer.inputs];
            for (o, &dv) in delta.iter().enumerate() {
                let w_row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let g_row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for j in 0..layer.inputs {
                    g_row[j] += dv * input[j];
                    next[j] += dv * w_row[j];
                }
            }
            // ReLU derivative of the layer below.
            for (n, &a) in next.iter_mut().zip(input) {
                if a <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
        Self::context_loss(d, c)
    }

    fn zeroed(&self) -> Network<f64> {
        Network {
            arch: self.arch,
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    /// Exact gradient of the occurrence-weighted loss (bits) over `batch`,
    /// and the loss itself. Contexts are reduced in fixed chunks of 256,
    /// summed in order, so the result is independent of the thread count.
    pub fn grad(&self, batch: &[(ContextVector, Counts)]) -> Result<(f64, Network<f64>), ModelError> {
        for (ctx, _) in batch {
            self.check_len(ctx)?;
        }
        let partials: Vec<(f64, Network<f64>)> = batch
            .par_chunks(256)
            .map(|chunk| {
                let mut g = self.zeroed();
                let mut s = Scratch::default();
                let loss = chunk
                    .iter()
                    .map(|(ctx, c)| self.backprop(ctx, *c, &mut s, &mut g))
                    .sum::<f64>();
                (loss, g)
            })
            .collect();
        let mut total = self.zeroed();
        let mut loss = 0.0;
        for (l, g) in partials {
            loss += l;
            for (t, v) in total.params_mut().zip(g.params()) {
                *t += *v;
            }
        }
        Ok((loss, total))
    }
}

/// `init_model(n_C, arch, seed)` with one hidden layer.
pub fn init_model(n_c: usize, arch: OutputArch, seed: u64) -> Result<Network<f32>, ModelError> {
    Network::init(n_c, arch, 1, seed)
}

/// Occurrence-weighted code length in bits:
/// `-sum(no0 * log2(1 - p1) + no1 * log2(p1))`. Probabilities are clamped to
/// `[1e-7, 1 - 1e-7]` after validation.
pub fn loss(p1: &[f64], counts: &[Counts]) -> Result<f64, ModelError> {
    assert_eq!(p1.len(), counts.len());
    let mut total = 0.0;
    for (&p, c) in p1.iter().zip(counts) {
        if !(p > 0.0 && p < 1.0) {
            return Err(ModelError::DegenerateProbability(p));
        }
        let p = p.clamp(LOSS_P_MIN, 1.0 - LOSS_P_MIN);
        total -= c.zeros as f64 * (1.0 - p).log2() + c.ones as f64 * p.log2();
    }
    Ok(total)
}

/// `c1 = clamp(round(p1 * 2^14), 1, 2^14 - 1)`, `c0 = 2^14 - c1`.
pub fn quantize(p1: f32) -> QuantizedDist {
    let scaled = (p1 * PROB_TOTAL as f32).round();
    let c1 = if scaled.is_nan() {
        PROB_TOTAL / 2
    } else {
        (scaled.max(1.0).min((PROB_TOTAL - 1) as f32)) as u32
    };
    QuantizedDist::from_c1(c1).expect("clamped counts are valid")
}

/// A network bound to the codec variant it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    variant: Variant,
    network: Network<f32>,
}

impl Model {
    pub fn new(variant: Variant, network: Network<f32>) -> Result<Self, ModelError> {
        let n_c = variant.context_len();
        let shape_ok = network.context_len() == n_c
            && network.arch == variant.arch()
            && network.hidden_layers() == variant.hidden_layers()
            && network.layers.iter().enumerate().all(|(i, l)| {
                let expect_in = if i == 0 { n_c } else { 2 * n_c };
                let expect_out = if i + 1 == network.layers.len() {
                    variant.arch().outputs()
                } else {
                    2 * n_c
                };
                l.inputs == expect_in
                    && l.outputs == expect_out
                    && l.weights.len() == l.inputs * l.outputs
                    && l.bias.len() == l.outputs
            });
        if !shape_ok {
            return Err(ModelError::CorruptModelFile(format!(
                "network shape does not match variant {variant}"
            )));
        }
        Ok(Model { variant, network })
    }

    /// Random initial model for `variant`.
    pub fn init(variant: Variant, seed: u64) -> Self {
        let net = Network::init(variant.context_len(), variant.arch(), variant.hidden_layers(), seed)
            .expect("variant context lengths are supported");
        Model {
            variant,
            network: net,
        }
    }

    /// All-zero model: probability 1/2 everywhere.
    pub fn uniform(variant: Variant) -> Self {
        let net = Network::zeros(variant.context_len(), variant.arch(), variant.hidden_layers())
            .expect("variant context lengths are supported");
        Model {
            variant,
            network: net,
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn network(&self) -> &Network<f32> {
        &self.network
    }

    pub fn param_count(&self) -> usize {
        self.network.param_count()
    }

    pub fn forward(&self, batch: &[ContextVector]) -> Result<Vec<f32>, ModelError> {
        self.network.forward(batch)
    }

    /// Coding distributions for `batch`.
    pub fn distributions(&self, batch: &[ContextVector]) -> Result<Vec<QuantizedDist>, ModelError> {
        Ok(self.forward(batch)?.into_iter().map(quantize).collect())
    }

    fn body_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.param_count());
        out.extend_from_slice(MODEL_MAGIC);
        out.push(MODEL_VERSION);
        out.push(self.variant.id());
        out.push(self.network.arch.id());
        out.extend_from_slice(&(self.network.context_len() as u16).to_le_bytes());
        out.push(self.network.layers.len() as u8);
        for l in &self.network.layers {
            out.extend_from_slice(&(l.inputs as u16).to_le_bytes());
            out.extend_from_slice(&(l.outputs as u16).to_le_bytes());
        }
        for l in &self.network.layers {
            for v in l.weights.iter().chain(&l.bias) {
                out.write_all(&v.to_le_bytes()).unwrap();
            }
        }
        out
    }

    /// 64-bit content hash recorded in the model trailer and in bitstreams.
    pub fn content_hash(&self) -> u64 {
        hash64(&self.body_bytes())
    }

    /// Serialized model: header, little-endian `f32` parameters (each layer's
    /// weights row-major, then its biases) and a 64-bit hash trailer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body_bytes();
        let h = hash64(&out);
        out.extend_from_slice(&h.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let corrupt = |m: &str| ModelError::CorruptModelFile(m.to_string());
        let fixed = 8 + 1 + 1 + 1 + 2 + 1;
        if bytes.len() < fixed {
            return Err(corrupt("truncated header"));
        }
        if &bytes[..8] != MODEL_MAGIC {
            return Err(corrupt("bad magic"));
        }
        if bytes[8] != MODEL_VERSION {
            return Err(ModelError::VersionMismatch(bytes[8]));
        }
        let variant = Variant::from_id(bytes[9]).ok_or_else(|| corrupt("unknown variant"))?;
        let arch = OutputArch::from_id(bytes[10]).ok_or_else(|| corrupt("unknown arch"))?;
        let n_c = u16::from_le_bytes([bytes[11], bytes[12]]) as usize;
        let n_layers = bytes[13] as usize;
        let dims_end = fixed + 4 * n_layers;
        if bytes.len() < dims_end {
            return Err(corrupt("truncated layer table"));
        }
        let dims: Vec<(usize, usize)> = bytes[fixed..dims_end]
            .chunks_exact(4)
            .map(|d| {
                (
                    u16::from_le_bytes([d[0], d[1]]) as usize,
                    u16::from_le_bytes([d[2], d[3]]) as usize,
                )
            })
            .collect();
        let n_params: usize = dims.iter().map(|(i, o)| i * o + o).sum();
        let body_len = dims_end + 4 * n_params;
        if bytes.len() != body_len + 8 {
            return Err(corrupt("file length does not match layer table"));
        }
        let stored = u64::from_le_bytes(bytes[body_len..].try_into().unwrap());
        if stored != hash64(&bytes[..body_len]) {
            return Err(ModelError::HashMismatch);
        }
        let mut floats = bytes[dims_end..body_len]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
        let layers = dims
            .iter()
            .map(|&(inputs, outputs)| Dense {
                inputs,
                outputs,
                weights: floats.by_ref().take(inputs * outputs).collect(),
                bias: floats.by_ref().take(outputs).collect(),
            })
            .collect::<Vec<_>>();
        if layers.first().map(|l| l.inputs) != Some(n_c) {
            return Err(corrupt("first layer width does not match n_C"));
        }
        Model::new(variant, Network { arch, layers })
    }
}

fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// ADAM with early stopping on validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 30_000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 5,
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be >= 1"));
        }
        if self.patience == 0 {
            return Err(ModelError::InvalidConfig("patience must be >= 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(ModelError::InvalidConfig("learning_rate must be > 0"));
        }
        Ok(())
    }
}

/// Per-epoch losses in bits per context occurrence. Epoch 0 is the initial
/// model (its train loss is measured, not accumulated during updates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_bits: f64,
    pub val_bits: f64,
    pub best_val_bits: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, cfg: &TrainConfig, params: &mut Network<f64>, grad: &Network<f64>, scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let step = cfg.learning_rate * bc2.sqrt() / bc1;
        for (((p, g), m), v) in params
            .params_mut()
            .zip(grad.params())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let g = g * scale;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= step * *m / (v.sqrt() + cfg.epsilon);
        }
    }
}

fn bits_per_occurrence(net: &Network<f64>, data: &[(ContextVector, Counts)]) -> Result<f64, ModelError> {
    let total: u64 = data.iter().map(|(_, c)| c.total()).sum();
    let loss: f64 = data
        .par_chunks(1024)
        .map(|chunk| net.batch_loss(chunk))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum();
    Ok(loss / total.max(1) as f64)
}

/// Trains a model for `variant` on `hist`; validation uses `val`, or `hist`
/// itself when `val` is empty. Batches are drawn from the unique contexts
/// after a seeded shuffle per epoch; each batch update minimizes its loss
/// per occurrence. Returns the parameters with the best validation loss.
pub fn train(
    hist: &ContextHistogram,
    val: &ContextHistogram,
    variant: Variant,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if hist.is_empty() {
        return Err(ModelError::EmptyHistogram);
    }
    for h in [hist, val] {
        if h.template() != variant.template() {
            return Err(ModelError::TemplateMismatch {
                hist: h.template().to_string(),
                variant,
            });
        }
    }
    let train_set = hist.sorted();
    let val_set = if val.is_empty() { train_set.clone() } else { val.sorted() };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init: Network<f64> = Network::init(
        variant.context_len(),
        variant.arch(),
        variant.hidden_layers(),
        rng.gen(),
    )?;
    let mut params = init;
    let n = params.param_count();
    let mut adam = Adam {
        m: vec![0.0; n],
        v: vec![0.0; n],
        t: 0,
    };

    let mut best = params.cast::<f32>();
    let mut best_val = bits_per_occurrence(&params, &val_set)?;
    let mut best_epoch = 0;
    let mut log = vec![EpochLog {
        epoch: 0,
        train_bits: bits_per_occurrence(&params, &train_set)?,
        val_bits: best_val,
        best_val_bits: best_val,
    }];
    log::debug!("epoch 0: val {best_val:.5} bits/occurrence");

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size.min(train_set.len()));
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_total = 0u64;
        for idx in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| train_set[i]));
            let occurrences: u64 = batch.iter().map(|(_, c)| c.total()).sum();
            let (loss, grad) = params.grad(&batch)?;
            adam.step(cfg, &mut params, &grad, 1.0 / occurrences as f64);
            if !params.is_finite() {
                return Err(ModelError::NonFinite);
            }
            epoch_loss += loss;
            epoch_total += occurrences;
        }
        let val_bits = bits_per_occurrence(&params, &val_set)?;
        if val_bits < best_val {
            best_val = val_bits;
            best = params.cast::<f32>();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        let entry = EpochLog {
            epoch,
            train_bits: epoch_loss / epoch_total as f64,
            val_bits,
            best_val_bits: best_val,
        };
        log::debug!(
            "epoch {epoch}: train {:.5} val {:.5} best {:.5}",
            entry.train_bits,
            entry.val_bits,
            entry.best_val_bits
        );
        log.push(entry);
        if stale >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        model: Model::new(variant, best)?,
        log,
        best_epoch,
    })
}
