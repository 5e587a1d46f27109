//! A laptop-sized stand-in for a fine-tuned backbone: a small feed-forward
//! network whose linear layers can carry LoRA adapters, a few synthetic
//! regression tasks, and a deterministic Adam trainer for the adapters.
//!
//! All math runs in `f64`. Weights are stored as `f32` tensors in a
//! [`Checkpoint`] with keys `layer<i>.weight` (out × in) and `layer<i>.bias`,
//! so task vectors extracted from toy models are ordinary checkpoints. An
//! adapter's layer names are the weight keys it modifies.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{fingerprint, Checkpoint, LoraAdapter, LoraLayer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vector::{apply, lora_delta, Coefficient};

/// Learning rate used for full-scale fine-tuning of the real backbone. The
/// toy default is much larger so runs converge in seconds.
pub const REAL_SCALE_LEARNING_RATE: f64 = 3e-5;
/// Step count of the full-scale fine-tuning runs.
pub const REAL_SCALE_STEPS: usize = 60_000;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const A_INIT_STD: f64 = 0.02;

/// Finite-difference step for [`gradient_check`].
pub const GRADCHECK_STEP: f64 = 1e-4;
const GRADCHECK_BATCH: usize = 8;
/// Below this combined gradient norm the relative error is reported as 0.
const GRADCHECK_GUARD: f64 = 1e-10;

const ACTIVATIONS_KEY: &str = "toy.activations";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

pub fn weight_key(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub fn bias_key(layer: usize) -> String {
    format!("layer{layer}.bias")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    specs: Vec<LayerSpec>,
    weights: Checkpoint,
}

impl ToyModel {
    pub fn new(specs: Vec<LayerSpec>, weights: Checkpoint) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        for (i, pair) in specs.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Config(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        for (i, spec) in specs.iter().enumerate() {
            for (key, shape) in [
                (weight_key(i), vec![spec.out_dim, spec.in_dim]),
                (bias_key(i), vec![spec.out_dim]),
            ] {
                let t = weights
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("missing tensor `{key}`")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        key: Some(key),
                        left: t.shape().to_vec(),
                        right: shape,
                    });
                }
            }
        }
        if weights.len() != 2 * specs.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, checkpoint has {}",
                2 * specs.len(),
                weights.len()
            )));
        }
        let mut weights = weights;
        weights.set_metadata(
            ACTIVATIONS_KEY,
            specs.iter().map(|s| s.activation.to_string()).collect::<Vec<_>>().join(","),
        );
        Ok(ToyModel { specs, weights })
    }

    /// `W = I`, `b = 0` for every layer.
    pub fn identity(dim: usize, activations: &[Activation]) -> Result<Self> {
        let specs = activations
            .iter()
            .map(|&activation| LayerSpec {
                in_dim: dim,
                out_dim: dim,
                activation,
            })
            .collect::<Vec<_>>();
        let mut weights = Checkpoint::new();
        for i in 0..specs.len() {
            let mut w = vec![0.0f32; dim * dim];
            for j in 0..dim {
                w[j * dim + j] = 1.0;
            }
            weights.insert(weight_key(i), Tensor::new(vec![dim, dim], w)?)?;
            weights.insert(bias_key(i), Tensor::zeros(vec![dim])?)?;
        }
        ToyModel::new(specs, weights)
    }

    /// Gaussian weights with standard deviation `1/sqrt(in)` and zero biases.
    pub fn random(specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Checkpoint::new();
        for (i, s) in specs.iter().enumerate() {
            let normal = Normal::new(0.0, 1.0 / (s.in_dim as f64).sqrt()).unwrap();
            let w = (0..s.in_dim * s.out_dim)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            weights.insert(weight_key(i), Tensor::new(vec![s.out_dim, s.in_dim], w)?)?;
            weights.insert(bias_key(i), Tensor::zeros(vec![s.out_dim])?)?;
        }
        ToyModel::new(specs, weights)
    }

    /// The configuration the acceptance experiments use: two 16-wide
    /// layers (tanh, then identity) initialised near the identity map, with
    /// seeded Gaussian perturbations of standard deviation 0.05.
    pub fn reference(seed: u64) -> Result<Self> {
        const DIM: usize = 16;
        let base = ToyModel::identity(DIM, &[Activation::Tanh, Activation::Identity])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.05).unwrap();
        let mut weights = base.weights.clone();
        for i in 0..2 {
            let w = base.weights.get(&weight_key(i)).unwrap();
            let data = w
                .data()
                .iter()
                .map(|&x| (x as f64 + normal.sample(&mut rng)) as f32)
                .collect();
            weights.insert(weight_key(i), Tensor::new(w.shape().to_vec(), data)?)?;
        }
        ToyModel::new(base.specs, weights)
    }

    /// Rebuilds a model from a checkpoint written by [`ToyModel::to_checkpoint`].
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let acts = ckpt
            .metadata()
            .get(ACTIVATIONS_KEY)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks `{ACTIVATIONS_KEY}` metadata")))?
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<Activation>>>()?;
        let specs = acts
            .iter()
            .enumerate()
            .map(|(i, &activation)| {
                let w = ckpt
                    .get(&weight_key(i))
                    .ok_or_else(|| Error::Config(format!("missing tensor `{}`", weight_key(i))))?;
                let (out_dim, in_dim) = w
                    .matrix_dims()
                    .ok_or_else(|| Error::Config(format!("`{}` is not a matrix", weight_key(i))))?;
                Ok(LayerSpec {
                    in_dim,
                    out_dim,
                    activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ToyModel::new(specs, ckpt)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.weights.clone()
    }

    pub fn weights(&self) -> &Checkpoint {
        &self.weights
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.specs.last().unwrap().out_dim
    }

    /// Same architecture, new weights (e.g. the result of applying a vector).
    pub fn with_weights(&self, weights: Checkpoint) -> Result<Self> {
        ToyModel::new(self.specs.clone(), weights)
    }

    /// Folds `adapter_scale · lora_delta(adapter)` into the weights.
    pub fn merge_adapter(&self, adapter: &LoraAdapter, adapter_scale: f64) -> Result<Self> {
        let delta = lora_delta(adapter)?.with_base_fingerprint(fingerprint(&self.weights));
        let merged = apply(&self.weights, &delta, Coefficient::new(adapter_scale)?, false)?;
        self.with_weights(merged)
    }

    fn dense_layers(&self) -> Vec<DenseLayer> {
        self.specs
            .iter()
            .enumerate()
            .map(|(i, s)| DenseLayer {
                w: self.weights.get(&weight_key(i)).unwrap().to_f64(),
                b: self.weights.get(&bias_key(i)).unwrap().to_f64(),
                in_dim: s.in_dim,
                activation: s.activation,
            })
            .collect()
    }

    fn check_adapter(&self, adapter: &LoraAdapter) -> Result<Vec<Option<Factors>>> {
        let mut by_layer: Vec<Option<Factors>> = vec![None; self.specs.len()];
        for (name, layer) in adapter.layers() {
            let idx = (0..self.specs.len())
                .find(|&i| weight_key(i) == *name)
                .ok_or_else(|| Error::UnknownKey(name.clone()))?;
            let s = &self.specs[idx];
            if layer.in_dim() != s.in_dim || layer.out_dim() != s.out_dim {
                return Err(Error::ShapeMismatch {
                    key: Some(name.clone()),
                    left: vec![layer.out_dim(), layer.in_dim()],
                    right: vec![s.out_dim, s.in_dim],
                });
            }
            by_layer[idx] = Some(Factors {
                a: layer.a_factor.to_f64(),
                b: layer.b_factor.to_f64(),
                rank: adapter.rank(),
            });
        }
        Ok(by_layer)
    }
}

#[derive(Debug, Clone)]
struct DenseLayer {
    w: Vec<f64>,
    b: Vec<f64>,
    in_dim: usize,
    activation: Activation,
}

/// LoRA factors for one layer, row-major: `a` is rank × in, `b` is out × rank.
#[derive(Debug, Clone)]
struct Factors {
    a: Vec<f64>,
    b: Vec<f64>,
    rank: usize,
}

/// Per-layer intermediates kept for backpropagation.
struct LayerCache {
    input: Vec<f64>,
    /// `A · input`, empty when the layer has no adapter.
    projected: Vec<f64>,
    output: Vec<f64>,
}

/// `c` is the combined adapter multiplier `adapter_scale · lora_alpha / rank`.
/// With `c == 0` the adapter path is skipped entirely.
fn forward_cached(
    layers: &[DenseLayer],
    factors: &[Option<Factors>],
    c: f64,
    x: &[f64],
) -> Vec<LayerCache> {
    let mut caches: Vec<LayerCache> = Vec::with_capacity(layers.len());
    let mut h = x.to_vec();
    for (layer, f) in layers.iter().zip(factors) {
        let mut z = layer.b.clone();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
            *zo += row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>();
        }
        let mut projected = Vec::new();
        if let (Some(f), true) = (f, c != 0.0) {
            projected = (0..f.rank)
                .map(|r| {
                    f.a[r * layer.in_dim..(r + 1) * layer.in_dim]
                        .iter()
                        .zip(&h)
                        .map(|(a, x)| a * x)
                        .sum::<f64>()
                })
                .collect();
            for (o, zo) in z.iter_mut().enumerate() {
                let brow = &f.b[o * f.rank..(o + 1) * f.rank];
                *zo += c * brow.iter().zip(&projected).map(|(b, p)| b * p).sum::<f64>();
            }
        }
        let output: Vec<f64> = z.into_iter().map(|v| layer.activation.apply(v)).collect();
        caches.push(LayerCache {
            input: std::mem::replace(&mut h, output.clone()),
            projected,
            output,
        });
    }
    caches
}

/// Accumulates `dL/dA`, `dL/dB` for one sample given `dL/dy`.
fn backward_into(
    layers: &[DenseLayer],
    factors: &[Option<Factors>],
    c: f64,
    caches: &[LayerCache],
    mut grad_out: Vec<f64>,
    grads: &mut [Option<Factors>],
) {
    for idx in (0..layers.len()).rev() {
        let layer = &layers[idx];
        let cache = &caches[idx];
        let dz: Vec<f64> = grad_out
            .iter()
            .zip(&cache.output)
            .map(|(g, &y)| g * layer.activation.derivative_from_output(y))
            .collect();

        let mut grad_in = vec![0.0; layer.in_dim];
        for (o, &d) in dz.iter().enumerate() {
            let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (gi, w) in grad_in.iter_mut().zip(row) {
                *gi += w * d;
            }
        }

        if let (Some(f), Some(g), false) = (&factors[idx], &mut grads[idx], cache.projected.is_empty()) {
            let rank = f.rank;
            // dL/dB[o, r] = c · dz[o] · (A h)[r]
            for (o, &d) in dz.iter().enumerate() {
                for r in 0..rank {
                    g.b[o * rank + r] += c * d * cache.projected[r];
                }
            }
            // u = c · Bᵀ dz ; dL/dA[r, i] = u[r] · h[i] ; dL/dh += Aᵀ u
            let u: Vec<f64> = (0..rank)
                .map(|r| c * dz.iter().enumerate().map(|(o, d)| f.b[o * rank + r] * d).sum::<f64>())
                .collect();
            for (r, &ur) in u.iter().enumerate() {
                let arow = &f.a[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (i, &hi) in cache.input.iter().enumerate() {
                    g.a[r * layer.in_dim + i] += ur * hi;
                }
                for (gi, a) in grad_in.iter_mut().zip(arow) {
                    *gi += a * ur;
                }
            }
        }
        grad_out = grad_in;
    }
}

/// Mean over samples of `‖y − t‖²`, with gradients of that loss w.r.t. the
/// LoRA factors when `grads` is given.
fn batch_loss(
    layers: &[DenseLayer],
    factors: &[Option<Factors>],
    c: f64,
    batch: &[Sample],
    mut grads: Option<&mut [Option<Factors>]>,
) -> f64 {
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for s in batch {
        let caches = forward_cached(layers, factors, c, &s.input);
        let y = &caches.last().unwrap().output;
        let resid: Vec<f64> = y.iter().zip(&s.target).map(|(y, t)| y - t).collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>() / n;
        if let Some(g) = grads.as_deref_mut() {
            let grad_out = resid.iter().map(|r| 2.0 * r / n).collect();
            backward_into(layers, factors, c, &caches, grad_out, g);
        }
    }
    loss
}

fn zero_grads(factors: &[Option<Factors>]) -> Vec<Option<Factors>> {
    factors
        .iter()
        .map(|f| {
            f.as_ref().map(|f| Factors {
                a: vec![0.0; f.a.len()],
                b: vec![0.0; f.b.len()],
                rank: f.rank,
            })
        })
        .collect()
}

/// Runs the model on one input. With `adapter_scale == 0` (or no adapter)
/// this is exactly the base model.
pub fn forward(
    model: &ToyModel,
    x: &Tensor,
    adapter: Option<&LoraAdapter>,
    adapter_scale: f64,
) -> Result<Tensor> {
    if x.numel() != model.input_dim() || x.rank() != 1 {
        return Err(Error::ShapeMismatch {
            key: None,
            left: x.shape().to_vec(),
            right: vec![model.input_dim()],
        });
    }
    let y = forward_f64(model, &x.to_f64(), adapter, adapter_scale)?;
    Tensor::from_f64(vec![y.len()], &y)
}

pub fn forward_f64(
    model: &ToyModel,
    x: &[f64],
    adapter: Option<&LoraAdapter>,
    adapter_scale: f64,
) -> Result<Vec<f64>> {
    if x.len() != model.input_dim() {
        return Err(Error::DimMismatch {
            expected: model.input_dim(),
            found: x.len(),
        });
    }
    let layers = model.dense_layers();
    let (factors, c) = match adapter {
        Some(a) => (model.check_adapter(a)?, adapter_scale * a.scaling()),
        None => (vec![None; layers.len()], 0.0),
    };
    let caches = forward_cached(&layers, &factors, c, x);
    Ok(caches.into_iter().last().unwrap().output)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    Identity,
    /// Rotates every consecutive coordinate pair by this many degrees; an
    /// odd trailing coordinate is left alone.
    Rotation { degrees: f64 },
    /// Multiplies coordinate `i` by `factors[i % factors.len()]`.
    Scaling { factors: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// A seeded regression task on `[-1, 1]^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub task_id: String,
    pub kind: TaskKind,
    pub dim: usize,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("task dimension must be positive".into()));
        }
        if let TaskKind::Scaling { factors } = &kind {
            if factors.is_empty() || factors.iter().any(|f| !f.is_finite()) {
                return Err(Error::Config("scaling needs finite factors".into()));
            }
        }
        let task_id = match &kind {
            TaskKind::Identity => "identity".to_string(),
            TaskKind::Rotation { degrees } => format!("rotation:{degrees}"),
            TaskKind::Scaling { factors } => format!(
                "scaling:{}",
                factors.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
            ),
        };
        Ok(SyntheticTask {
            task_id,
            kind,
            dim,
            seed,
        })
    }

    /// Parses a preset: `identity`, `rotation:<degrees>`, `scaling:<f>[,<f>..]`.
    pub fn preset(name: &str, dim: usize, seed: u64) -> Result<Self> {
        let (head, arg) = name.split_once(':').unwrap_or((name, ""));
        let bad = |e: String| Error::Config(format!("task `{name}`: {e}"));
        let kind = match head {
            "identity" => TaskKind::Identity,
            "rotation" => TaskKind::Rotation {
                degrees: arg.parse().map_err(|e| bad(format!("{e}")))?,
            },
            "scaling" => TaskKind::Scaling {
                factors: arg
                    .split(',')
                    .map(|f| f.trim().parse().map_err(|e| bad(format!("{e}"))))
                    .collect::<Result<_>>()?,
            },
            _ => return Err(bad("expected identity, rotation:<deg> or scaling:<f,..>".into())),
        };
        SyntheticTask::new(kind, dim, seed)
    }

    pub fn target(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            TaskKind::Identity => x.to_vec(),
            TaskKind::Rotation { degrees } => {
                let (s, c) = degrees.to_radians().sin_cos();
                let mut y = x.to_vec();
                for pair in y.chunks_exact_mut(2) {
                    let (a, b) = (pair[0], pair[1]);
                    pair[0] = c * a - s * b;
                    pair[1] = s * a + c * b;
                }
                y
            }
            TaskKind::Scaling { factors } => x
                .iter()
                .enumerate()
                .map(|(i, v)| v * factors[i % factors.len()])
                .collect(),
        }
    }

    /// Sample stream keyed by `seed`. Inputs are `f32`-representable.
    pub fn sampler(&self, seed: u64) -> Sampler<'_> {
        Sampler {
            task: self,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The first `n` samples of the task's own evaluation stream.
    pub fn samples(&self, n: usize) -> Vec<Sample> {
        self.sampler(self.seed).take(n).collect()
    }
}

pub struct Sampler<'a> {
    task: &'a SyntheticTask,
    rng: ChaCha8Rng,
}

impl Iterator for Sampler<'_> {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        let input: Vec<f64> = (0..self.task.dim)
            .map(|_| self.rng.random_range(-1.0f32..=1.0) as f64)
            .collect();
        let target = self.task.target(&input);
        Some(Sample { input, target })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Toy default `1e-2`; see [`REAL_SCALE_LEARNING_RATE`] for full scale.
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            steps: 2000,
            batch_size: 32,
            lora_rank: 16,
            lora_alpha: 16.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ToyModel) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be positive".into()));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(Error::Config("lora_alpha must be positive".into()));
        }
        let min_dim = model
            .specs
            .iter()
            .map(|s| s.in_dim.min(s.out_dim))
            .min()
            .unwrap();
        if self.lora_rank > min_dim {
            return Err(Error::Config(format!(
                "lora_rank {} exceeds the smallest layer dimension {min_dim}",
                self.lora_rank
            )));
        }
        Ok(())
    }
}

/// Seeded adapter on every linear layer: `A ~ N(0, 0.02²)`, `B = 0`.
pub fn init_adapter(model: &ToyModel, rank: usize, lora_alpha: f64, seed: u64) -> Result<LoraAdapter> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_adapter(model, rank, lora_alpha, &mut rng, A_INIT_STD, 0.0)
}

/// Adapter with both factors Gaussian, for gradient checks away from `B = 0`.
pub fn random_adapter(model: &ToyModel, rank: usize, lora_alpha: f64, seed: u64, std: f64) -> Result<LoraAdapter> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_adapter(model, rank, lora_alpha, &mut rng, std, std)
}

fn build_adapter(
    model: &ToyModel,
    rank: usize,
    lora_alpha: f64,
    rng: &mut ChaCha8Rng,
    a_std: f64,
    b_std: f64,
) -> Result<LoraAdapter> {
    let mut gauss = |n: usize, std: f64| -> Vec<f32> {
        if std == 0.0 {
            return vec![0.0; n];
        }
        let normal = Normal::new(0.0, std).unwrap();
        (0..n).map(|_| normal.sample(rng) as f32).collect()
    };
    let mut layers = BTreeMap::new();
    for (i, s) in model.specs.iter().enumerate() {
        let a = Tensor::new(vec![rank, s.in_dim], gauss(rank * s.in_dim, a_std))?;
        let b = Tensor::new(vec![s.out_dim, rank], gauss(s.out_dim * rank, b_std))?;
        layers.insert(weight_key(i), LoraLayer { a_factor: a, b_factor: b });
    }
    Ok(LoraAdapter::new(layers, rank, lora_alpha)?.with_base_fingerprint(fingerprint(&model.weights)))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: i32) {
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

fn training_stream_seed(cfg_seed: u64, task_seed: u64) -> u64 {
    cfg_seed ^ task_seed.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15
}

/// Trains a LoRA adapter on every linear layer with the base weights frozen.
///
/// Adam on the mean squared error; `A` starts from a seeded Gaussian and `B`
/// from zeros, so zero steps yields a zero delta. Fully deterministic given
/// the model, the task and `cfg`.
pub fn train_lora(model: &ToyModel, task: &SyntheticTask, cfg: &TrainConfig) -> Result<LoraAdapter> {
    train_lora_with_history(model, task, cfg).map(|(adapter, _)| adapter)
}

/// Like [`train_lora`], also returning the per-step batch loss.
pub fn train_lora_with_history(
    model: &ToyModel,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<(LoraAdapter, Vec<f64>)> {
    cfg.validate(model)?;
    if task.dim != model.input_dim() || task.dim != model.output_dim() {
        return Err(Error::DimMismatch {
            expected: model.input_dim(),
            found: task.dim,
        });
    }
    let init = init_adapter(model, cfg.lora_rank, cfg.lora_alpha, cfg.seed)?;
    let layers = model.dense_layers();
    let mut factors = model.check_adapter(&init)?;
    let c = init.scaling();

    let mut optimizers: Vec<Option<(Adam, Adam)>> = factors
        .iter()
        .map(|f| f.as_ref().map(|f| (Adam::new(f.a.len()), Adam::new(f.b.len()))))
        .collect();
    let mut stream = task.sampler(training_stream_seed(cfg.seed, task.seed));
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let batch: Vec<Sample> = stream.by_ref().take(cfg.batch_size).collect();
        let mut grads = zero_grads(&factors);
        let loss = batch_loss(&layers, &factors, c, &batch, Some(&mut grads));
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        history.push(loss);
        for ((f, g), opt) in factors.iter_mut().zip(&grads).zip(&mut optimizers) {
            if let (Some(f), Some(g), Some((opt_a, opt_b))) = (f, g, opt) {
                opt_a.step(&mut f.a, &g.a, cfg.learning_rate, step as i32);
                opt_b.step(&mut f.b, &g.b, cfg.learning_rate, step as i32);
            }
        }
    }

    let mut layers_out = BTreeMap::new();
    for (i, f) in factors.into_iter().enumerate() {
        let f = f.expect("every layer is adapted");
        let s = &model.specs[i];
        let a = Tensor::from_f64(vec![f.rank, s.in_dim], &f.a)?;
        let b = Tensor::from_f64(vec![s.out_dim, f.rank], &f.b)?;
        if a.has_non_finite() || b.has_non_finite() {
            return Err(Error::Divergence {
                step: cfg.steps,
                loss: f64::NAN,
            });
        }
        layers_out.insert(weight_key(i), LoraLayer { a_factor: a, b_factor: b });
    }
    let adapter = LoraAdapter::new(layers_out, cfg.lora_rank, cfg.lora_alpha)?
        .with_base_fingerprint(fingerprint(&model.weights));
    Ok((adapter, history))
}

/// Mean over the task's first `n` samples of `‖model(x) − target‖²`.
pub fn evaluate(model: &ToyModel, task: &SyntheticTask, n: usize) -> Result<f64> {
    evaluate_with_adapter(model, None, 0.0, task, n)
}

pub fn evaluate_with_adapter(
    model: &ToyModel,
    adapter: Option<&LoraAdapter>,
    adapter_scale: f64,
    task: &SyntheticTask,
    n: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("evaluation needs at least one sample".into()));
    }
    if task.dim != model.input_dim() || task.dim != model.output_dim() {
        return Err(Error::DimMismatch {
            expected: model.input_dim(),
            found: task.dim,
        });
    }
    let layers = model.dense_layers();
    let (factors, c) = match adapter {
        Some(a) => (model.check_adapter(a)?, adapter_scale * a.scaling()),
        None => (vec![None; layers.len()], 0.0),
    };
    Ok(batch_loss(&layers, &factors, c, &task.samples(n), None))
}

/// Largest relative discrepancy between the analytic LoRA-factor gradients
/// and central finite differences (step [`GRADCHECK_STEP`]), on the task's
/// first few samples with the adapter at full strength.
///
/// For each factor matrix the error is `‖g_analytic − g_numeric‖ /
/// (‖g_analytic‖ + ‖g_numeric‖)`, reported as 0 when that denominator is
/// below a small guard (e.g. at a zero-loss point).
pub fn gradient_check(model: &ToyModel, adapter: &LoraAdapter, task: &SyntheticTask) -> Result<f64> {
    check_gradients(model, adapter, task, |_| {})
}

fn check_gradients(
    model: &ToyModel,
    adapter: &LoraAdapter,
    task: &SyntheticTask,
    tamper: impl Fn(&mut [Option<Factors>]),
) -> Result<f64> {
    let layers = model.dense_layers();
    let factors = model.check_adapter(adapter)?;
    let c = adapter.scaling();
    let batch = task.samples(GRADCHECK_BATCH);

    let mut analytic = zero_grads(&factors);
    batch_loss(&layers, &factors, c, &batch, Some(&mut analytic));
    tamper(&mut analytic);

    let mut worst = 0.0f64;
    for idx in 0..factors.len() {
        let Some(g) = &analytic[idx] else { continue };
        for which in [FactorSide::A, FactorSide::B] {
            let n = match which {
                FactorSide::A => g.a.len(),
                FactorSide::B => g.b.len(),
            };
            let mut numeric = vec![0.0; n];
            let mut perturbed = factors.clone();
            for (j, slot) in numeric.iter_mut().enumerate() {
                let p = perturbed[idx].as_mut().unwrap();
                let param = match which {
                    FactorSide::A => &mut p.a[j],
                    FactorSide::B => &mut p.b[j],
                };
                let orig = *param;
                *param = orig + GRADCHECK_STEP;
                let up = batch_loss(&layers, &perturbed, c, &batch, None);
                let p = perturbed[idx].as_mut().unwrap();
                let param = match which {
                    FactorSide::A => &mut p.a[j],
                    FactorSide::B => &mut p.b[j],
                };
                *param = orig - GRADCHECK_STEP;
                let down = batch_loss(&layers, &perturbed, c, &batch, None);
                let p = perturbed[idx].as_mut().unwrap();
                match which {
                    FactorSide::A => p.a[j] = orig,
                    FactorSide::B => p.b[j] = orig,
                }
                *slot = (up - down) / (2.0 * GRADCHECK_STEP);
            }
            let an = match which {
                FactorSide::A => &g.a,
                FactorSide::B => &g.b,
            };
            let diff = an.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let denom = an.iter().map(|a| a * a).sum::<f64>().sqrt()
                + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
            if denom >= GRADCHECK_GUARD {
                worst = worst.max(diff / denom);
            }
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy)]
enum FactorSide {
    A,
    B,
}
