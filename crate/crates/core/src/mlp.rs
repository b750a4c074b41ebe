//! A small deterministic feed-forward network engine.
//!
//! Layers come from a fixed vocabulary (linear, ReLU, batch norm, sigmoid,
//! unit-L2) with hand-written reverse-mode gradients. Hidden blocks are
//! `linear -> ReLU -> batch norm`; the last linear layer carries only the
//! requested head. Everything is generic over [`Real`] so the same code is
//! checked in `f64` against finite differences and trained in `f32`.

use crate::error::{Error, Result};
use crate::scalar::Real;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Floor on row norms inside the unit-L2 layer.
const UNIT_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Relu,
    BatchNorm,
    Sigmoid,
    UnitL2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Output head placed after the last linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    None,
    Sigmoid,
    UnitL2,
    ReluThenUnitL2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Which statistics batch norm uses outside training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnEvalStats {
    #[default]
    Running,
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: T,
    pub eps: T,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    /// `y = x W + b`, `weight` is `in_dim x out_dim`.
    Linear {
        weight: Array2<T>,
        bias: Array1<T>,
    },
    Relu {
        dim: usize,
    },
    BatchNorm(BatchNorm<T>),
    Sigmoid {
        dim: usize,
    },
    UnitL2 {
        dim: usize,
    },
}

impl<T: Real> Layer<T> {
    pub fn spec(&self) -> LayerSpec {
        let (kind, i, o) = match self {
            Layer::Linear { weight, .. } => (LayerKind::Linear, weight.nrows(), weight.ncols()),
            Layer::Relu { dim } => (LayerKind::Relu, *dim, *dim),
            Layer::BatchNorm(bn) => (LayerKind::BatchNorm, bn.gamma.len(), bn.gamma.len()),
            Layer::Sigmoid { dim } => (LayerKind::Sigmoid, *dim, *dim),
            Layer::UnitL2 { dim } => (LayerKind::UnitL2, *dim, *dim),
        };
        LayerSpec {
            kind,
            in_dim: i,
            out_dim: o,
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Layer::Linear { .. } | Layer::BatchNorm(_) => 2,
            _ => 0,
        }
    }
}

/// Intermediates recorded by a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct Cache<T> {
    version: u64,
    specs: Vec<LayerSpec>,
    entries: Vec<LayerCache<T>>,
}

#[derive(Clone, Debug)]
enum LayerCache<T> {
    Linear { input: Array2<T> },
    Relu { output: Array2<T> },
    BatchNorm { xhat: Array2<T>, inv_std: Array1<T> },
    Sigmoid { output: Array2<T> },
    UnitL2 { output: Array2<T>, norms: Array1<T> },
}

/// Gradient buffers laid out like [`Mlp::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    bufs: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(model: &Mlp<T>) -> Self {
        Gradients {
            bufs: model.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[T]> {
        self.bufs.iter().map(Vec::as_slice).collect()
    }

    pub fn fill_zero(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|x| *x = *x * s);
        }
    }

    fn add_into(&mut self, idx: usize, values: impl IntoIterator<Item = T>) {
        for (dst, v) in self.bufs[idx].iter_mut().zip(values) {
            *dst = *dst + v;
        }
    }
}

/// A feed-forward network.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    layers: Vec<Layer<T>>,
    mode: Mode,
    bn_eval: BnEvalStats,
    version: u64,
}

// `version` only tracks cache staleness and is not part of the model.
impl<T: PartialEq> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.mode == other.mode && self.bn_eval == other.bn_eval
    }
}

/// Builds `in_dim -> hidden... -> out_dim` with `linear, ReLU, batch norm`
/// hidden blocks and `head` after the final linear layer.
///
/// Weights are drawn from `U(-sqrt(6/fan_in), sqrt(6/fan_in))` with a ChaCha
/// stream seeded by `seed`; biases start at zero. Sampling happens in `f64`,
/// so `f32` and `f64` builds with one seed hold the same values up to
/// rounding.
pub fn build_mlp<T: Real>(
    in_dim: usize,
    hidden_dims: &[usize],
    out_dim: usize,
    head: Head,
    seed: u64,
) -> Result<Mlp<T>> {
    build_mlp_with(in_dim, hidden_dims, out_dim, head, seed, BnConfig::default())
}

pub fn build_mlp_with<T: Real>(
    in_dim: usize,
    hidden_dims: &[usize],
    out_dim: usize,
    head: Head,
    seed: u64,
    bn: BnConfig,
) -> Result<Mlp<T>> {
    if in_dim == 0 || out_dim == 0 || hidden_dims.contains(&0) {
        return Err(Error::Config(format!(
            "layer dimensions must be >= 1 (in {in_dim}, hidden {hidden_dims:?}, out {out_dim})"
        )));
    }
    if !(bn.momentum > 0.0 && bn.momentum <= 1.0 && bn.eps > 0.0) {
        return Err(Error::Config(format!("invalid batch-norm config {bn:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut linear = |fan_in: usize, fan_out: usize| {
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_in, fan_out), |_| T::lit(rng.gen_range(-bound..bound)));
        Layer::Linear {
            weight,
            bias: Array1::zeros(fan_out),
        }
    };
    let mut layers = Vec::new();
    let mut prev = in_dim;
    for &h in hidden_dims {
        layers.push(linear(prev, h));
        layers.push(Layer::Relu { dim: h });
        layers.push(Layer::BatchNorm(BatchNorm {
            gamma: Array1::ones(h),
            beta: Array1::zeros(h),
            running_mean: Array1::zeros(h),
            running_var: Array1::ones(h),
            momentum: T::lit(bn.momentum),
            eps: T::lit(bn.eps),
        }));
        prev = h;
    }
    layers.push(linear(prev, out_dim));
    match head {
        Head::None => {}
        Head::Sigmoid => layers.push(Layer::Sigmoid { dim: out_dim }),
        Head::UnitL2 => layers.push(Layer::UnitL2 { dim: out_dim }),
        Head::ReluThenUnitL2 => {
            layers.push(Layer::Relu { dim: out_dim });
            layers.push(Layer::UnitL2 { dim: out_dim });
        }
    }
    Mlp::from_layers(layers)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_finite<T: Real>(x: &ArrayView2<'_, T>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerics(format!("{what} contains non-finite values")))
    }
}

fn row_norms<T: Real>(x: &Array2<T>) -> Array1<T> {
    let floor = T::lit(UNIT_NORM_FLOOR);
    x.map_axis(Axis(1), |r| r.iter().map(|v| *v * *v).sum::<T>().sqrt().max(floor))
}

fn batch_stats<T: Real>(x: &Array2<T>) -> (Array1<T>, Array1<T>) {
    let n = T::lit(x.nrows() as f64);
    let mean = x.sum_axis(Axis(0)) / n;
    let mut var = Array1::<T>::zeros(x.ncols());
    for row in x.outer_iter() {
        Zip::from(&mut var).and(&row).and(&mean).for_each(|v, &xv, &m| {
            let d = xv - m;
            *v = *v + d * d;
        });
    }
    (mean, var / n)
}

impl<T: Real> Mlp<T> {
    /// Assembles a model from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            let (a, b) = (pair[0].spec(), pair[1].spec());
            if a.out_dim != b.in_dim {
                return Err(Error::Config(format!("layer dims do not chain: {:?} -> {:?}", a, b)));
            }
        }
        Ok(Mlp {
            layers,
            mode: Mode::Eval,
            bn_eval: BnEvalStats::Running,
            version: 0,
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].spec().in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec().out_dim
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn bn_eval_stats(&self) -> BnEvalStats {
        self.bn_eval
    }

    pub fn set_bn_eval_stats(&mut self, stats: BnEvalStats) {
        self.bn_eval = stats;
    }

    /// Number of weight matrices (linear layers).
    pub fn weight_matrix_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Linear { .. })).count()
    }

    /// Learnable tensors in declaration order: `weight, bias` per linear
    /// layer and `gamma, beta` per batch-norm layer.
    pub fn params(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear { weight, bias } => {
                    out.push(weight.as_slice().expect("standard layout"));
                    out.push(bias.as_slice().expect("standard layout"));
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice().expect("standard layout"));
                    out.push(bn.beta.as_slice().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable parameter access. Invalidates outstanding caches.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.version += 1;
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear { weight, bias } => {
                    out.push(weight.as_slice_mut().expect("standard layout"));
                    out.push(bias.as_slice_mut().expect("standard layout"));
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                    out.push(bn.beta.as_slice_mut().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| match l {
            Layer::Linear { weight, bias } => weight.iter().chain(bias.iter()).all(|v| v.is_finite()),
            Layer::BatchNorm(bn) => bn
                .gamma
                .iter()
                .chain(&bn.beta)
                .chain(&bn.running_mean)
                .chain(&bn.running_var)
                .all(|v| v.is_finite()),
            _ => true,
        })
    }

    fn check_input(&self, x: &ArrayView2<'_, T>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "model expects width {}, batch has {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        check_finite(x, "input batch")
    }

    /// Mode-dispatching forward pass. Train mode returns a cache for
    /// [`Mlp::backward`].
    pub fn forward(&mut self, x: ArrayView2<'_, T>) -> Result<(Array2<T>, Option<Cache<T>>)> {
        match self.mode {
            Mode::Train => self.forward_train(x).map(|(y, c)| (y, Some(c))),
            Mode::Eval => self.infer(x).map(|y| (y, None)),
        }
    }

    /// Inference with eval semantics; never mutates the model.
    pub fn infer(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = match layer {
                Layer::Linear { weight, bias } => h.dot(weight) + bias,
                Layer::Relu { .. } => h.mapv_into(|v| v.max(T::zero())),
                Layer::BatchNorm(bn) => {
                    let (mean, var) = match self.bn_eval {
                        BnEvalStats::Running => (bn.running_mean.clone(), bn.running_var.clone()),
                        BnEvalStats::Batch => batch_stats(&h),
                    };
                    let scale = &bn.gamma / &var.mapv(|v| (v + bn.eps).sqrt());
                    let shift = &bn.beta - &(&mean * &scale);
                    h * &scale + &shift
                }
                Layer::Sigmoid { .. } => h.mapv_into(sigmoid),
                Layer::UnitL2 { .. } => {
                    let norms = row_norms(&h);
                    h / &norms.insert_axis(Axis(1))
                }
            };
        }
        Ok(h)
    }

    /// Training forward pass: batch statistics for batch norm, running
    /// statistics updated with momentum.
    pub fn forward_train(&mut self, x: ArrayView2<'_, T>) -> Result<(Array2<T>, Cache<T>)> {
        self.check_input(&x)?;
        if x.nrows() < 2 {
            return Err(Error::BatchTooSmall(format!(
                "train-mode forward needs >= 2 rows, got {}",
                x.nrows()
            )));
        }
        let n = x.nrows();
        let mut h = x.to_owned();
        let mut entries = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            h = match layer {
                Layer::Linear { weight, bias } => {
                    let y = h.dot(&*weight) + &*bias;
                    entries.push(LayerCache::Linear { input: h });
                    y
                }
                Layer::Relu { .. } => {
                    let y = h.mapv_into(|v| v.max(T::zero()));
                    entries.push(LayerCache::Relu { output: y.clone() });
                    y
                }
                Layer::BatchNorm(bn) => {
                    let (mean, var) = batch_stats(&h);
                    let inv_std = var.mapv(|v| T::one() / (v + bn.eps).sqrt());
                    let xhat = (h - &mean) * &inv_std;
                    let y = &xhat * &bn.gamma + &bn.beta;
                    let m = bn.momentum;
                    let unbias = T::lit(n as f64 / (n as f64 - 1.0));
                    Zip::from(&mut bn.running_mean)
                        .and(&mean)
                        .for_each(|r, &b| *r = (T::one() - m) * *r + m * b);
                    Zip::from(&mut bn.running_var)
                        .and(&var)
                        .for_each(|r, &b| *r = (T::one() - m) * *r + m * b * unbias);
                    entries.push(LayerCache::BatchNorm { xhat, inv_std });
                    y
                }
                Layer::Sigmoid { .. } => {
                    let y = h.mapv_into(sigmoid);
                    entries.push(LayerCache::Sigmoid { output: y.clone() });
                    y
                }
                Layer::UnitL2 { .. } => {
                    let norms = row_norms(&h);
                    let y = h / &norms.view().insert_axis(Axis(1));
                    entries.push(LayerCache::UnitL2 {
                        output: y.clone(),
                        norms,
                    });
                    y
                }
            };
        }
        let cache = Cache {
            version: self.version,
            specs: self.layer_specs(),
            entries,
        };
        Ok((h, cache))
    }

    /// Back-propagates `upstream` (gradient w.r.t. the output of the forward
    /// pass that produced `cache`), accumulating parameter gradients into
    /// `grads` and returning the gradient w.r.t. the input batch.
    pub fn backward(
        &self,
        upstream: ArrayView2<'_, T>,
        cache: &Cache<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Array2<T>> {
        if cache.version != self.version || cache.specs != self.layer_specs() {
            return Err(Error::StaleCache(
                "cache does not belong to the current parameters of this model".into(),
            ));
        }
        if grads.bufs.len() != self.params().len() {
            return Err(Error::Shape("gradient buffers do not match model".into()));
        }
        let batch = cache
            .entries
            .first()
            .map(|e| match e {
                LayerCache::Linear { input } => input.nrows(),
                LayerCache::Relu { output } | LayerCache::Sigmoid { output } | LayerCache::UnitL2 { output, .. } => {
                    output.nrows()
                }
                LayerCache::BatchNorm { xhat, .. } => xhat.nrows(),
            })
            .unwrap_or(0);
        if upstream.dim() != (batch, self.out_dim()) {
            return Err(Error::Shape(format!(
                "upstream gradient is {:?}, expected ({batch}, {})",
                upstream.dim(),
                self.out_dim()
            )));
        }
        let mut param_idx: usize = self.layers.iter().map(Layer::param_count).sum();
        let mut g = upstream.to_owned();
        for (layer, entry) in self.layers.iter().zip(&cache.entries).rev() {
            param_idx -= layer.param_count();
            g = match (layer, entry) {
                (Layer::Linear { weight, .. }, LayerCache::Linear { input }) => {
                    let dw = input.t().dot(&g);
                    grads.add_into(param_idx, dw.iter().copied());
                    grads.add_into(param_idx + 1, g.sum_axis(Axis(0)));
                    g.dot(&weight.t())
                }
                (Layer::Relu { .. }, LayerCache::Relu { output }) => {
                    Zip::from(&mut g).and(output).for_each(|gv, &o| {
                        if o <= T::zero() {
                            *gv = T::zero();
                        }
                    });
                    g
                }
                (Layer::BatchNorm(bn), LayerCache::BatchNorm { xhat, inv_std }) => {
                    let n = T::lit(g.nrows() as f64);
                    let dgamma = (&g * xhat).sum_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0));
                    grads.add_into(param_idx, dgamma.iter().copied());
                    grads.add_into(param_idx + 1, dbeta.iter().copied());
                    // dx = gamma * inv_std / n * (n*g - sum(g) - xhat * sum(g*xhat))
                    let coef = &bn.gamma * inv_std / n;
                    let mut dx = g * n - &dbeta - &(xhat * &dgamma);
                    dx *= &coef;
                    dx
                }
                (Layer::Sigmoid { .. }, LayerCache::Sigmoid { output }) => {
                    Zip::from(&mut g)
                        .and(output)
                        .for_each(|gv, &y| *gv = *gv * y * (T::one() - y));
                    g
                }
                (Layer::UnitL2 { .. }, LayerCache::UnitL2 { output, norms }) => {
                    // d(v/|v|) = (g - (g . y) y) / |v|
                    let dots = (&g * output).sum_axis(Axis(1));
                    let mut dx = g - &(output * &dots.insert_axis(Axis(1)));
                    dx /= &norms.view().insert_axis(Axis(1));
                    dx
                }
                _ => {
                    return Err(Error::StaleCache("cache layout does not match model".into()));
                }
            };
        }
        Ok(g)
    }

    /// Casts every parameter and statistic to another float type.
    pub fn cast<U: Real>(&self) -> Mlp<U> {
        let c1 = |a: &Array1<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Linear { weight, bias } => Layer::Linear {
                    weight: weight.mapv(|v| U::lit(v.to_f64_lossy())),
                    bias: c1(bias),
                },
                Layer::Relu { dim } => Layer::Relu { dim: *dim },
                Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNorm {
                    gamma: c1(&bn.gamma),
                    beta: c1(&bn.beta),
                    running_mean: c1(&bn.running_mean),
                    running_var: c1(&bn.running_var),
                    momentum: U::lit(bn.momentum.to_f64_lossy()),
                    eps: U::lit(bn.eps.to_f64_lossy()),
                }),
                Layer::Sigmoid { dim } => Layer::Sigmoid { dim: *dim },
                Layer::UnitL2 { dim } => Layer::UnitL2 { dim: *dim },
            })
            .collect();
        Mlp {
            layers,
            mode: self.mode,
            bn_eval: self.bn_eval,
            version: 0,
        }
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over an ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(shapes: &[usize], config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// State sized for the concatenated parameters of `models`.
    pub fn for_models(models: &[&Mlp<T>], config: AdamConfig) -> Self {
        let shapes: Vec<usize> = models
            .iter()
            .flat_map(|m| m.params().into_iter().map(|p| p.len()))
            .collect();
        Self::new(&shapes, config)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Non-finite gradients reject the whole step and leave both
    /// parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "adam state holds {} tensors, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[k].len() || g.len() != p.len() {
                return Err(Error::Shape(format!("tensor {k} shape mismatch")));
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerics("non-finite gradient; step rejected".into()));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for k in 0..params.len() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for ((p, &g), (mk, vk)) in params[k].iter_mut().zip(grads[k]).zip(m.iter_mut().zip(v.iter_mut())) {
                *mk = b1 * *mk + (T::one() - b1) * g;
                *vk = b2 * *vk + (T::one() - b2) * g * g;
                let mhat = *mk / bc1;
                let vhat = *vk / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Applies one joint Adam step across several models whose gradients are
/// given in the same order.
pub fn adam_step_models<T: Real>(
    state: &mut AdamState<T>,
    models: &mut [&mut Mlp<T>],
    grads: &[&Gradients<T>],
) -> Result<()> {
    if models.len() != grads.len() {
        return Err(Error::Shape("one gradient set per model required".into()));
    }
    let grad_slices: Vec<&[T]> = grads.iter().flat_map(|g| g.slices()).collect();
    let mut params: Vec<&mut [T]> = models.iter_mut().flat_map(|m| m.params_mut()).collect();
    state.step(&mut params, &grad_slices)?;
    drop(params);
    if models.iter().all(|m| m.all_finite()) {
        Ok(())
    } else {
        Err(Error::Numerics("parameters became non-finite".into()))
    }
}

// XMLP v1 layout (all little endian):
//   magic "XMLP", u32 version, u32 layer count, u8 bn-eval flag,
//   per layer: u8 kind, u32 in, u32 out; batch-norm layers add f32 momentum, f32 eps
//   u32 metadata length + UTF-8 metadata (free-form JSON, may be empty)
//   parameters in declaration order as f32:
//     linear: weight (in x out, row major), bias
//     batch norm: gamma, beta, running mean, running var
const XMLP_MAGIC: &[u8; 4] = b"XMLP";
const XMLP: &str = "XMLP";

fn kind_code(k: LayerKind) -> u8 {
    match k {
        LayerKind::Linear => 0,
        LayerKind::Relu => 1,
        LayerKind::BatchNorm => 2,
        LayerKind::Sigmoid => 3,
        LayerKind::UnitL2 => 4,
    }
}

impl Mlp<f32> {
    pub fn to_xmlp(&self, metadata: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(XMLP_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        out.push(match self.bn_eval {
            BnEvalStats::Running => 0,
            BnEvalStats::Batch => 1,
        });
        for layer in &self.layers {
            let s = layer.spec();
            out.push(kind_code(s.kind));
            out.extend_from_slice(&(s.in_dim as u32).to_le_bytes());
            out.extend_from_slice(&(s.out_dim as u32).to_le_bytes());
            if let Layer::BatchNorm(bn) = layer {
                out.extend_from_slice(&bn.momentum.to_le_bytes());
                out.extend_from_slice(&bn.eps.to_le_bytes());
            }
        }
        out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(metadata.as_bytes());
        let mut put = |vals: &mut dyn Iterator<Item = &f32>| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for layer in &self.layers {
            match layer {
                Layer::Linear { weight, bias } => {
                    put(&mut weight.iter());
                    put(&mut bias.iter());
                }
                Layer::BatchNorm(bn) => {
                    put(&mut bn.gamma.iter());
                    put(&mut bn.beta.iter());
                    put(&mut bn.running_mean.iter());
                    put(&mut bn.running_var.iter());
                }
                _ => {}
            }
        }
        out
    }

    /// Parses an XMLP v1 blob into an eval-mode model and its metadata.
    pub fn from_xmlp(bytes: &[u8]) -> Result<(Self, String)> {
        let mut r = ByteReader::new(XMLP, bytes);
        if r.take(4, "magic")? != XMLP_MAGIC {
            return Err(Error::format(XMLP, "magic", "not an XMLP blob"));
        }
        let version = r.u32("version")?;
        if version != 1 {
            return Err(Error::format(XMLP, "version", format!("unsupported version {version}")));
        }
        let n_layers = r.u32("layer count")? as usize;
        if n_layers == 0 || n_layers > 4096 {
            return Err(Error::format(
                XMLP,
                "layer count",
                format!("implausible value {n_layers}"),
            ));
        }
        let bn_eval = match r.u8("bn eval flag")? {
            0 => BnEvalStats::Running,
            1 => BnEvalStats::Batch,
            c => return Err(Error::format(XMLP, "bn eval flag", format!("unknown code {c}"))),
        };
        let mut headers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let field = format!("layer {i}");
            let kind = match r.u8(&field)? {
                0 => LayerKind::Linear,
                1 => LayerKind::Relu,
                2 => LayerKind::BatchNorm,
                3 => LayerKind::Sigmoid,
                4 => LayerKind::UnitL2,
                c => return Err(Error::format(XMLP, field, format!("unknown layer kind {c}"))),
            };
            let in_dim = r.u32(&field)? as usize;
            let out_dim = r.u32(&field)? as usize;
            if in_dim == 0 || out_dim == 0 || (kind != LayerKind::Linear && in_dim != out_dim) {
                return Err(Error::format(XMLP, field, format!("bad dims {in_dim} -> {out_dim}")));
            }
            let bn = if kind == LayerKind::BatchNorm {
                Some((r.f32(&field)?, r.f32(&field)?))
            } else {
                None
            };
            headers.push((kind, in_dim, out_dim, bn));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let metadata = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| Error::format(XMLP, "metadata", "not UTF-8"))?
            .to_string();
        let mut layers = Vec::with_capacity(n_layers);
        for (i, (kind, in_dim, out_dim, bn)) in headers.into_iter().enumerate() {
            let field = format!("layer {i} params");
            let layer = match kind {
                LayerKind::Linear => {
                    let w = r.f32s(in_dim * out_dim, &field)?;
                    let b = r.f32s(out_dim, &field)?;
                    Layer::Linear {
                        weight: Array2::from_shape_vec((in_dim, out_dim), w).expect("sized"),
                        bias: Array1::from(b),
                    }
                }
                LayerKind::BatchNorm => {
                    let (momentum, eps) = bn.expect("read above");
                    Layer::BatchNorm(BatchNorm {
                        gamma: Array1::from(r.f32s(in_dim, &field)?),
                        beta: Array1::from(r.f32s(in_dim, &field)?),
                        running_mean: Array1::from(r.f32s(in_dim, &field)?),
                        running_var: Array1::from(r.f32s(in_dim, &field)?),
                        momentum,
                        eps,
                    })
                }
                LayerKind::Relu => Layer::Relu { dim: in_dim },
                LayerKind::Sigmoid => Layer::Sigmoid { dim: in_dim },
                LayerKind::UnitL2 => Layer::UnitL2 { dim: in_dim },
            };
            layers.push(layer);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                XMLP,
                "trailing bytes",
                format!("{} unread bytes", bytes.len() - r.pos),
            ));
        }
        let mut model = Mlp::from_layers(layers).map_err(|e| Error::format(XMLP, "layers", e.to_string()))?;
        model.bn_eval = bn_eval;
        if !model.all_finite() {
            return Err(Error::format(XMLP, "params", "non-finite parameter"));
        }
        Ok((model, metadata))
    }
}

pub(crate) struct ByteReader<'a> {
    pub format: &'static str,
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(format: &'static str, bytes: &'a [u8]) -> Self {
        ByteReader { format, bytes, pos: 0 }
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.format, field, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    pub fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, field: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(self.format, field, "overflow"))?,
            field,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
