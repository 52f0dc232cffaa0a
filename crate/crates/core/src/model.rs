//! Fully-connected ReLU classifier with explicit forward and backward passes.
//!
//! Parameters are stored per layer as `weights` (out × in) and `bias` (out).
//! Hidden layers use ReLU, the output layer is linear and produces logits.
//! Everything is `f64` so finite-difference checks stay meaningful.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FedCalError, Result};

/// Layer widths from input dimension to number of classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(FedCalError::InvalidSpec(format!(
                "need at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(FedCalError::InvalidSpec(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        if *layer_sizes.last().unwrap() < 2 {
            return Err(FedCalError::InvalidSpec(
                "output layer needs at least two classes".into(),
            ));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight layers (one less than the number of widths).
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// Rows are output units, columns are inputs.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

macro_rules! layered {
    ($name:ident) => {
        impl $name {
            pub fn from_layers(layers: Vec<DenseLayer>) -> Self {
                Self { layers }
            }

            pub fn zeros(spec: &ModelSpec) -> Self {
                Self {
                    layers: spec
                        .layer_sizes()
                        .windows(2)
                        .map(|w| DenseLayer::zeros(w[0], w[1]))
                        .collect(),
                }
            }

            pub fn layers(&self) -> &[DenseLayer] {
                &self.layers
            }

            pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
                &mut self.layers
            }

            pub fn num_params(&self) -> usize {
                self.layers.iter().map(DenseLayer::num_params).sum()
            }

            pub fn is_finite(&self) -> bool {
                self.layers.iter().all(|l| {
                    l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
                })
            }

            pub fn same_shape<T: AsRef<[DenseLayer]>>(&self, other: T) -> bool {
                let other = other.as_ref();
                self.layers.len() == other.len()
                    && self.layers.iter().zip(other).all(|(a, b)| {
                        a.weights.dim() == b.weights.dim() && a.bias.len() == b.bias.len()
                    })
            }

            /// Concatenates every layer as `W` (row-major) then `b`, in layer order.
            pub fn flatten(&self) -> Vec<f64> {
                let mut out = Vec::with_capacity(self.num_params());
                for layer in &self.layers {
                    out.extend(layer.weights.iter().copied());
                    out.extend(layer.bias.iter().copied());
                }
                out
            }

            /// Inverse of [`Self::flatten`].
            pub fn unflatten(spec: &ModelSpec, values: &[f64]) -> Result<Self> {
                if values.len() != spec.num_params() {
                    return Err(FedCalError::DimensionMismatch {
                        context: "unflatten",
                        expected: spec.num_params(),
                        actual: values.len(),
                    });
                }
                let mut out = Self::zeros(spec);
                let mut it = values.iter().copied();
                for layer in &mut out.layers {
                    for w in layer.weights.iter_mut() {
                        *w = it.next().unwrap();
                    }
                    for b in layer.bias.iter_mut() {
                        *b = it.next().unwrap();
                    }
                }
                Ok(out)
            }

            /// Each layer's weight matrix, followed by its bias as a `1 × out` matrix.
            pub fn layer_matrices(&self) -> Vec<Array2<f64>> {
                let mut out = Vec::with_capacity(self.layers.len() * 2);
                for layer in &self.layers {
                    out.push(layer.weights.clone());
                    out.push(layer.bias.clone().insert_axis(Axis(0)));
                }
                out
            }
        }

        impl AsRef<[DenseLayer]> for $name {
            fn as_ref(&self) -> &[DenseLayer] {
                &self.layers
            }
        }
    };
}

/// Model parameters `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    layers: Vec<DenseLayer>,
}

/// A difference of parameter sets (`w_prev - w_local`), a gradient, or an
/// aggregate of either.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterDelta {
    layers: Vec<DenseLayer>,
}

layered!(ParameterSet);
layered!(ParameterDelta);

fn zip_layers(
    a: &[DenseLayer],
    b: &[DenseLayer],
    mut f: impl FnMut(&mut DenseLayer, &DenseLayer, &DenseLayer),
) -> Vec<DenseLayer> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let mut out = x.clone();
            f(&mut out, x, y);
            out
        })
        .collect()
}

impl ParameterSet {
    /// `self - local`, i.e. the delta a client reports when `self` is the
    /// model it started from.
    pub fn delta_to(&self, local: &ParameterSet) -> ParameterDelta {
        debug_assert!(self.same_shape(local));
        ParameterDelta {
            layers: zip_layers(&self.layers, &local.layers, |out, a, b| {
                out.weights = &a.weights - &b.weights;
                out.bias = &a.bias - &b.bias;
            }),
        }
    }

    /// `self - scale * delta`.
    pub fn step(&self, delta: &ParameterDelta, scale: f64) -> ParameterSet {
        let mut out = self.clone();
        out.step_in_place(delta, scale);
        out
    }

    pub fn step_in_place(&mut self, delta: &ParameterDelta, scale: f64) {
        debug_assert!(self.same_shape(delta));
        for (p, d) in self.layers.iter_mut().zip(&delta.layers) {
            p.weights.scaled_add(-scale, &d.weights);
            p.bias.scaled_add(-scale, &d.bias);
        }
    }
}

impl ParameterDelta {
    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &ParameterDelta) {
        debug_assert!(self.same_shape(other));
        for (p, d) in self.layers.iter_mut().zip(&other.layers) {
            p.weights.scaled_add(scale, &d.weights);
            p.bias.scaled_add(scale, &d.bias);
        }
    }

    /// `self += scale * params`, used for weight decay and proximal terms.
    pub fn add_scaled_params(&mut self, scale: f64, params: &ParameterSet) {
        debug_assert!(self.same_shape(params));
        for (p, d) in self.layers.iter_mut().zip(&params.layers) {
            p.weights.scaled_add(scale, &d.weights);
            p.bias.scaled_add(scale, &d.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.mapv_inplace(|v| v * factor);
            l.bias.mapv_inplace(|v| v * factor);
        }
    }

    pub fn scaled(&self, factor: f64) -> ParameterDelta {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.weights.iter().map(|v| v * v).sum::<f64>() + l.bias.iter().map(|v| v * v).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().all(|&v| v == 0.0) && l.bias.iter().all(|&v| v == 0.0))
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(spec: &ModelSpec, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::zeros(spec);
    for layer in params.layers_mut() {
        let (fan_out, fan_in) = layer.weights.dim();
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in layer.weights.iter_mut() {
            *w = rng.random_range(-bound..bound);
        }
    }
    params
}

/// A minibatch of feature rows with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(FedCalError::ShapeMismatch("empty batch".into()));
        }
        if features.nrows() != labels.len() {
            return Err(FedCalError::DimensionMismatch {
                context: "batch labels",
                expected: features.nrows(),
                actual: labels.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(FedCalError::ShapeMismatch("non-finite feature".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-layer inputs and pre-activations recorded by [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `inputs[l]` is the activation fed into layer `l` (`inputs[0]` is the batch).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations `z_l = a_l W_l^T + b_l`; the last one is the logits.
    pre_activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Array2<f64> {
        self.pre_activations.last().unwrap()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

pub fn forward(params: &ParameterSet, batch: &Batch) -> Result<(Array2<f64>, ForwardCache)> {
    forward_features(params, batch.features.view())
}

pub fn forward_features(
    params: &ParameterSet,
    features: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, ForwardCache)> {
    let expected = params.layers()[0].weights.ncols();
    if features.ncols() != expected {
        return Err(FedCalError::DimensionMismatch {
            context: "forward input",
            expected,
            actual: features.ncols(),
        });
    }
    let num_layers = params.layers().len();
    let mut inputs = Vec::with_capacity(num_layers);
    let mut pre_activations = Vec::with_capacity(num_layers);
    let mut current = features.to_owned();
    for (l, layer) in params.layers().iter().enumerate() {
        let mut z = current.dot(&layer.weights.t());
        z += &layer.bias;
        inputs.push(current);
        current = if l + 1 < num_layers {
            z.mapv(|v| v.max(0.0))
        } else {
            z.clone()
        };
        pre_activations.push(z);
    }
    Ok((
        current,
        ForwardCache {
            inputs,
            pre_activations,
        },
    ))
}

/// Logits only, for evaluation.
pub fn predict_logits(params: &ParameterSet, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    forward_features(params, features).map(|(logits, _)| logits)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Gradient of a scalar loss with respect to every parameter, given its
/// gradient with respect to the logits.
pub fn backward(
    params: &ParameterSet,
    cache: &ForwardCache,
    grad_logits: &Array2<f64>,
) -> Result<ParameterDelta> {
    let logits = cache.logits();
    if grad_logits.dim() != logits.dim() {
        return Err(FedCalError::ShapeMismatch(format!(
            "grad_logits is {:?}, logits are {:?}",
            grad_logits.dim(),
            logits.dim()
        )));
    }
    let num_layers = params.layers().len();
    let mut layers = Vec::with_capacity(num_layers);
    let mut grad_z = grad_logits.clone();
    for l in (0..num_layers).rev() {
        let input = &cache.inputs[l];
        let weights = grad_z.t().dot(input);
        let bias = grad_z.sum_axis(Axis(0));
        if l > 0 {
            let mut grad_a = grad_z.dot(&params.layers()[l].weights);
            // ReLU subgradient at 0 is 0.
            ndarray::Zip::from(&mut grad_a)
                .and(&cache.pre_activations[l - 1])
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            grad_z = grad_a;
        }
        layers.push(DenseLayer { weights, bias });
    }
    layers.reverse();
    Ok(ParameterDelta::from_layers(layers))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FedCalError::config("lr", "must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FedCalError::config("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(FedCalError::config("weight_decay", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Momentum buffers plus hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    pub velocity: ParameterDelta,
}

impl OptimizerState {
    pub fn new(spec: &ModelSpec, config: SgdConfig) -> Self {
        Self {
            config,
            velocity: ParameterDelta::zeros(spec),
        }
    }

    pub fn for_params(params: &ParameterSet, config: SgdConfig) -> Self {
        let layers = params
            .layers()
            .iter()
            .map(|l| DenseLayer::zeros(l.weights.ncols(), l.weights.nrows()))
            .collect();
        Self {
            config,
            velocity: ParameterDelta::from_layers(layers),
        }
    }

    /// `v <- momentum * v + grad + weight_decay * w`, then `w <- w - lr * v`.
    pub fn step_in_place(&mut self, params: &mut ParameterSet, grad: &ParameterDelta) {
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for ((p, g), v) in params
            .layers_mut()
            .iter_mut()
            .zip(grad.layers())
            .zip(self.velocity.layers_mut())
        {
            ndarray::Zip::from(&mut v.weights)
                .and(&mut p.weights)
                .and(&g.weights)
                .for_each(|v, w, &g| {
                    *v = momentum * *v + g + weight_decay * *w;
                    *w -= lr * *v;
                });
            ndarray::Zip::from(&mut v.bias)
                .and(&mut p.bias)
                .and(&g.bias)
                .for_each(|v, w, &g| {
                    *v = momentum * *v + g + weight_decay * *w;
                    *w -= lr * *v;
                });
        }
    }
}

/// Pure form of [`OptimizerState::step_in_place`].
pub fn sgd_step(
    params: &ParameterSet,
    grad: &ParameterDelta,
    state: &OptimizerState,
) -> Result<(ParameterSet, OptimizerState)> {
    if !params.same_shape(grad) || !params.same_shape(&state.velocity) {
        return Err(FedCalError::ShapeMismatch(
            "sgd_step: params, gradient and momentum must share a shape".into(),
        ));
    }
    let mut params = params.clone();
    let mut state = state.clone();
    state.step_in_place(&mut params, grad);
    Ok((params, state))
}
