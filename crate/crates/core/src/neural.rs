//! Small dense networks with explicit forward and backward passes.
//!
//! Parameters of a [`DenseNetwork`] live in one flat buffer, layer by layer,
//! each layer storing its `out x in` weight matrix (row-major) followed by its
//! bias vector. Gradients and Adam moments share that layout, so an optimizer
//! step is a single pass over three slices.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Fully connected network: Leaky-ReLU on every hidden layer, linear output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNetwork {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
    leaky_slope: f64,
    #[serde(skip)]
    generation: u64,
}

impl PartialEq for DenseNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.layer_dims == other.layer_dims
            && self.leaky_slope == other.leaky_slope
            && self.params == other.params
    }
}

/// Activations recorded by [`DenseNetwork::forward_batch`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    layer_dims: Vec<usize>,
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre_activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    /// Post-activation values of hidden layer `index` (0-based).
    pub fn hidden(&self, index: usize) -> ArrayView2<'_, f64> {
        self.inputs[index + 1].view()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Gradient of a scalar loss with respect to every network parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    layer_dims: Vec<usize>,
    values: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Self {
            layer_dims: net.layer_dims.clone(),
            values: vec![0.0; net.params.len()],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn weight_grad(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (w, _) = layer_offsets(&self.layer_dims, layer);
        let (rows, cols) = (self.layer_dims[layer + 1], self.layer_dims[layer]);
        ArrayView2::from_shape((rows, cols), &self.values[w..w + rows * cols]).expect("layout")
    }

    pub fn bias_grad(&self, layer: usize) -> ArrayView1<'_, f64> {
        let (_, b) = layer_offsets(&self.layer_dims, layer);
        let n = self.layer_dims[layer + 1];
        ArrayView1::from(&self.values[b..b + n])
    }

    /// Accumulates `other` into `self`.
    pub fn add_assign(&mut self, other: &GradientBundle) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::Shape {
                expected: self.values.len(),
                actual: other.values.len(),
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Offsets of the weight block and bias block of `layer`.
fn layer_offsets(dims: &[usize], layer: usize) -> (usize, usize) {
    let start: usize = dims[..=layer].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    (start, start + dims[layer] * dims[layer + 1])
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gated linear unit on a scalar pair: `a * sigmoid(g)`.
#[inline]
pub fn glu_gate(a: f64, g: f64) -> f64 {
    a * sigmoid(g)
}

/// Partial derivatives of [`glu_gate`] with respect to `(a, g)`.
#[inline]
pub fn glu_gate_grad(a: f64, g: f64) -> (f64, f64) {
    let s = sigmoid(g);
    (s, a * s * (1.0 - s))
}

/// Mean absolute error and its subgradient (`sign(0) = 0`).
pub fn l1_loss(predictions: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape {
            expected: targets.len(),
            actual: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("l1_loss inputs"));
    }
    let n = predictions.len() as f64;
    let mut loss = 0.0;
    let grad = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let diff = p - t;
            loss += diff.abs();
            if diff > 0.0 {
                1.0 / n
            } else if diff < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / n, grad))
}

impl DenseNetwork {
    /// Creates a network with all parameters zero.
    pub fn zeros(layer_dims: &[usize], leaky_slope: f64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "a network needs at least an input and an output layer".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer widths must be positive".into(),
            ));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            params: vec![0.0; param_count(layer_dims)],
            leaky_slope,
            generation: 0,
        })
    }

    /// Creates a network initialized by [`DenseNetwork::init_weights`].
    pub fn seeded(layer_dims: &[usize], leaky_slope: f64, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, leaky_slope)?;
        net.init_weights(seed);
        Ok(net)
    }

    /// Weights uniform in `±sqrt(1 / fan_in)`, biases zero. Deterministic in `seed`.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in 0..self.num_layers() {
            let fan_in = self.layer_dims[layer];
            let bound = (1.0 / fan_in as f64).sqrt();
            let (w, b) = layer_offsets(&self.layer_dims, layer);
            let n_bias = self.layer_dims[layer + 1];
            for v in &mut self.params[w..b] {
                *v = rng.random_range(-bound..=bound);
            }
            self.params[b..b + n_bias].fill(0.0);
        }
        self.generation += 1;
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("non-empty dims")
    }

    pub fn leaky_slope(&self) -> f64 {
        self.leaky_slope
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the flat parameter buffer. Invalidates earlier caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    /// Replaces every parameter; `values` must match [`DenseNetwork::num_params`].
    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Shape {
                expected: self.params.len(),
                actual: values.len(),
            });
        }
        self.params_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (w, _) = layer_offsets(&self.layer_dims, layer);
        let (rows, cols) = (self.layer_dims[layer + 1], self.layer_dims[layer]);
        ArrayView2::from_shape((rows, cols), &self.params[w..w + rows * cols]).expect("layout")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let (_, b) = layer_offsets(&self.layer_dims, layer);
        let n = self.layer_dims[layer + 1];
        ArrayView1::from(&self.params[b..b + n])
    }

    /// Forward pass over a batch (one row per sample).
    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                actual: input.ncols(),
            });
        }
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre_activations = Vec::with_capacity(last);
        let mut current = input.to_owned();
        for layer in 0..self.num_layers() {
            let mut z = current.dot(&self.weights(layer).t());
            z += &self.bias(layer);
            inputs.push(current);
            if layer == last {
                current = z;
            } else {
                let slope = self.leaky_slope;
                let activated = z.mapv(|v| leaky_relu(v, slope));
                pre_activations.push(z);
                current = activated;
            }
        }
        let cache = ForwardCache {
            generation: self.generation,
            layer_dims: self.layer_dims.clone(),
            inputs,
            pre_activations,
        };
        Ok((current, cache))
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let view = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let (out, cache) = self.forward_batch(view)?;
        Ok((out.into_raw_vec_and_offset().0, cache))
    }

    /// Output only, without keeping a cache.
    pub fn predict_batch(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                actual: input.ncols(),
            });
        }
        let last = self.num_layers() - 1;
        let mut current = input.to_owned();
        for layer in 0..self.num_layers() {
            let mut z = current.dot(&self.weights(layer).t());
            z += &self.bias(layer);
            if layer != last {
                let slope = self.leaky_slope;
                z.mapv_inplace(|v| leaky_relu(v, slope));
            }
            current = z;
        }
        Ok(current)
    }

    /// Backpropagates `output_gradient` (d loss / d output, one row per sample)
    /// through the activations in `cache`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_gradient: ArrayView2<'_, f64>,
    ) -> Result<GradientBundle> {
        if cache.layer_dims != self.layer_dims || cache.generation != self.generation {
            return Err(Error::InvalidArgument(
                "forward cache does not belong to the current network parameters".into(),
            ));
        }
        if output_gradient.dim() != (cache.batch_size(), self.output_dim()) {
            return Err(Error::Shape {
                expected: cache.batch_size() * self.output_dim(),
                actual: output_gradient.len(),
            });
        }
        let mut grads = GradientBundle::zeros_like(self);
        let mut delta = output_gradient.to_owned();
        for layer in (0..self.num_layers()).rev() {
            let (w_off, b_off) = layer_offsets(&self.layer_dims, layer);
            let (rows, cols) = (self.layer_dims[layer + 1], self.layer_dims[layer]);
            let dw = delta.t().dot(&cache.inputs[layer]);
            let db = delta.sum_axis(Axis(0));
            grads.values[w_off..w_off + rows * cols]
                .iter_mut()
                .zip(dw.iter())
                .for_each(|(g, v)| *g = *v);
            grads.values[b_off..b_off + rows]
                .iter_mut()
                .zip(db.iter())
                .for_each(|(g, v)| *g = *v);
            if layer > 0 {
                let mut upstream = delta.dot(&self.weights(layer));
                let slope = self.leaky_slope;
                upstream.zip_mut_with(&cache.pre_activations[layer - 1], |d, &z| {
                    if z <= 0.0 {
                        *d *= slope;
                    }
                });
                delta = upstream;
            }
        }
        Ok(grads)
    }
}

/// Adam with bias correction over a flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
        }
    }

    pub fn for_network(net: &DenseNetwork, lr: f64) -> Self {
        Self::new(net.num_params(), lr)
    }

    pub fn reset(&mut self) {
        self.step_count = 0;
        self.first_moment.fill(0.0);
        self.second_moment.fill(0.0);
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Shape {
                expected: self.first_moment.len(),
                actual: if params.len() != self.first_moment.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.epsilon);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    /// Applies a gradient bundle to `net`.
    pub fn step_network(&mut self, net: &mut DenseNetwork, grads: &GradientBundle) -> Result<()> {
        self.step(net.params_mut(), grads.as_slice())
    }
}

/// Convenience: a row-major matrix view of `rows` equally sized vectors.
pub fn stack_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(rows.len() * width);
    for row in rows {
        if row.len() != width {
            return Err(Error::Shape {
                expected: width,
                actual: row.len(),
            });
        }
        flat.extend_from_slice(row);
    }
    Ok(Array2::from_shape_vec((rows.len(), width), flat).expect("checked widths"))
}
