//! Minimal fully-connected network: forward with activation caching, exact
//! backward pass, and Adam.
//!
//! A layer computes `z = W x + b` followed by an element-wise activation.
//! Weights are stored `out × in`, row-major. The last layer of an embedding
//! network is always [`Activation::Identity`] so embeddings keep their sign.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::linalg::{DenseMatrix, DenseVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            // Subgradient at exactly zero is zero.
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: DenseMatrix,
    pub biases: DenseVector,
    pub activation: Activation,
}

impl LayerParams {
    pub fn new(weights: DenseMatrix, biases: DenseVector, activation: Activation) -> Result<Self> {
        if biases.len() != weights.rows() {
            return Err(Error::Config(format!(
                "bias length {} does not match {} weight rows",
                biases.len(),
                weights.rows()
            )));
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weights: DenseMatrix::zeros(self.weights.rows(), self.weights.cols()),
            biases: vec![0.0; self.biases.len()],
            activation: self.activation,
        }
    }
}

/// Parameters of a multi-layer perceptron. Also used as the container for
/// parameter-shaped quantities (gradients, Adam moments).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<LayerParams>,
}

/// Gradient of a scalar with respect to every parameter of an [`MlpParams`].
pub type ParamGrads = MlpParams;

impl MlpParams {
    /// Validates layer chaining and that the network ends in an identity layer.
    pub fn new(layers: Vec<LayerParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(Error::Shape {
                    layer: i + 1,
                    expected: pair[0].output_dim(),
                    actual: pair[1].input_dim(),
                });
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::Config("final layer must use the identity activation".into()));
        }
        Ok(Self { layers })
    }

    #[inline]
    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    #[inline]
    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Layer sizes `[input, hidden.., output]`.
    pub fn architecture(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(LayerParams::output_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.values().len() + l.biases.len())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.rows() == b.weights.rows() && a.weights.cols() == b.weights.cols())
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape {
                layer: self.layers.len().min(other.layers.len()),
                expected: self.layers.len(),
                actual: other.layers.len(),
            });
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.weights.rows() != b.weights.rows() {
                return Err(Error::Shape {
                    layer: i,
                    expected: a.weights.rows(),
                    actual: b.weights.rows(),
                });
            }
            if a.weights.cols() != b.weights.cols() {
                return Err(Error::Shape {
                    layer: i,
                    expected: a.weights.cols(),
                    actual: b.weights.cols(),
                });
            }
        }
        Ok(())
    }

    /// All parameters flattened layer by layer, weights (row-major) then
    /// biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.values());
            out.extend_from_slice(&l.biases);
        }
        out
    }

    /// Inverse of [`MlpParams::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.values().len();
            l.weights.values_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Final layer's weights then biases, flattened.
    pub fn last_layer_flat(&self) -> Vec<f64> {
        let l = &self.layers[self.layers.len() - 1];
        let mut out = Vec::with_capacity(l.weights.values().len() + l.biases.len());
        out.extend_from_slice(l.weights.values());
        out.extend_from_slice(&l.biases);
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.values_mut().iter_mut().zip(b.weights.values()) {
                *x += y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.values_mut().iter_mut().for_each(|x| *x *= factor);
            l.biases.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.values().iter().chain(&l.biases))
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.biases.iter().all(|b| b.is_finite()))
    }
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    input: DenseVector,
    pre: Vec<DenseVector>,
    post: Vec<DenseVector>,
}

impl ForwardCache {
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    /// Pre-activation of layer `i`.
    pub fn pre_activation(&self, i: usize) -> &[f64] {
        &self.pre[i]
    }

    /// Post-activation (output) of layer `i`.
    pub fn output(&self, i: usize) -> &[f64] {
        &self.post[i]
    }

    /// Input fed to layer `i`.
    pub fn layer_input(&self, i: usize) -> &[f64] {
        if i == 0 {
            &self.input
        } else {
            &self.post[i - 1]
        }
    }

    pub fn num_layers(&self) -> usize {
        self.pre.len()
    }
}

pub fn forward(params: &MlpParams, input: &[f64]) -> Result<(DenseVector, ForwardCache)> {
    let n = params.layers.len();
    let mut pre = Vec::with_capacity(n);
    let mut post: Vec<DenseVector> = Vec::with_capacity(n);
    for (i, layer) in params.layers.iter().enumerate() {
        let x: &[f64] = if i == 0 { input } else { &post[i - 1] };
        if x.len() != layer.input_dim() {
            return Err(Error::Shape {
                layer: i,
                expected: layer.input_dim(),
                actual: x.len(),
            });
        }
        let mut z = layer.weights.mul_vec(x);
        for (zi, b) in z.iter_mut().zip(&layer.biases) {
            *zi += b;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("layer {i} pre-activation")));
        }
        let a: DenseVector = z.iter().map(|&v| layer.activation.apply(v)).collect();
        pre.push(z);
        post.push(a);
    }
    let embedding = post[n - 1].clone();
    Ok((
        embedding,
        ForwardCache {
            input: input.to_vec(),
            pre,
            post,
        },
    ))
}

/// Backward pass; returns fresh parameter gradients and the input gradient.
pub fn backward(params: &MlpParams, cache: &ForwardCache, output_grad: &[f64]) -> Result<(ParamGrads, DenseVector)> {
    let mut grads = params.zeros_like();
    let input_grad = backward_accumulate(params, cache, output_grad, &mut grads)?;
    Ok((grads, input_grad))
}

/// Backward pass adding parameter gradients into `grads`.
pub fn backward_accumulate(
    params: &MlpParams,
    cache: &ForwardCache,
    output_grad: &[f64],
    grads: &mut ParamGrads,
) -> Result<DenseVector> {
    let n = params.layers.len();
    if cache.num_layers() != n {
        return Err(Error::Shape {
            layer: cache.num_layers().min(n),
            expected: n,
            actual: cache.num_layers(),
        });
    }
    params.check_shape(grads)?;
    let out_dim = params.output_dim();
    if output_grad.len() != out_dim {
        return Err(Error::Shape {
            layer: n - 1,
            expected: out_dim,
            actual: output_grad.len(),
        });
    }

    let mut delta: DenseVector = output_grad.to_vec();
    for i in (0..n).rev() {
        let layer = &params.layers[i];
        let z = &cache.pre[i];
        let x = cache.layer_input(i);
        if z.len() != layer.output_dim() || x.len() != layer.input_dim() {
            return Err(Error::Shape {
                layer: i,
                expected: layer.output_dim(),
                actual: z.len(),
            });
        }
        for (d, &zi) in delta.iter_mut().zip(z) {
            *d *= layer.activation.derivative(zi);
        }
        let g = &mut grads.layers[i];
        for (r, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            g.biases[r] += d;
            for (w, xi) in g.weights.row_mut(r).iter_mut().zip(x) {
                *w += d * xi;
            }
        }
        let mut next = vec![0.0; layer.input_dim()];
        for (r, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (nx, w) in next.iter_mut().zip(layer.weights.row(r)) {
                *nx += d * w;
            }
        }
        delta = next;
    }
    Ok(delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    first_moment: MlpParams,
    second_moment: MlpParams,
    step: u64,
    config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
            config,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }
}

/// One bias-corrected Adam update. Parameters are untouched on error.
pub fn adam_step(params: &mut MlpParams, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    params.check_shape(grads)?;
    params.check_shape(&state.first_moment)?;
    for (i, g) in grads.layers.iter().enumerate() {
        if !g.weights.is_finite() {
            return Err(Error::Numeric(format!("gradient of layer {i} weights")));
        }
        if g.biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numeric(format!("gradient of layer {i} biases")));
        }
    }

    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    };

    for (((p, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first_moment.layers)
        .zip(&mut state.second_moment.layers)
    {
        for (((pw, gw), mw), vw) in p
            .weights
            .values_mut()
            .iter_mut()
            .zip(g.weights.values())
            .zip(m.weights.values_mut().iter_mut())
            .zip(v.weights.values_mut().iter_mut())
        {
            update(pw, *gw, mw, vw);
        }
        for (((pb, gb), mb), vb) in p.biases.iter_mut().zip(&g.biases).zip(&mut m.biases).zip(&mut v.biases) {
            update(pb, *gb, mb, vb);
        }
    }
    Ok(())
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
/// Hidden layers use ReLU; the last layer is identity.
pub fn init_params(sizes: &[usize], seed: u64) -> Result<MlpParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params_with_rng(sizes, &mut rng)
}

pub fn init_params_with_rng<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<MlpParams> {
    if sizes.len() < 2 {
        return Err(Error::Config(
            "architecture needs an input size and at least one layer".into(),
        ));
    }
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Config(format!("layer size {i} is zero")));
    }
    let n = sizes.len() - 1;
    let mut layers = Vec::with_capacity(n);
    for (i, pair) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(format!("initializer: {e}")))?;
        let values = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        let activation = if i + 1 == n {
            Activation::Identity
        } else {
            Activation::Relu
        };
        layers.push(LayerParams::new(
            DenseMatrix::from_vec(fan_out, fan_in, values)?,
            vec![0.0; fan_out],
            activation,
        )?);
    }
    MlpParams::new(layers)
}
