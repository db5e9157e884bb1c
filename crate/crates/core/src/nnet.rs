//! Feed-forward networks with hand-written reverse mode.
//!
//! Batches are matrices with one sample per row. Weights are stored
//! `out × in`, so a layer computes `H = X Wᵀ + 1 bᵀ` followed by its
//! activation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x`. ReLU uses 0 at exactly 0.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Intermediate values kept by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; the last entry is the network output.
    activations: Vec<DMatrix<f64>>,
    pre_activations: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("cache holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
            biases: net.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    /// Slices in the same order as [`Mlp::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(super::linalg::to_row_major(w));
            out.extend(b.iter());
        }
        out
    }
}

fn add_bias(h: &mut DMatrix<f64>, bias: &DVector<f64>) {
    for (j, mut col) in h.column_iter_mut().enumerate() {
        col.add_scalar_mut(bias[j]);
    }
}

impl Mlp {
    /// Network with Glorot-uniform weights and zero biases. Hidden layers use
    /// `hidden`, the last layer uses `output`.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weight: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..=limit)),
                    bias: DVector::zeros(fan_out),
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("MLP without layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i}: bias {} vs weight rows {}",
                    l.bias.len(),
                    l.weight.nrows()
                )));
            }
            if i > 0 && layers[i - 1].weight.nrows() != l.weight.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i} expects width {}, previous layer emits {}",
                    l.weight.ncols(),
                    layers[i - 1].weight.nrows()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.nrows()));
        dims
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weight.nrows()
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "network input width {} but batch has {} columns",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.layers {
            let mut z = &h * l.weight.transpose();
            add_bias(&mut z, &l.bias);
            z.apply(|v| *v = l.activation.apply(*v));
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for l in &self.layers {
            let mut z = activations.last().unwrap() * l.weight.transpose();
            add_bias(&mut z, &l.bias);
            let a = z.map(|v| l.activation.apply(v));
            pre_activations.push(z);
            activations.push(a);
        }
        Ok(ForwardCache {
            activations,
            pre_activations,
        })
    }

    /// Parameter gradients and input gradient for upstream gradient `dy` on
    /// the output of the cached forward pass.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dy: &DMatrix<f64>,
    ) -> Result<(Gradients, DMatrix<f64>)> {
        let out = cache.output();
        if dy.shape() != out.shape() {
            return Err(Error::DimensionMismatch(format!(
                "upstream gradient {:?} vs output {:?}",
                dy.shape(),
                out.shape()
            )));
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut grad = dy.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre_activations[i];
            if l.activation != Activation::Identity {
                grad.zip_apply(pre, |g, z| *g *= l.activation.derivative(z));
            }
            weights.push(grad.tr_mul(&cache.activations[i]));
            biases.push(DVector::from_iterator(
                grad.ncols(),
                grad.column_iter().map(|c| c.sum()),
            ));
            grad = &grad * &l.weight;
        }
        weights.reverse();
        biases.reverse();
        Ok((Gradients { weights, biases }, grad))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Mutable parameter buffers, weight then bias per layer.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in self.layers.iter_mut() {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len()])
            .collect()
    }

    /// All parameters, per layer: weights row-major then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(super::linalg::to_row_major(&l.weight));
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters supplied, network has {}",
                params.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for l in self.layers.iter_mut() {
            let (r, c) = l.weight.shape();
            for i in 0..r {
                for j in 0..c {
                    l.weight[(i, j)] = params[off];
                    off += 1;
                }
            }
            for b in l.bias.iter_mut() {
                *b = params[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// `self ← (1−τ)·self + τ·source`.
    pub fn polyak_update(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            t.weight.zip_apply(&s.weight, |a, b| *a = (1.0 - tau) * *a + tau * b);
            t.bias.zip_apply(&s.bias, |a, b| *a = (1.0 - tau) * *a + tau * b);
        }
    }
}

/// Analytic and central-difference derivatives of `L = Σ w ∘ net(x)` with
/// respect to the parameters at the given flat indices (order of
/// [`Mlp::params_flat`]).
pub fn gradient_check(
    net: &Mlp,
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    indices: &[usize],
    h: f64,
) -> Result<Vec<(f64, f64)>> {
    let cache = net.forward_cached(x)?;
    let (grads, _) = net.backward(&cache, w)?;
    let analytic = grads.flatten();
    let base = net.params_flat();
    let loss = |p: &[f64]| -> Result<f64> {
        let mut m = net.clone();
        m.set_params_flat(p)?;
        Ok(m.forward(x)?.component_mul(w).sum())
    };
    indices
        .iter()
        .map(|&k| {
            if k >= base.len() {
                return Err(Error::DimensionMismatch(format!("parameter index {k}")));
            }
            let mut p = base.clone();
            p[k] = base[k] + h;
            let plus = loss(&p)?;
            p[k] = base[k] - h;
            let minus = loss(&p)?;
            Ok((analytic[k], (plus - minus) / (2.0 * h)))
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Mean Huber loss over all elements and its gradient with respect to `pred`.
pub fn huber(pred: &DMatrix<f64>, target: &DMatrix<f64>, delta: f64) -> Result<(f64, DMatrix<f64>)> {
    if pred.shape() != target.shape() {
        return Err(Error::DimensionMismatch(format!(
            "huber: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::Config(format!("huber delta must be positive, got {delta}")));
    }
    let count = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = pred - target;
    for r in grad.iter_mut() {
        let a = r.abs();
        if a <= delta {
            loss += 0.5 * *r * *r;
        } else {
            loss += delta * (a - 0.5 * delta);
            *r = delta * r.signum();
        }
        *r /= count;
    }
    Ok((loss / count, grad))
}

/// Adam with bias correction over an ordered list of parameter buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[usize], lr: f64) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_mlp(net: &Mlp, lr: f64) -> Self {
        Self::new(&net.param_shapes(), lr)
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "adam tracks {} buffers, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::DimensionMismatch("adam buffer shape".into()));
            }
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_mlp(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        self.step(net.param_slices_mut(), &grads.slices())
    }
}
