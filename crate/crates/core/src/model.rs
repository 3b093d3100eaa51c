//! Fully connected ReLU regression network with exact gradients.
//!
//! Each layer stores its weight as an order-3 tensor `(out, in, 1)` and its
//! bias as `(out, 1, 1)`, the same shapes the curvature blocks act on.
//! ReLU follows every layer except the last. The derivative of ReLU at
//! exactly zero is taken to be zero.
//!
//! The flat parameter layout ([`ParamVector`]) is layer-major with the
//! weight before the bias, each tensor in row-major order. Checkpoints rely
//! on this order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{axpy, dot, Tensor};

/// `1 → 40 → 40 → 1`.
pub const DEFAULT_SIZES: [usize; 4] = [1, 40, 40, 1];

/// Default finite-difference step for [`hvp`], applied to the direction
/// after normalizing it to unit max-norm.
pub const HVP_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// The network. Gradients and other parameter-shaped quantities reuse this
/// type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Flat view of every parameter in the canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return invalid("network needs at least one layer");
        }
        for (k, layer) in layers.iter().enumerate() {
            let (ws, bs) = (layer.weight.shape(), layer.bias.shape());
            if ws.len() != 3 || ws[2] != 1 {
                return invalid(format!("layer {k}: weight must have shape (out, in, 1), got {ws:?}"));
            }
            if bs != [ws[0], 1, 1] {
                return invalid(format!("layer {k}: bias must have shape ({}, 1, 1), got {bs:?}", ws[0]));
            }
            if k > 0 && layers[k - 1].fan_out() != layer.fan_in() {
                return invalid(format!(
                    "layer {k}: input width {} does not match previous output width {}",
                    layer.fan_in(),
                    layers[k - 1].fan_out()
                ));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return invalid("need at least input and output widths");
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                Ok(Dense {
                    weight: Tensor::zeros(&[w[1], w[0], 1])?,
                    bias: Tensor::zeros(&[w[1], 1, 1])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }

    /// Glorot-uniform weights and zero biases.
    pub fn glorot(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut net = Mlp::zeros(sizes)?;
        for layer in &mut net.layers {
            let bound = (6.0 / (layer.fan_in() + layer.fan_out()) as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].fan_in())
            .chain(self.layers.iter().map(Dense::fan_out))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Parameter tensors in canonical order: `W1, b1, W2, b2, ...`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_tensors(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn to_vector(&self) -> ParamVector {
        let mut v = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            v.extend_from_slice(t.data());
        }
        ParamVector(v)
    }

    pub fn from_vector(sizes: &[usize], v: &ParamVector) -> Result<Self> {
        let mut net = Mlp::zeros(sizes)?;
        net.assign_vector(v)?;
        Ok(net)
    }

    pub fn assign_vector(&mut self, v: &ParamVector) -> Result<()> {
        if v.len() != self.num_params() {
            return invalid(format!(
                "parameter vector has length {}, network has {} parameters",
                v.len(),
                self.num_params()
            ));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&v.0[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Mlp {
        let mut z = self.clone();
        z.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        z
    }

    pub fn same_layout(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len() && self.tensors().zip(other.tensors()).all(|(a, b)| a.same_shape(b))
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Mlp) {
        debug_assert!(self.same_layout(other));
        for (x, y) in self.tensors_mut().zip(other.tensors()) {
            x.axpy(a, y);
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.tensors_mut().for_each(|t| t.scale(a));
    }

    pub fn dot(&self, other: &Mlp) -> f64 {
        self.tensors().zip(other.tensors()).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.data().iter().all(|x| x.is_finite()))
    }

    pub fn forward(&self, x: f64) -> f64 {
        self.forward_batch(&[x])[0]
    }

    pub fn forward_batch(&self, xs: &[f64]) -> Vec<f64> {
        let mut act = xs.to_vec();
        let mut width = 1;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = affine(layer, &act, width, xs.len());
            if k != last {
                z.iter_mut().for_each(|v| *v = relu(*v));
            }
            act = z;
            width = layer.fan_out();
        }
        act
    }

    fn check_width(&self) -> Result<()> {
        let sizes = self.sizes();
        if sizes[0] != 1 || sizes[sizes.len() - 1] != 1 {
            return invalid(format!("expected a scalar-to-scalar network, got widths {sizes:?}"));
        }
        Ok(())
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Batch-major `z[b, o] = bias[o] + Σ_i W[o, i] a[b, i]`.
fn affine(layer: &Dense, act: &[f64], width: usize, batch: usize) -> Vec<f64> {
    let out = layer.fan_out();
    let w = layer.weight.data();
    let bias = layer.bias.data();
    let mut z = vec![0.0; batch * out];
    for b in 0..batch {
        let a = &act[b * width..(b + 1) * width];
        for o in 0..out {
            z[b * out + o] = bias[o] + dot(&w[o * width..(o + 1) * width], a);
        }
    }
    z
}

fn check_data(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return invalid("empty data set");
    }
    if xs.len() != ys.len() {
        return invalid(format!("{} inputs but {} targets", xs.len(), ys.len()));
    }
    Ok(())
}

/// Mean squared error over the data set.
pub fn mse_loss(net: &Mlp, xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_data(xs, ys)?;
    net.check_width()?;
    let preds = net.forward_batch(xs);
    let sum: f64 = preds.iter().zip(ys).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(sum / xs.len() as f64)
}

/// Loss and its exact gradient, shaped like the parameters.
pub fn loss_and_grad(net: &Mlp, xs: &[f64], ys: &[f64]) -> Result<(f64, Mlp)> {
    check_data(xs, ys)?;
    net.check_width()?;
    let batch = xs.len();
    let last = net.layers.len() - 1;

    // Activations entering each layer; pre-activations of hidden layers.
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(net.layers.len());
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(last);
    let mut act = xs.to_vec();
    let mut width = 1;
    for (k, layer) in net.layers.iter().enumerate() {
        let z = affine(layer, &act, width, batch);
        inputs.push(act);
        width = layer.fan_out();
        if k != last {
            act = z.iter().map(|&v| relu(v)).collect();
            pre.push(z);
        } else {
            act = z;
        }
    }

    let scale = 2.0 / batch as f64;
    let mut loss = 0.0;
    let mut delta: Vec<f64> = act
        .iter()
        .zip(ys)
        .map(|(p, y)| {
            loss += (p - y) * (p - y);
            scale * (p - y)
        })
        .collect();
    loss /= batch as f64;

    let mut grad = net.zeros_like();
    for k in (0..net.layers.len()).rev() {
        let layer = &net.layers[k];
        let (out, inp) = (layer.fan_out(), layer.fan_in());
        let a = &inputs[k];
        {
            let g = &mut grad.layers[k];
            let gw = g.weight.data_mut();
            for b in 0..batch {
                let a_row = &a[b * inp..(b + 1) * inp];
                for o in 0..out {
                    let d = delta[b * out + o];
                    if d != 0.0 {
                        axpy(&mut gw[o * inp..(o + 1) * inp], d, a_row);
                    }
                }
            }
            let gb = g.bias.data_mut();
            for b in 0..batch {
                for o in 0..out {
                    gb[o] += delta[b * out + o];
                }
            }
        }
        if k == 0 {
            break;
        }
        let w = layer.weight.data();
        let z = &pre[k - 1];
        let mut prev = vec![0.0; batch * inp];
        for b in 0..batch {
            let row = &mut prev[b * inp..(b + 1) * inp];
            for o in 0..out {
                let d = delta[b * out + o];
                if d != 0.0 {
                    axpy(row, d, &w[o * inp..(o + 1) * inp]);
                }
            }
            for (v, &zi) in row.iter_mut().zip(&z[b * inp..(b + 1) * inp]) {
                if zi <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        delta = prev;
    }
    Ok((loss, grad))
}

pub fn loss_grad(net: &Mlp, xs: &[f64], ys: &[f64]) -> Result<Mlp> {
    loss_and_grad(net, xs, ys).map(|(_, g)| g)
}

/// Hessian-vector product of the loss by central differences of the exact
/// gradient. The direction is normalized to unit max-norm before stepping
/// by `h`, and the result is scaled back.
pub fn hvp(net: &Mlp, xs: &[f64], ys: &[f64], v: &ParamVector, h: f64) -> Result<ParamVector> {
    if v.len() != net.num_params() {
        return invalid(format!(
            "direction has length {}, network has {} parameters",
            v.len(),
            net.num_params()
        ));
    }
    if h.is_nan() || h <= 0.0 {
        return invalid(format!("step must be positive, got {h}"));
    }
    let sizes = net.sizes();
    let dir = Mlp::from_vector(&sizes, v)?;
    hvp_tensors(net, xs, ys, &dir, h).map(|m| m.to_vector())
}

/// [`hvp`] with the direction given in parameter-tensor form.
pub fn hvp_tensors(net: &Mlp, xs: &[f64], ys: &[f64], dir: &Mlp, h: f64) -> Result<Mlp> {
    let s = dir
        .tensors()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    if s == 0.0 {
        check_data(xs, ys)?;
        return Ok(net.zeros_like());
    }
    if !s.is_finite() {
        return Err(Error::NumericFailure("non-finite HVP direction".into()));
    }
    let step = h / s;
    let mut plus = net.clone();
    plus.axpy(step, dir);
    let mut minus = net.clone();
    minus.axpy(-step, dir);
    let mut out = loss_grad(&plus, xs, ys)?;
    out.axpy(-1.0, &loss_grad(&minus, xs, ys)?);
    out.scale(1.0 / (2.0 * step));
    if !out.is_finite() {
        return Err(Error::NumericFailure("non-finite Hessian-vector product".into()));
    }
    Ok(out)
}

/// Default `1 → 40 → 40 → 1` network, deterministic in `seed`.
pub fn init_weights(seed: u64) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mlp::glorot(&DEFAULT_SIZES, &mut rng).expect("default sizes are valid")
}
