//! Minimal dense network core with exact analytic gradients.
//!
//! Everything is `f64`. Layers are plain values; a forward pass that needs a
//! backward pass returns a tape holding the activations it consumed, and the
//! matching backward call takes that tape by value.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PVDAPAR1";

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("bad magic bytes: expected PVDAPAR1")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    MalformedHeader(String),
    #[error("truncated checkpoint: need {expected} bytes, file has {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after checkpoint payload")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Borrowed view of one named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Owned named tensor, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A collection of named parameter tensors with a stable order.
///
/// `tensors` and `tensors_mut` must list the same tensors in the same order.
/// Gradient containers are values of the same type, so every gradient has
/// exactly its parameter's shape.
pub trait Parameters {
    fn tensors(&self) -> Vec<TensorView<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    fn assign_flat(&mut self, flat: &[f64]) -> Result<(), NnError> {
        let mut tensors = self.tensors_mut();
        let total: usize = tensors.iter().map(|t| t.len()).sum();
        if total != flat.len() {
            return Err(NnError::ShapeMismatch(format!("{} values for {total} parameters", flat.len())));
        }
        let mut at = 0;
        for t in tensors.iter_mut() {
            let len = t.len();
            t.copy_from_slice(&flat[at..at + len]);
            at += len;
        }
        Ok(())
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }
}

/// Prepends `prefix.` to every tensor name.
pub fn prefixed<'a>(prefix: &str, views: Vec<TensorView<'a>>) -> Vec<TensorView<'a>> {
    views
        .into_iter()
        .map(|mut v| {
            v.name = format!("{prefix}.{}", v.name);
            v
        })
        .collect()
}

/// Fully connected layer `y = W x + b`, `W` stored row-major `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weights: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut layer = Self::zeros(dim, dim);
        for i in 0..dim {
            layer.weights[i * dim + i] = 1.0;
        }
        layer
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self { in_dim, out_dim, weights, bias: vec![0.0; out_dim] }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        if x.len() != self.in_dim {
            return Err(NnError::ShapeMismatch(format!(
                "dense layer expects {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        Ok(self
            .weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect())
    }

    /// Accumulates `dL/dW`, `dL/db` into `grad` and returns `dL/dx`.
    fn backward_into(&self, x: &[f64], upstream: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in upstream.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

impl Parameters for Dense {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            TensorView { name: "weight".into(), shape: vec![self.out_dim, self.in_dim], data: &self.weights },
            TensorView { name: "bias".into(), shape: vec![self.out_dim], data: &self.bias },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Input record of one [`linear_forward`] call.
#[derive(Debug, Clone)]
pub struct LinearTape {
    input: Vec<f64>,
}

pub fn linear_forward(layer: &Dense, x: &[f64]) -> Result<(Vec<f64>, LinearTape), NnError> {
    let y = layer.forward(x)?;
    Ok((y, LinearTape { input: x.to_vec() }))
}

/// Returns `(parameter gradients, input gradient)`.
pub fn linear_backward(layer: &Dense, tape: LinearTape, upstream: &[f64]) -> Result<(Dense, Vec<f64>), NnError> {
    if upstream.len() != layer.out_dim {
        return Err(NnError::ShapeMismatch(format!(
            "upstream has {} entries, layer has {} outputs",
            upstream.len(),
            layer.out_dim
        )));
    }
    let mut grad = Dense::zeros(layer.in_dim, layer.out_dim);
    let dx = layer.backward_into(&tape.input, upstream, &mut grad);
    Ok((grad, dx))
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Subgradient at exactly zero is taken as 0.
pub fn relu_backward(x: &[f64], upstream: &[f64]) -> Vec<f64> {
    x.iter().zip(upstream).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64, NnError> {
    match probs.get(label) {
        Some(&p) => Ok(-p.ln()),
        None => Err(NnError::LabelOutOfRange { label, classes: probs.len() }),
    }
}

/// Softmax cross-entropy from logits, via log-sum-exp.
///
/// Returns `(loss, dloss/dlogits, probabilities)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>, Vec<f64>), NnError> {
    if label >= logits.len() {
        return Err(NnError::LabelOutOfRange { label, classes: logits.len() });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[label];
    let probs: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
    let mut grad = probs.clone();
    grad[label] -= 1.0;
    Ok((loss, grad, probs))
}

/// Gradient reversal: identity forward.
pub fn grl_forward(x: &[f64]) -> Vec<f64> {
    x.to_vec()
}

/// Gradient reversal backward: `-alpha * upstream`.
pub fn grl_backward(upstream: &[f64], alpha: f64) -> Vec<f64> {
    upstream.iter().map(|&g| -alpha * g).collect()
}

/// Stack of dense layers with ReLU between consecutive layers. The last
/// layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations recorded by [`Mlp::forward_taped`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each hidden layer.
    hidden_pre: Vec<Vec<f64>>,
}

impl MlpTape {
    /// Smallest |pre-activation| over hidden units: distance to the ReLU kink.
    pub fn relu_margin(&self) -> f64 {
        self.hidden_pre.iter().flatten().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

impl Mlp {
    /// Builds `widths.len() - 1` layers with Glorot-uniform init.
    pub fn glorot(widths: &[usize], rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        Self { layers: widths.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect() }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        Self { layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect() }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = relu(&h);
            }
        }
        Ok(h)
    }

    pub fn forward_taped(&self, x: &[f64]) -> Result<(Vec<f64>, MlpTape), NnError> {
        let last = self.layers.len() - 1;
        let mut tape = MlpTape { inputs: Vec::with_capacity(self.layers.len()), hidden_pre: Vec::with_capacity(last) };
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            tape.inputs.push(h);
            if i < last {
                h = relu(&z);
                tape.hidden_pre.push(z);
            } else {
                h = z;
            }
        }
        Ok((h, tape))
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, tape: MlpTape, upstream: &[f64], grads: &mut Mlp) -> Result<Vec<f64>, NnError> {
        if upstream.len() != self.out_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "upstream has {} entries, MLP has {} outputs",
                upstream.len(),
                self.out_dim()
            )));
        }
        let MlpTape { inputs, mut hidden_pre } = tape;
        let mut g = upstream.to_vec();
        for (i, (layer, input)) in self.layers.iter().zip(&inputs).enumerate().rev() {
            if i + 1 < self.layers.len() {
                let pre = hidden_pre.pop().expect("tape records every hidden layer");
                g = relu_backward(&pre, &g);
            }
            g = layer.backward_into(input, &g, &mut grads.layers[i]);
        }
        Ok(g)
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layers.{i}"), l.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// SGD with classic momentum: `v <- mu v + g; p <- p - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<(), NnError> {
        let grad_views = grads.tensors();
        let mut param_slices = params.tensors_mut();
        if grad_views.len() != param_slices.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} gradient tensors for {} parameter tensors",
                grad_views.len(),
                param_slices.len()
            )));
        }
        for (p, g) in param_slices.iter().zip(&grad_views) {
            if p.len() != g.data.len() {
                return Err(NnError::ShapeMismatch(format!(
                    "gradient {} has {} entries, parameter has {}",
                    g.name,
                    g.data.len(),
                    p.len()
                )));
            }
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGradient(g.name.clone()));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = grad_views.iter().map(|g| vec![0.0; g.data.len()]).collect();
        }
        for ((p, g), v) in param_slices.iter_mut().zip(&grad_views).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g.data).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// Relative error between an analytic and a numeric derivative. Magnitudes
/// below `1e-5` are compared on an absolute scale so vanishing gradients do
/// not amplify round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Central finite differences of `f` at `x`.
pub fn finite_difference<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `analytic` with central differences of `f` (step [`FD_STEP`]).
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], tolerance: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    let numeric = finite_difference(f, x, FD_STEP);
    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst_index: None, checked: x.len(), tolerance, passed: true };
    if analytic.len() != numeric.len() {
        report.max_rel_error = f64::INFINITY;
        report.passed = false;
        return report;
    }
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = relative_error(a, n);
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_rel_error < tolerance;
    report
}

pub fn encode_checkpoint(tensors: &[TensorView<'_>]) -> Result<Vec<u8>, NnError> {
    let u32_of = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| NnError::MalformedHeader(format!("{what} = {v} exceeds u32")))
    };
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&u32_of(tensors.len(), "tensor count")?.to_le_bytes());
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "tensor {} has shape {:?} but {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        out.extend_from_slice(&u32_of(t.name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&u32_of(t.shape.len(), "rank")?.to_le_bytes());
        for &dim in &t.shape {
            out.extend_from_slice(&u32_of(dim, "dim")?.to_le_bytes());
        }
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], NnError> {
        let end = self.at.checked_add(len).ok_or_else(|| NnError::MalformedHeader("length overflows".into()))?;
        if end > self.bytes.len() {
            return Err(NnError::Truncated { expected: end, actual: self.bytes.len() });
        }
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<usize, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4-byte slice")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor>, NnError> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(NnError::BadMagic);
    }
    let mut r = Reader { bytes, at: 8 };
    let count = r.u32().map_err(|_| NnError::MalformedHeader("missing tensor count".into()))?;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| NnError::MalformedHeader("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()?;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| NnError::MalformedHeader(format!("tensor {name} size overflows")))?;
        let data = r.take(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push(NamedTensor { name, shape, data });
    }
    if r.at != bytes.len() {
        return Err(NnError::TrailingBytes(bytes.len() - r.at));
    }
    Ok(out)
}

/// Copies checkpoint tensors into `params`; names and shapes must match
/// `params.tensors()` exactly and in order.
pub fn load_into<P: Parameters>(params: &mut P, tensors: &[NamedTensor]) -> Result<(), NnError> {
    {
        let views = params.tensors();
        if views.len() != tensors.len() {
            return Err(NnError::ShapeMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                views.len()
            )));
        }
        for (v, t) in views.iter().zip(tensors) {
            if v.name != t.name || v.shape != t.shape {
                return Err(NnError::ShapeMismatch(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    t.name, t.shape, v.name, v.shape
                )));
            }
        }
    }
    for (slot, t) in params.tensors_mut().into_iter().zip(tensors) {
        slot.copy_from_slice(&t.data);
    }
    Ok(())
}

pub fn save_checkpoint<P: Parameters>(path: impl AsRef<Path>, params: &P) -> Result<(), NnError> {
    let bytes = encode_checkpoint(&params.tensors())?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>, NnError> {
    decode_checkpoint(&fs::read(path)?)
}
