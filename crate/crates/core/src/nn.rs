//! Small dense network engine with hand-written backward passes.
//!
//! Layer weights are stored as `(fan_in, fan_out)` so a forward pass is
//! `x · W + b`. Every network ends in a [`Head`]; backward passes take the
//! gradient with respect to the pre-head output (the logits), which is what
//! the fused softmax/logistic losses below produce.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SuanError};
use crate::matrix::Matrix2;

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Raw outputs; used by the feature extractor.
    Identity,
    Softmax,
    /// Single-column sigmoid.
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub head: Head,
}

impl MlpParams {
    /// Validates layer chaining, bias widths and head compatibility.
    pub fn new(layers: Vec<Layer>, head: Head) -> Result<Self> {
        let params = Self { layers, head };
        params.validate()?;
        Ok(params)
    }

    /// Glorot-uniform weights and zero biases. `dims` lists the input width
    /// followed by every layer width; the last layer uses `last_activation`.
    pub fn random<R: Rng + ?Sized>(
        dims: &[usize],
        hidden_activation: Activation,
        last_activation: Activation,
        head: Head,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(SuanError::arg("a network needs an input width and at least one layer"));
        }
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)).collect();
                Layer {
                    weight: Matrix2::from_vec(fan_in, fan_out, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                    activation: if i + 1 == n { last_activation } else { hidden_activation },
                }
            })
            .collect();
        Self::new(layers, head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(SuanError::shape("network has no layers"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.fan_out() {
                return Err(SuanError::shape(format!(
                    "layer {i}: bias length {} != output width {}",
                    layer.bias.len(),
                    layer.fan_out()
                )));
            }
            if let Some(next) = self.layers.get(i + 1) {
                if next.fan_in() != layer.fan_out() {
                    return Err(SuanError::shape(format!(
                        "layer {} expects {} inputs but layer {i} emits {}",
                        i + 1,
                        next.fan_in(),
                        layer.fan_out()
                    )));
                }
            }
        }
        if self.head == Head::Logistic && self.output_dim() != 1 {
            return Err(SuanError::shape("logistic head needs a single output"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// Visits every parameter in a fixed order (per layer: weights, then bias).
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.iter()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix2,
    pub bias: Vec<f64>,
}

/// One gradient tensor per parameter tensor of an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix2::zeros(l.fan_in(), l.fan_out()),
                    bias: vec![0.0; l.fan_out()],
                })
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn matches(&self, params: &MlpParams) -> bool {
        self.layers.len() == params.layers.len()
            && self.layers.iter().zip(&params.layers).all(|(g, l)| {
                g.weight.rows() == l.fan_in()
                    && g.weight.cols() == l.fan_out()
                    && g.bias.len() == l.fan_out()
            })
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Self) -> Result<Self> {
        let same = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.rows() == b.weight.rows()
                    && a.weight.cols() == b.weight.cols()
                    && a.bias.len() == b.bias.len()
            });
        if !same {
            return Err(SuanError::shape("gradient sets differ in shape"));
        }
        let mut out = self.clone();
        for (o, v) in out.values_mut().zip(other.values()) {
            *o += v;
        }
        Ok(out)
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Intermediate values of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each layer.
    pub inputs: Vec<Matrix2>,
    /// Pre-activation of each layer.
    pub pre_activations: Vec<Matrix2>,
    /// Output of the last layer, before the head.
    pub logits: Matrix2,
}

pub fn mlp_forward(params: &MlpParams, inputs: &Matrix2) -> Result<(ForwardCache, Matrix2)> {
    if inputs.cols() != params.input_dim() {
        return Err(SuanError::shape(format!(
            "input has {} columns, network expects {}",
            inputs.cols(),
            params.input_dim()
        )));
    }
    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut x = inputs.clone();
    for layer in &params.layers {
        let mut z = x.matmul(&layer.weight)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let a = z.map(|v| layer.activation.apply(v));
        layer_inputs.push(x);
        pre_activations.push(z);
        x = a;
    }
    let outputs = match params.head {
        Head::Identity => x.clone(),
        Head::Softmax => softmax_rows(&x),
        Head::Logistic => x.map(sigmoid),
    };
    Ok((
        ForwardCache {
            inputs: layer_inputs,
            pre_activations,
            logits: x,
        },
        outputs,
    ))
}

/// Backpropagates `grad_logits` (gradient of the loss with respect to the
/// pre-head output) and returns the parameter gradients together with the
/// gradient with respect to the network input.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &ForwardCache,
    grad_logits: &Matrix2,
) -> Result<(GradientSet, Matrix2)> {
    if grad_logits.rows() != cache.logits.rows() || grad_logits.cols() != cache.logits.cols() {
        return Err(SuanError::shape(format!(
            "upstream gradient is {}x{}, outputs are {}x{}",
            grad_logits.rows(),
            grad_logits.cols(),
            cache.logits.rows(),
            cache.logits.cols()
        )));
    }
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut upstream = grad_logits.clone();
    for (i, layer) in params.layers.iter().enumerate().rev() {
        let pre = &cache.pre_activations[i];
        let mut delta = upstream;
        for (d, &p) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            *d *= layer.activation.derivative(p);
        }
        let weight = cache.inputs[i].t_matmul(&delta)?;
        let mut bias = vec![0.0; layer.fan_out()];
        for row in delta.iter_rows() {
            for (b, d) in bias.iter_mut().zip(row) {
                *b += d;
            }
        }
        upstream = delta.matmul_t(&layer.weight)?;
        grads.push(LayerGrad { weight, bias });
    }
    grads.reverse();
    Ok((GradientSet { layers: grads }, upstream))
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(logits: &Matrix2) -> Matrix2 {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Scales every nonzero row to unit Euclidean norm; zero rows pass through.
pub fn l2_normalize_rows(features: &Matrix2) -> Matrix2 {
    let mut out = features.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    out
}

/// Gradient through [`l2_normalize_rows`]: `(g − y·(y·g)) / ‖x‖` per row.
/// Zero rows pass the upstream gradient through unchanged.
pub fn l2_normalize_backward(features: &Matrix2, grad_out: &Matrix2) -> Matrix2 {
    let mut out = grad_out.clone();
    for r in 0..features.rows() {
        let x = features.row(r);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let g = grad_out.row(r);
        let dot: f64 = x.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / norm;
        for ((o, &xv), &gv) in out.row_mut(r).iter_mut().zip(x).zip(g) {
            *o = (gv - xv / norm * dot) / norm;
        }
    }
    out
}

/// Mean negative log-likelihood of `labels` under row-wise `probs`, and the
/// gradient of that mean with respect to the softmax logits.
pub fn cross_entropy(probs: &Matrix2, labels: &[usize]) -> Result<(f64, Matrix2)> {
    if probs.rows() != labels.len() {
        return Err(SuanError::shape(format!(
            "{} probability rows for {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if probs.rows() == 0 {
        return Ok((0.0, Matrix2::zeros(0, probs.cols())));
    }
    let n = probs.rows() as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        if y >= probs.cols() {
            return Err(SuanError::index(format!(
                "label {y} with {} classes",
                probs.cols()
            )));
        }
        loss -= probs.get(r, y).max(PROB_FLOOR).ln();
        grad.set(r, y, grad.get(r, y) - 1.0);
    }
    Ok((loss / n, grad.scale(1.0 / n)))
}

/// Weighted binary cross-entropy averaged over all entries, with the
/// gradient with respect to the logistic logits.
pub fn weighted_bce(probs: &[f64], targets: &[f64], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    if probs.len() != targets.len() || probs.len() != weights.len() {
        return Err(SuanError::shape(format!(
            "lengths differ: {} probs, {} targets, {} weights",
            probs.len(),
            targets.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(SuanError::arg(format!("weight {w} is negative")));
    }
    if probs.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = probs.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for ((&p, &t), &w) in probs.iter().zip(targets).zip(weights) {
        let pc = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        if w != 0.0 {
            loss -= w * (t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
        }
        grad.push(w * (p - t) / n);
    }
    Ok((loss / n, grad))
}

/// The backward rule of a gradient reversal layer: every entry times `−lambda`.
pub fn grl_scale(upstream: &GradientSet, lambda: f64) -> GradientSet {
    let mut out = upstream.clone();
    for v in out.values_mut() {
        *v *= -lambda;
    }
    out
}

/// Plain gradient descent, `θ ← θ − lr·g`.
pub fn sgd_step(params: &MlpParams, grads: &GradientSet, lr: f64) -> Result<MlpParams> {
    let mut out = params.clone();
    apply_sgd(&mut out, grads, lr)?;
    Ok(out)
}

pub fn apply_sgd(params: &mut MlpParams, grads: &GradientSet, lr: f64) -> Result<()> {
    if !grads.matches(params) {
        return Err(SuanError::shape("gradient set does not mirror the parameters"));
    }
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(SuanError::arg(format!("learning rate {lr} must be finite and >= 0")));
    }
    for (p, g) in params.params_mut().zip(grads.values()) {
        *p -= lr * g;
    }
    Ok(())
}

/// Central-difference gradient of `loss` at `params`, one parameter at a time.
pub fn finite_diff_gradient<F>(mut loss: F, params: &MlpParams, h: f64) -> Result<GradientSet>
where
    F: FnMut(&MlpParams) -> f64,
{
    if !(h > 0.0) {
        return Err(SuanError::arg(format!("step {h} must be positive")));
    }
    let mut probe = params.clone();
    let mut grads = GradientSet::zeros_like(params);
    let n = params.num_params();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = *probe.params_mut().nth(i).expect("index within num_params");
        *probe.params_mut().nth(i).unwrap() = orig + h;
        let up = loss(&probe);
        *probe.params_mut().nth(i).unwrap() = orig - h;
        let down = loss(&probe);
        *probe.params_mut().nth(i).unwrap() = orig;
        out.push((up - down) / (2.0 * h));
    }
    for (g, v) in grads.values_mut().zip(out) {
        *g = v;
    }
    Ok(grads)
}

/// Largest elementwise relative error between two gradient vectors, with
/// `floor` guarding the denominator for entries near zero.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
