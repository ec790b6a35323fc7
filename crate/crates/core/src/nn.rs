//! Dense networks with hand-written backpropagation.

use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Floor applied inside `ln` so a zero probability yields a finite loss.
pub const PROB_FLOOR: f64 = 1e-12;

static STAMP: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(output, input),
            bias: vec![0.0; output],
            activation,
        }
    }

    /// He-scaled normal weights, zero bias.
    pub fn he(input: usize, output: usize, activation: Activation, rng: &mut impl rand::Rng) -> Self {
        let std = (2.0 / input.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weights = Matrix::from_fn(output, input, |_, _| normal.sample(rng));
        Self {
            weights,
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }

    fn affine(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul_t(&self.weights)?;
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(z)
    }
}

/// Stack of dense layers. Every parameter mutation refreshes an internal stamp
/// so caches from an older parameter state are rejected by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    stamp: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::shape(
                    format!("layer {} input {}", i + 1, w[0].output_dim()),
                    w[1].input_dim(),
                ));
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::shape(format!("bias of {}", l.output_dim()), l.bias.len()));
            }
            if !l.weights.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::invalid("non-finite parameter"));
            }
        }
        Ok(Self {
            layers,
            stamp: next_stamp(),
        })
    }

    /// ReLU on every hidden layer, identity on the output layer.
    /// `dims = [input, hidden.., output]`.
    pub fn he_init(dims: &[usize], rng: &mut impl rand::Rng) -> Result<Self> {
        Self::build(dims, |i, o, act| DenseLayer::he(i, o, act, rng))
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::build(dims, DenseLayer::zeros)
    }

    fn build(dims: &[usize], mut make: impl FnMut(usize, usize, Activation) -> DenseLayer) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("need at least input and output dims"));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::None } else { Activation::Relu };
                make(w[0], w[1], act)
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    /// `[input, hidden.., output]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::output_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Parameter `i` in layer order, weights row-major before bias.
    pub fn param(&self, mut i: usize) -> f64 {
        for l in &self.layers {
            let nw = l.weights.rows() * l.weights.cols();
            if i < nw {
                return l.weights.as_slice()[i];
            }
            i -= nw;
            if i < l.bias.len() {
                return l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut i: usize, v: f64) {
        self.stamp = next_stamp();
        for l in &mut self.layers {
            let nw = l.weights.rows() * l.weights.cols();
            if i < nw {
                l.weights.as_mut_slice()[i] = v;
                return;
            }
            i -= nw;
            if i < l.bias.len() {
                l.bias[i] = v;
                return;
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.stamp = next_stamp();
        &mut self.layers
    }

    /// FNV-1a over every parameter's bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.layers {
            for v in l.weights.as_slice().iter().chain(&l.bias) {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                format!("batch width {}", self.input_dim()),
                x.cols(),
            ));
        }
        Ok(())
    }

    /// Output logits without keeping intermediates.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut a = x.clone();
        for l in &self.layers {
            a = l.affine(&a)?;
            if l.activation == Activation::Relu {
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(a)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for l in &self.layers {
            let z = l.affine(&a)?;
            let out = match l.activation {
                Activation::Relu => z.map(|v| v.max(0.0)),
                Activation::None => z.clone(),
            };
            inputs.push(a);
            pre.push(z);
            a = out;
        }
        Ok((
            a,
            ForwardCache {
                stamp: self.stamp,
                inputs,
                pre,
            },
        ))
    }

    /// Forward pass that counts every multiply it performs.
    pub fn forward_instrumented(&self, x: &Matrix) -> Result<(Matrix, u64)> {
        self.check_input(x)?;
        let mut multiplies = 0u64;
        let mut a = x.clone();
        for l in &self.layers {
            let mut z = Matrix::zeros(a.rows(), l.output_dim());
            for i in 0..a.rows() {
                for o in 0..l.output_dim() {
                    let mut acc = 0.0;
                    for (xv, wv) in a.row(i).iter().zip(l.weights.row(o)) {
                        acc += xv * wv;
                        multiplies += 1;
                    }
                    acc += l.bias[o];
                    z[(i, o)] = match l.activation {
                        Activation::Relu => acc.max(0.0),
                        Activation::None => acc,
                    };
                }
            }
            a = z;
        }
        Ok((a, multiplies))
    }

    /// Parameter gradients and the gradient w.r.t. the network input.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if cache.stamp != self.stamp || cache.inputs.len() != self.layers.len() {
            return Err(Error::invalid(
                "forward cache does not match the current parameters",
            ));
        }
        let batch = cache.inputs[0].rows();
        if upstream.shape() != (batch, self.output_dim()) {
            return Err(Error::shape(
                format!("{batch}x{}", self.output_dim()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for (li, l) in self.layers.iter().enumerate().rev() {
            if l.activation == Activation::Relu {
                let z = &cache.pre[li];
                for (d, &zv) in delta.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if zv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let dw = delta.t_matmul(&cache.inputs[li])?;
            let db = delta.col_sums();
            delta = delta.matmul(&l.weights)?;
            grads.push(LayerGrad {
                weights: dw,
                bias: db,
            });
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, delta))
    }
}

/// Intermediates from [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Same ordering as [`Mlp::param`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weights.scale(k);
            l.bias.iter_mut().for_each(|b| *b *= k);
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) -> Result<()> {
        self.check_shapes(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.as_mut_slice().iter_mut().zip(b.weights.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.as_slice().iter().chain(&l.bias).all(|&v| v == 0.0))
    }

    fn check_shapes(&self, other: &MlpGrads) -> Result<()> {
        let ok = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.shape() == b.weights.shape() && a.bias.len() == b.bias.len()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("gradient shapes do not match"))
        }
    }
}

/// Numerically stable row softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
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

/// Maps a gradient w.r.t. softmax outputs to one w.r.t. the logits.
pub fn softmax_backward(probs: &Matrix, grad_probs: &Matrix) -> Matrix {
    assert_eq!(probs.shape(), grad_probs.shape());
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let g = grad_probs.row(i);
        let inner = dot(p, g);
        for ((o, &pv), &gv) in out.row_mut(i).iter_mut().zip(p).zip(g) {
            *o = pv * (gv - inner);
        }
    }
    out
}

/// `Σ_j w_j · (−ln p[j][y_j])` and its gradient w.r.t. the logits that
/// produced `probs`, `w_j · (p_j − onehot(y_j))`.
pub fn weighted_cross_entropy(probs: &Matrix, targets: &[usize], weights: &[f64]) -> Result<(f64, Matrix)> {
    let (m, c) = probs.shape();
    if targets.len() != m || weights.len() != m {
        return Err(Error::shape(
            format!("{m} targets and weights"),
            format!("{} targets, {} weights", targets.len(), weights.len()),
        ));
    }
    if let Some(&y) = targets.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("target {y} out of range for {c} classes")));
    }
    if weights.iter().any(|&w| w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::invalid("weights must be non-negative with positive sum"));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(m, c);
    for j in 0..m {
        let w = weights[j];
        if w == 0.0 {
            continue;
        }
        let y = targets[j];
        loss += w * -probs[(j, y)].max(PROB_FLOOR).ln();
        for (g, &p) in grad.row_mut(j).iter_mut().zip(probs.row(j)) {
            *g = w * p;
        }
        grad[(j, y)] -= w;
    }
    Ok((loss, grad))
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: MlpGrads,
}

impl SgdState {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(mlp: &Mlp, learning_rate: f64, momentum: f64) -> Result<Self> {
        if learning_rate <= 0.0 || !learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: MlpGrads::zeros_like(mlp),
        })
    }

    pub fn velocity(&self) -> &MlpGrads {
        &self.velocity
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &MlpGrads) -> Result<()> {
        self.velocity.check_shapes(grads)?;
        if mlp.layers.len() != grads.layers.len()
            || mlp
                .layers
                .iter()
                .zip(&grads.layers)
                .any(|(l, g)| l.weights.shape() != g.weights.shape())
        {
            return Err(Error::invalid("gradient shapes do not match the model"));
        }
        let (mu, lr) = (self.momentum, self.learning_rate);
        for ((layer, v), g) in mlp
            .layers_mut()
            .iter_mut()
            .zip(&mut self.velocity.layers)
            .zip(&grads.layers)
        {
            for ((p, vv), gv) in layer
                .weights
                .as_mut_slice()
                .iter_mut()
                .zip(v.weights.as_mut_slice())
                .zip(g.weights.as_slice())
            {
                *vv = mu * *vv + gv;
                *p -= lr * *vv;
            }
            for ((p, vv), gv) in layer.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                *vv = mu * *vv + gv;
                *p -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params_checked: usize,
}

/// Compares analytic gradients against central differences for every
/// parameter of every model. `loss_fn` returns the loss and one gradient set
/// per model. Relative error is `|ga − gn| / max(|ga|, |gn|, 1e-8)`.
pub fn gradient_check<F>(models: &mut [Mlp], mut loss_fn: F, epsilon: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Mlp]) -> Result<(f64, Vec<MlpGrads>)>,
{
    let (_, grads) = loss_fn(models)?;
    if grads.len() != models.len() {
        return Err(Error::invalid("loss function must return one gradient per model"));
    }
    let analytic: Vec<Vec<f64>> = grads.iter().map(MlpGrads::flatten).collect();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for mi in 0..models.len() {
        if analytic[mi].len() != models[mi].param_count() {
            return Err(Error::invalid("gradient length does not match parameter count"));
        }
        for pi in 0..models[mi].param_count() {
            let orig = models[mi].param(pi);
            models[mi].set_param(pi, orig + epsilon);
            let plus = loss_fn(models)?.0;
            models[mi].set_param(pi, orig - epsilon);
            let minus = loss_fn(models)?.0;
            models[mi].set_param(pi, orig);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let ga = analytic[mi][pi];
            let rel = (ga - numeric).abs() / ga.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        params_checked: checked,
    })
}

/// Random batch helper for tests and the `gradcheck` command.
pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}
