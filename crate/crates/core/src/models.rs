//! Small differentiable classifiers with cross-entropy loss.
//!
//! Two kinds are supported, both bias-free:
//!
//! * `SoftmaxLinear`: `p = softmax(theta x)` with `theta` of shape
//!   `classes x inputs`, flattened row-major by class, so coordinate
//!   `c * inputs + j` multiplies feature `j` into logit `c`.
//! * `Mlp`: `p = softmax(W2 tanh(W1 x))`. The flat vector holds `W1`
//!   (`hidden x inputs`, row-major) followed by `W2` (`classes x hidden`,
//!   row-major).
//!
//! Gradients are means over the batch.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // method resolution falls back to std when a dev build links it
use num_traits::Float as _;
use rand::Rng;

use crate::error::{param_err, Error, Result};
use crate::numkit::{l1_distance, l2_clip, ParamVector};
use crate::rng::{gaussian, stream_rng, Stream};

/// Labeled feature vectors stored contiguously.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return param_err("feature dimension must be positive");
        }
        if features.len() != labels.len() * dim {
            return param_err("feature buffer does not match labels x dim");
        }
        if let Some(index) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            features,
            labels,
            dim,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return param_err("rows have non-uniform feature dimension");
        }
        Self::new(rows.concat(), labels, dim)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Vec::new(),
            labels: Vec::new(),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.features
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }

    /// Copies the listed examples, in order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.features(i));
            labels.push(self.labels[i]);
        }
        Batch {
            features,
            labels,
            dim: self.dim,
        }
    }

    /// Contiguous slice `[start, end)` of the batch.
    pub fn range(&self, start: usize, end: usize) -> Batch {
        Batch {
            features: self.features[start * self.dim..end * self.dim].to_vec(),
            labels: self.labels[start..end].to_vec(),
            dim: self.dim,
        }
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Batch> {
        Batch::new(self.features.clone(), labels, self.dim)
    }

    pub fn extend(&mut self, other: &Batch) -> Result<()> {
        if other.dim != self.dim && !other.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }
}

/// Architecture of a [`GradientOracle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum ModelKind {
    SoftmaxLinear {
        inputs: usize,
        classes: usize,
    },
    Mlp {
        inputs: usize,
        hidden: usize,
        classes: usize,
    },
}

impl ModelKind {
    pub fn param_count(&self) -> usize {
        match *self {
            ModelKind::SoftmaxLinear { inputs, classes } => classes * inputs,
            ModelKind::Mlp {
                inputs,
                hidden,
                classes,
            } => hidden * inputs + classes * hidden,
        }
    }

    pub fn inputs(&self) -> usize {
        match *self {
            ModelKind::SoftmaxLinear { inputs, .. } | ModelKind::Mlp { inputs, .. } => inputs,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            ModelKind::SoftmaxLinear { classes, .. } | ModelKind::Mlp { classes, .. } => classes,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ModelKind::SoftmaxLinear { inputs, classes } => inputs > 0 && classes > 0,
            ModelKind::Mlp {
                inputs,
                hidden,
                classes,
            } => inputs > 0 && hidden > 0 && classes > 0,
        };
        if ok {
            Ok(())
        } else {
            param_err("model dimensions must be positive")
        }
    }
}

/// A differentiable model plus its current parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientOracle {
    kind: ModelKind,
    params: ParamVector,
}

/// Numerically stable softmax, in place.
fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl GradientOracle {
    pub fn new(kind: ModelKind, params: ParamVector) -> Result<Self> {
        kind.validate()?;
        if params.dim() != kind.param_count() {
            return Err(Error::DimensionMismatch {
                expected: kind.param_count(),
                found: params.dim(),
            });
        }
        Ok(Self { kind, params })
    }

    pub fn zeros(kind: ModelKind) -> Result<Self> {
        Self::new(kind, ParamVector::zeros(kind.param_count()))
    }

    /// Gaussian initialization with standard deviation `scale`.
    pub fn init(kind: ModelKind, scale: f64, seed: u64) -> Result<Self> {
        kind.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let values = (0..kind.param_count())
            .map(|_| scale * gaussian(&mut rng))
            .collect();
        Self::new(kind, ParamVector::new(values)?)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if params.dim() != self.params.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.params.dim(),
                found: params.dim(),
            });
        }
        self.params = params;
        Ok(())
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        let mut out = self.clone();
        out.set_params(params)?;
        Ok(out)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.kind.inputs() {
            return Err(Error::DimensionMismatch {
                expected: self.kind.inputs(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn logits_into(&self, x: &[f64], hidden: &mut [f64], z: &mut [f64]) {
        let theta = self.params.as_slice();
        match self.kind {
            ModelKind::SoftmaxLinear { inputs, classes } => {
                for c in 0..classes {
                    let row = &theta[c * inputs..(c + 1) * inputs];
                    z[c] = row.iter().zip(x).map(|(w, xi)| w * xi).sum();
                }
            }
            ModelKind::Mlp {
                inputs,
                hidden: h,
                classes,
            } => {
                let (w1, w2) = theta.split_at(h * inputs);
                for k in 0..h {
                    let row = &w1[k * inputs..(k + 1) * inputs];
                    hidden[k] = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>().tanh();
                }
                for c in 0..classes {
                    let row = &w2[c * h..(c + 1) * h];
                    z[c] = row.iter().zip(hidden.iter()).map(|(w, hk)| w * hk).sum();
                }
            }
        }
    }

    fn hidden_len(&self) -> usize {
        match self.kind {
            ModelKind::SoftmaxLinear { .. } => 0,
            ModelKind::Mlp { hidden, .. } => hidden,
        }
    }

    /// Class probabilities for one input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut hidden = vec![0.0; self.hidden_len()];
        let mut z = vec![0.0; self.kind.classes()];
        self.logits_into(x, &mut hidden, &mut z);
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// Most probable class; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        self.check_input(x)?;
        let mut hidden = vec![0.0; self.hidden_len()];
        let mut z = vec![0.0; self.kind.classes()];
        self.logits_into(x, &mut hidden, &mut z);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        Ok(best)
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        self.check_batch(batch)?;
        let mut hidden = vec![0.0; self.hidden_len()];
        let mut z = vec![0.0; self.kind.classes()];
        let mut total = 0.0;
        for (x, y) in batch.iter() {
            self.logits_into(x, &mut hidden, &mut z);
            total += log_sum_exp(&z) - z[y];
        }
        Ok(total / batch.len() as f64)
    }

    /// Fraction of the batch predicted correctly.
    pub fn accuracy(&self, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        self.check_input(batch.features(0))?;
        let mut correct = 0usize;
        for (x, y) in batch.iter() {
            if self.predict(x)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / batch.len() as f64)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return param_err("batch must be nonempty");
        }
        if batch.dim() != self.kind.inputs() {
            return Err(Error::DimensionMismatch {
                expected: self.kind.inputs(),
                found: batch.dim(),
            });
        }
        if batch.labels().iter().any(|&y| y >= self.kind.classes()) {
            return param_err("label out of range for model");
        }
        Ok(())
    }

    /// Mean cross-entropy gradient over the batch, by backpropagation.
    pub fn gradient(&self, batch: &Batch) -> Result<ParamVector> {
        self.check_batch(batch)?;
        let theta = self.params.as_slice();
        let mut grad = vec![0.0; theta.len()];
        let classes = self.kind.classes();
        let mut hidden = vec![0.0; self.hidden_len()];
        let mut dh = vec![0.0; self.hidden_len()];
        let mut z = vec![0.0; classes];
        for (x, y) in batch.iter() {
            self.logits_into(x, &mut hidden, &mut z);
            softmax_in_place(&mut z);
            // dL/dz = p - onehot(y)
            z[y] -= 1.0;
            match self.kind {
                ModelKind::SoftmaxLinear { inputs, .. } => {
                    for (c, &dz) in z.iter().enumerate() {
                        let row = &mut grad[c * inputs..(c + 1) * inputs];
                        for (g, xi) in row.iter_mut().zip(x) {
                            *g += dz * xi;
                        }
                    }
                }
                ModelKind::Mlp {
                    inputs, hidden: h, ..
                } => {
                    let w2 = &theta[h * inputs..];
                    let (g1, g2) = grad.split_at_mut(h * inputs);
                    dh.iter_mut().for_each(|v| *v = 0.0);
                    for (c, &dz) in z.iter().enumerate() {
                        for k in 0..h {
                            g2[c * h + k] += dz * hidden[k];
                            dh[k] += w2[c * h + k] * dz;
                        }
                    }
                    for k in 0..h {
                        let da = dh[k] * (1.0 - hidden[k] * hidden[k]);
                        let row = &mut g1[k * inputs..(k + 1) * inputs];
                        for (g, xi) in row.iter_mut().zip(x) {
                            *g += da * xi;
                        }
                    }
                }
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        ParamVector::new(grad)
    }

    /// Runs `epochs` passes of minibatch SGD over `data` from the current
    /// parameters and returns the clipped delta `theta_local - theta`.
    ///
    /// Minibatches are consecutive slices of `data` in stored order; the last
    /// one may be short. `self` is not modified.
    pub fn local_update(
        &self,
        data: &Batch,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        clip: f64,
    ) -> Result<ParamVector> {
        if epochs == 0 || batch_size == 0 {
            return param_err("local_update needs epochs >= 1 and batch_size >= 1");
        }
        if data.is_empty() {
            return Err(Error::EmptyDevice { device: usize::MAX });
        }
        let mut local = self.clone();
        for _ in 0..epochs {
            let mut start = 0;
            while start < data.len() {
                let end = (start + batch_size).min(data.len());
                let g = local.gradient(&data.range(start, end))?;
                local.params.axpy(-lr, &g)?;
                start = end;
            }
        }
        let delta = local.params.sub(&self.params)?;
        l2_clip(&delta, clip)
    }
}

/// Per-coordinate gradient of a single example under the closed form
/// `g_ij = x_j (p_i - [i == y])`, written coordinate by coordinate.
pub fn softmax_closed_form_gradient(
    oracle: &GradientOracle,
    x: &[f64],
    y: usize,
) -> Result<ParamVector> {
    let ModelKind::SoftmaxLinear { inputs, classes } = oracle.kind() else {
        return param_err("closed-form gradient only exists for softmax_linear");
    };
    let p = oracle.forward(x)?;
    let mut g = vec![0.0; classes * inputs];
    for i in 0..classes {
        for j in 0..inputs {
            g[i * inputs + j] = if i == y {
                x[j] * (p[y] - 1.0)
            } else {
                x[j] * p[i]
            };
        }
    }
    ParamVector::new(g)
}

/// Empirical lower estimate of the coordinatewise Lipschitz constant
/// `max_i |g(theta1)[i] - g(theta2)[i]| / ||theta1 - theta2||_1`.
///
/// Each trial draws `theta1` as a Gaussian with a random scale in
/// `[0.1, 3]`, perturbs it by an L1 step of length log-uniform in
/// `[1e-4, 1]` along a random Gaussian direction, and evaluates both on a
/// random sub-batch of `data` of size 1 to 8.
pub fn empirical_coord_lipschitz(
    kind: ModelKind,
    data: &Batch,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return param_err("trials must be at least 1");
    }
    if data.is_empty() {
        return param_err("lipschitz estimate needs data");
    }
    let d = kind.param_count();
    let mut rng = stream_rng(seed, Stream::Lipschitz, 0);
    let mut best = 0.0f64;
    for _ in 0..trials {
        let scale = 0.1 + 2.9 * rng.random::<f64>();
        let theta1: Vec<f64> = (0..d)
            .map(|_| scale * gaussian(&mut rng))
            .collect();
        let dir: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        let dir_l1: f64 = dir.iter().map(|v: &f64| v.abs()).sum();
        let step = 10f64.powf(-4.0 * rng.random::<f64>());
        let theta2: Vec<f64> = theta1
            .iter()
            .zip(&dir)
            .map(|(t, u)| t + step * u / dir_l1)
            .collect();
        let size = 1 + rng.random_range(0..8.min(data.len()));
        let picks: Vec<usize> = (0..size).map(|_| rng.random_range(0..data.len())).collect();
        let batch = data.select(&picks);
        let a = GradientOracle::new(kind, ParamVector::new(theta1)?)?;
        let b = GradientOracle::new(kind, ParamVector::new(theta2)?)?;
        let dist = l1_distance(a.params(), b.params())?;
        if dist == 0.0 {
            continue;
        }
        let ga = a.gradient(&batch)?;
        let gb = b.gradient(&batch)?;
        let worst = ga
            .as_slice()
            .iter()
            .zip(gb.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        best = best.max(worst / dist);
    }
    Ok(best)
}
