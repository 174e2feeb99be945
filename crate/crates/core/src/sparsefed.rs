//! Server pipeline with error feedback and top-k extraction, plus the
//! count-sketch variant and the k-selection heuristic.
//!
//! A round takes the aggregated (already clipped) update `u` and:
//!
//! ```text
//! R <- rho R + u
//! W <- W + u          (or W <- W + R with `momentum_into_memory`)
//! D <- top_k(W)
//! W <- W - D
//! R <- R - D on the coordinates of D     (momentum masking)
//! ```
//!
//! The caller applies `D` to the model, scaled by the round's learning rate.

use alloc::vec::Vec;
#[allow(unused_imports)] // method resolution falls back to std when a dev build links it
use num_traits::Float as _;
use rand::seq::SliceRandom;

use crate::error::{param_err, Error, Result};
use crate::models::{Batch, GradientOracle};
use crate::numkit::{top_k, CountSketch, ParamVector, SketchShape, SparseUpdate};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseFedSpec {
    pub k: usize,
    pub rho: f64,
    /// Feed the momentum buffer, not the raw update, into the memory.
    pub momentum_into_memory: bool,
    pub mask_momentum: bool,
}

impl SparseFedSpec {
    pub fn new(k: usize, rho: f64) -> Self {
        Self {
            k,
            rho,
            momentum_into_memory: false,
            mask_momentum: true,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.k == 0 || self.k > d {
            return param_err(alloc::format!("k must lie in [1, {d}], got {}", self.k));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return param_err("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Server-side state carried between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    /// Error-feedback memory.
    pub w: ParamVector,
    /// Momentum buffer.
    pub r: ParamVector,
    pub t: usize,
    /// Momentum and error sketches for the sketched variant.
    pub sketches: Option<(CountSketch, CountSketch)>,
    dim: usize,
}

impl RoundState {
    pub fn new(dim: usize) -> Self {
        Self {
            w: ParamVector::zeros(dim),
            r: ParamVector::zeros(dim),
            t: 0,
            sketches: None,
            dim,
        }
    }

    pub fn with_sketches(dim: usize, shape: SketchShape) -> Result<Self> {
        let mut s = Self::new(dim);
        s.sketches = Some((CountSketch::new(shape)?, CountSketch::new(shape)?));
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Result of one server step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub delta: SparseUpdate,
    /// Fraction of the memory's l1 mass left behind by top-k this round.
    pub loss_fraction: f64,
}

fn mass_lost(before_l1: f64, delta: &SparseUpdate) -> f64 {
    if before_l1 > 0.0 {
        (1.0 - delta.l1_norm() / before_l1).max(0.0)
    } else {
        0.0
    }
}

pub fn sparsefed_step(
    state: &mut RoundState,
    u: &ParamVector,
    spec: &SparseFedSpec,
) -> Result<StepOutput> {
    if u.dim() != state.dim {
        return Err(Error::DimensionMismatch {
            expected: state.dim,
            found: u.dim(),
        });
    }
    spec.validate(state.dim)?;
    state.r.scale(spec.rho)?;
    state.r.add_assign(u)?;
    if spec.momentum_into_memory {
        state.w.add_assign(&state.r)?;
    } else {
        state.w.add_assign(u)?;
    }
    let before = state.w.l1_norm();
    let delta = top_k(&state.w, spec.k)?;
    {
        let w = state.w.as_mut_slice();
        for &i in delta.indices() {
            w[i] = 0.0;
        }
    }
    if spec.mask_momentum {
        let r = state.r.as_mut_slice();
        for (i, v) in delta.iter() {
            if spec.momentum_into_memory {
                r[i] = 0.0;
            } else {
                r[i] -= v;
            }
        }
    }
    state.t += 1;
    Ok(StepOutput {
        loss_fraction: mass_lost(before, &delta),
        delta,
    })
}

/// Sketched variant: averages the device sketches, folds them into the
/// momentum and error sketches, and extracts top-k from the unsketched
/// error. `eta` scales the momentum sketch into the error sketch, so the
/// returned delta is applied to the model unscaled.
pub fn fetchsgd_step(
    state: &mut RoundState,
    device_sketches: &[CountSketch],
    eta: f64,
    k: usize,
    rho: f64,
) -> Result<StepOutput> {
    let dim = state.dim;
    let (s_u, s_e) = match state.sketches.as_mut() {
        Some(pair) => (&mut pair.0, &mut pair.1),
        None => return param_err("round state carries no sketches"),
    };
    if device_sketches.is_empty() {
        return param_err("no device sketches");
    }
    if k == 0 || k > dim {
        return param_err("k must lie in [1, d]");
    }
    let mut mean = CountSketch::new(s_u.shape())?;
    for s in device_sketches {
        mean.add_assign(s)?;
    }
    mean.scale(1.0 / device_sketches.len() as f64)?;
    s_u.scale(rho)?;
    s_u.add_assign(&mean)?;
    s_e.axpy(eta, s_u)?;
    let estimate = s_e.unsketch(dim)?;
    let before = estimate.l1_norm();
    let delta = top_k(&estimate, k)?;
    s_e.accumulate_sparse(&delta, -1.0)?;
    state.t += 1;
    Ok(StepOutput {
        loss_fraction: mass_lost(before, &delta),
        delta,
    })
}

/// Bound on `|top_k(u + W) - u|_1` for per-round loss fraction `omega`.
pub fn gamma_bound(l: f64, d: usize, omega: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&omega) {
        return param_err("omega must lie in [0, 1)");
    }
    Ok(2.0 * l * (d as f64).sqrt() * omega / (1.0 - omega))
}

/// Bound on `|W|_1` for per-round loss fraction `omega`.
pub fn memory_bound(l: f64, d: usize, omega: f64) -> Result<f64> {
    Ok(gamma_bound(l, d, omega)? / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub k: usize,
    /// Average fraction of l1 mass lost at the chosen k.
    pub loss_fraction: f64,
    /// Set when no compressed k met the tolerance and `k = d` was returned.
    pub unattainable: bool,
}

/// Fraction of `g`'s l1 mass dropped by top-k.
pub fn topk_loss_fraction(g: &ParamVector, k: usize) -> Result<f64> {
    let total = g.l1_norm();
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(mass_lost(total, &top_k(g, k)?))
}

/// The grid `d/r, 2d/r, ...` followed by `d`.
pub fn k_grid(d: usize, r: usize) -> Vec<usize> {
    let step = (d / r.max(1)).max(1);
    let mut grid: Vec<usize> = (1..).map(|j| j * step).take_while(|&k| k < d).collect();
    grid.push(d);
    grid
}

/// Smallest grid `k` whose mean top-k loss fraction over `grads` is at
/// most `omega`.
pub fn select_k_from_gradients(grads: &[ParamVector], omega: f64, r: usize) -> Result<KSelection> {
    if !(omega > 0.0 && omega < 1.0) {
        return param_err("omega must lie in (0, 1)");
    }
    let d = match grads.first() {
        Some(g) => g.dim(),
        None => return param_err("no gradients to tune k on"),
    };
    if d == 0 || r == 0 {
        return param_err("dimension and iterations per epoch must be positive");
    }
    for &k in &k_grid(d, r) {
        let mut total = 0.0;
        for g in grads {
            total += topk_loss_fraction(g, k)?;
        }
        let avg = total / grads.len() as f64;
        if avg <= omega {
            return Ok(KSelection {
                k,
                loss_fraction: avg,
                unattainable: k == d,
            });
        }
    }
    unreachable!("k = d loses no mass")
}

/// Samples `n_samples` minibatch gradients of `batch_size` from `data` at
/// the oracle's current parameters and runs [`select_k_from_gradients`].
pub fn select_k(
    oracle: &GradientOracle,
    data: &Batch,
    omega: f64,
    r: usize,
    n_samples: usize,
    batch_size: usize,
    seed: u64,
) -> Result<KSelection> {
    if n_samples == 0 || batch_size == 0 || data.is_empty() {
        return param_err("select_k needs samples, a batch size and data");
    }
    let mut rng = stream_rng(seed, Stream::Tuning, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        order.shuffle(&mut rng);
        let take = batch_size.min(data.len());
        grads.push(oracle.gradient(&data.select(&order[..take]))?);
    }
    select_k_from_gradients(&grads, omega, r)
}
