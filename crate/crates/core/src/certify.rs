//! Certified radii for training-time poisoning.
//!
//! With per-round l1 corruption budget `rho`, coordinate Lipschitz constant
//! `c`, sparsification deviation `gamma` and `w = min(d, 2k)` the distance
//! between benign and poisoned models obeys
//!
//! ```text
//! r_t = (1 + w c lambda(t)) r_{t-1} + lambda(t) (rho + 2 gamma),   r_0 = 0
//! ```
//!
//! and the closed form `Lambda(T) (1 + w c)^Lambda(T) (rho + 2 gamma)`, with
//! `Lambda(T)` the summed learning rate. The closed form dominates the
//! recurrence when every `lambda(t)` is 0 or at least 1 (its Bernoulli step
//! needs exponents of at least one); for small learning rates over many
//! rounds it can fall below the recurrence.

use alloc::vec::Vec;
#[allow(unused_imports)] // method resolution falls back to std when a dev build links it
use num_traits::Float as _;

use crate::error::{param_err, Result};
use crate::numkit::{l1_distance, ParamVector};

/// Where the Lipschitz constant came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LipschitzSource {
    /// Proven bound (1/4 for softmax regression on inputs in `[0, 1]`).
    Analytic,
    /// Sampled lower estimate; radii built on it are heuristic.
    Empirical,
}

/// Constant for softmax regression with features in `[0, 1]`.
pub const SOFTMAX_UNIT_CUBE_C: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct RadiusParams {
    pub rho: f64,
    pub c: f64,
    pub gamma: f64,
    pub k: usize,
    pub d: usize,
    /// `lambda(1), ..., lambda(T)`.
    pub lambdas: Vec<f64>,
    pub c_source: LipschitzSource,
}

/// Which one-step recurrence to iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Recurrence {
    /// `alpha = 1 + w c lambda`, `beta = rho + 2 gamma`.
    #[default]
    Proof,
    /// `alpha = 1 + 2 lambda c k`, `beta = rho + gamma`.
    Printed,
}

impl RadiusParams {
    pub fn constant(rho: f64, c: f64, gamma: f64, k: usize, d: usize, lambda: f64, t: usize) -> Self {
        Self {
            rho,
            c,
            gamma,
            k,
            d,
            lambdas: alloc::vec![lambda; t],
            c_source: LipschitzSource::Analytic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if !(finite_nonneg(self.rho) && finite_nonneg(self.c) && finite_nonneg(self.gamma)) {
            return param_err("rho, c and gamma must be finite and nonnegative");
        }
        if self.k > self.d {
            return param_err("k must not exceed d");
        }
        if !self.lambdas.iter().all(|&l| finite_nonneg(l)) {
            return param_err("learning rates must be finite and nonnegative");
        }
        Ok(())
    }

    /// `min(d, 2k)`.
    pub fn w(&self) -> usize {
        self.d.min(2 * self.k)
    }

    /// Summed learning rate.
    pub fn big_lambda(&self) -> f64 {
        self.lambdas.iter().sum()
    }

    pub fn rounds(&self) -> usize {
        self.lambdas.len()
    }

    /// Parameters of the unsparsified protocol: `w = d`, `gamma = 0`.
    pub fn dense(&self) -> Self {
        Self {
            k: self.d,
            gamma: 0.0,
            ..self.clone()
        }
    }
}

/// Radius after every round `1..=T`.
pub fn radius_series(p: &RadiusParams, variant: Recurrence) -> Result<Vec<f64>> {
    p.validate()?;
    let w = p.w() as f64;
    let mut r = 0.0;
    Ok(p.lambdas
        .iter()
        .map(|&lam| {
            let (alpha, beta) = match variant {
                Recurrence::Proof => (1.0 + w * p.c * lam, p.rho + 2.0 * p.gamma),
                Recurrence::Printed => (1.0 + 2.0 * lam * p.c * p.k as f64, p.rho + p.gamma),
            };
            r = r * alpha + lam * beta;
            r
        })
        .collect())
}

pub fn radius_recurrence(p: &RadiusParams) -> Result<f64> {
    radius_recurrence_with(p, Recurrence::Proof)
}

pub fn radius_recurrence_with(p: &RadiusParams, variant: Recurrence) -> Result<f64> {
    Ok(radius_series(p, variant)?.last().copied().unwrap_or(0.0))
}

/// Closed-form radius. `sparse = false` uses `w = d` and ignores `gamma`.
pub fn radius_closed_form(p: &RadiusParams, sparse: bool) -> Result<f64> {
    p.validate()?;
    let big = p.big_lambda();
    let (w, beta) = if sparse {
        (p.w() as f64, p.rho + 2.0 * p.gamma)
    } else {
        (p.d as f64, p.rho)
    };
    Ok(big * (1.0 + w * p.c).powf(big) * beta)
}

/// Per-round corruption budget implied by clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClippingRho {
    /// `p L`.
    pub literal: f64,
    /// `p L sqrt(d)`, the largest l1 mass inside the l2 ball.
    pub worst_case_l1: f64,
}

pub fn rho_from_clipping(p_frac: f64, l: f64, d: usize) -> Result<ClippingRho> {
    if !(0.0..=1.0).contains(&p_frac) {
        return param_err("compromised fraction must lie in [0, 1]");
    }
    if !(l >= 0.0) {
        return param_err("clip bound must be nonnegative");
    }
    let literal = p_frac * l;
    Ok(ClippingRho {
        literal,
        worst_case_l1: literal * (d as f64).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    /// `|theta_t - theta*_t|_1` for each round.
    pub distances: Vec<f64>,
    /// Recurrence radius for each round.
    pub radii: Vec<f64>,
    /// Final distance within the final radius.
    pub bound_holds: bool,
    /// Every prefix within its radius.
    pub holds_every_round: bool,
    /// Set when `c` is an empirical estimate.
    pub heuristic: bool,
}

/// Relative slack on the radius comparison. The injected corruption is
/// scaled to exactly the budget, so the first-round drift equals the radius
/// up to rounding.
pub const DRIFT_REL_TOL: f64 = 1e-9;

/// Compares paired traces (parameters after rounds `1..=T`) with the
/// recurrence radius.
pub fn drift_check(
    benign: &[ParamVector],
    poisoned: &[ParamVector],
    p: &RadiusParams,
) -> Result<DriftReport> {
    if benign.len() != poisoned.len() {
        return param_err("paired traces differ in length");
    }
    if benign.len() != p.rounds() {
        return param_err("trace length differs from the number of rounds");
    }
    let distances = benign
        .iter()
        .zip(poisoned)
        .map(|(a, b)| l1_distance(a, b))
        .collect::<Result<Vec<_>>>()?;
    let radii = radius_series(p, Recurrence::Proof)?;
    let within = |d: f64, r: f64| d <= r * (1.0 + DRIFT_REL_TOL);
    let holds_every_round = distances.iter().zip(&radii).all(|(&d, &r)| within(d, r));
    let bound_holds = match (distances.last(), radii.last()) {
        (Some(&d), Some(&r)) => within(d, r),
        _ => true,
    };
    Ok(DriftReport {
        distances,
        radii,
        bound_holds,
        holds_every_round,
        heuristic: p.c_source == LipschitzSource::Empirical,
    })
}
