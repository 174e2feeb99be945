//! Dense vector primitives, clipping, top-k extraction and count sketches.
//!
//! Every other module speaks in terms of [`ParamVector`]: a fixed-length,
//! always-finite `f64` vector. Mutating methods re-check finiteness and
//! report the first offending coordinate instead of silently propagating
//! NaN through a simulation.

mod sketch;
mod topk;

pub use sketch::{CountSketch, SketchShape};
pub use topk::{top_k, SparseUpdate};

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // method resolution falls back to std when a dev build links it
use num_traits::Float as _;


use crate::error::{Error, Result};

/// Dense model-parameter (or update) vector with a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for hot loops inside the crate. Callers must finish
    /// with [`ParamVector::ensure_finite`] if the writes can overflow.
    #[inline]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        check_finite(&self.values)
    }

    fn check_dim(&self, other: &ParamVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(())
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        self.check_dim(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        self.ensure_finite()
    }

    pub fn add_assign(&mut self, other: &ParamVector) -> Result<()> {
        self.check_dim(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        self.ensure_finite()
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        ParamVector::new(values)
    }

    pub fn scale(&mut self, alpha: f64) -> Result<()> {
        for v in &mut self.values {
            *v *= alpha;
        }
        self.ensure_finite()
    }

    pub fn scaled(&self, alpha: f64) -> Result<ParamVector> {
        let mut out = self.clone();
        out.scale(alpha)?;
        Ok(out)
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }
}

impl core::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Scales `u` by `min(1, bound / ||u||_2)`.
///
/// The zero vector passes through unchanged and an infinite bound is the
/// identity.
pub fn l2_clip(u: &ParamVector, bound: f64) -> Result<ParamVector> {
    if bound.is_nan() || bound < 0.0 {
        return crate::error::param_err("clip bound must be nonnegative");
    }
    u.ensure_finite()?;
    let norm = u.l2_norm();
    if norm <= bound || norm == 0.0 {
        return Ok(u.clone());
    }
    let mut out = u.clone();
    out.scale(bound / norm)?;
    // Rounding can leave the norm a hair above the bound.
    let after = out.l2_norm();
    if after > bound {
        out.scale(bound / after)?;
    }
    Ok(out)
}

/// Sum of absolute coordinate differences.
pub fn l1_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.check_dim(b)?;
    Ok(a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs())
        .sum())
}
