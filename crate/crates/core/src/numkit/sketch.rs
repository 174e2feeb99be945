//! Count sketch with a seeded pairwise-independent hash family.
//!
//! Row `r` uses two Carter-Wegman hashes over the Mersenne prime
//! `P = 2^61 - 1`:
//!
//! ```text
//! bucket_r(i) = ((a_r * i + b_r) mod P) mod cols
//! sign_r(i)   = +1 if ((a'_r * i + b'_r) mod P) is even, else -1
//! ```
//!
//! The coefficients `a_r, b_r, a'_r, b'_r` are drawn, in that order and row
//! by row, from a SplitMix64 stream started at `seed`; `a` and `a'` are
//! mapped into `[1, P)` and `b`, `b'` into `[0, P)`. Anyone can rebuild the
//! exact bucket layout for a seed from this description.

use alloc::vec;
use alloc::vec::Vec;

use super::{top_k, ParamVector, SparseUpdate};
use crate::error::{param_err, Error, Result};
use crate::rng::SplitMix64;

const MERSENNE_61: u64 = (1 << 61) - 1;

#[inline]
fn mod_mersenne(x: u128) -> u64 {
    let p = MERSENNE_61 as u128;
    let folded = (x & p) + (x >> 61);
    let folded = (folded & p) + (folded >> 61);
    let r = folded as u64;
    if r >= MERSENNE_61 {
        r - MERSENNE_61
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RowHash {
    a: u64,
    b: u64,
    sa: u64,
    sb: u64,
}

impl RowHash {
    #[inline]
    fn bucket(&self, i: usize, cols: usize) -> usize {
        let h = mod_mersenne(self.a as u128 * i as u128 + self.b as u128);
        (h % cols as u64) as usize
    }

    #[inline]
    fn sign(&self, i: usize) -> f64 {
        let h = mod_mersenne(self.sa as u128 * i as u128 + self.sb as u128);
        if h & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Dimensions and hash seed of a count sketch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SketchShape {
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
}

/// An `rows x cols` table of signed bucket sums.
#[derive(Debug, Clone, PartialEq)]
pub struct CountSketch {
    shape: SketchShape,
    hashes: Vec<RowHash>,
    table: Vec<f64>,
}

impl CountSketch {
    /// An all-zero sketch.
    pub fn new(shape: SketchShape) -> Result<Self> {
        if shape.rows == 0 || shape.cols == 0 {
            return param_err("count sketch needs at least one row and one column");
        }
        let mut stream = SplitMix64::new(shape.seed);
        let mut coeff = |nonzero: bool| {
            let raw = stream.next_u64() % MERSENNE_61;
            if nonzero {
                1 + raw % (MERSENNE_61 - 1)
            } else {
                raw
            }
        };
        let hashes = (0..shape.rows)
            .map(|_| RowHash {
                a: coeff(true),
                b: coeff(false),
                sa: coeff(true),
                sb: coeff(false),
            })
            .collect();
        Ok(Self {
            shape,
            hashes,
            table: vec![0.0; shape.rows * shape.cols],
        })
    }

    /// Sketches `v` into a fresh table.
    pub fn sketch(v: &ParamVector, shape: SketchShape) -> Result<Self> {
        let mut s = Self::new(shape)?;
        s.accumulate(v)?;
        Ok(s)
    }

    pub fn shape(&self) -> SketchShape {
        self.shape
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn bucket(&self, row: usize, i: usize) -> usize {
        self.hashes[row].bucket(i, self.shape.cols)
    }

    pub fn sign(&self, row: usize, i: usize) -> f64 {
        self.hashes[row].sign(i)
    }

    /// Adds `v` into the table (single writer).
    pub fn accumulate(&mut self, v: &ParamVector) -> Result<()> {
        v.ensure_finite()?;
        self.accumulate_iter(v.as_slice().iter().copied().enumerate(), 1.0)
    }

    /// Adds `alpha * s` for a sparse `s`.
    pub fn accumulate_sparse(&mut self, s: &SparseUpdate, alpha: f64) -> Result<()> {
        self.accumulate_iter(s.iter(), alpha)
    }

    fn accumulate_iter(
        &mut self,
        entries: impl Iterator<Item = (usize, f64)>,
        alpha: f64,
    ) -> Result<()> {
        let cols = self.shape.cols;
        for (i, v) in entries {
            if v == 0.0 {
                continue;
            }
            for (r, h) in self.hashes.iter().enumerate() {
                self.table[r * cols + h.bucket(i, cols)] += alpha * h.sign(i) * v;
            }
        }
        self.check_table()
    }

    fn check_table(&self) -> Result<()> {
        match self.table.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    fn check_shape(&self, other: &CountSketch) -> Result<()> {
        if self.shape != other.shape {
            return param_err("count sketches differ in shape or seed");
        }
        Ok(())
    }

    /// `self += alpha * other` for sketches sharing shape and seed.
    pub fn axpy(&mut self, alpha: f64, other: &CountSketch) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.table.iter_mut().zip(&other.table) {
            *a += alpha * b;
        }
        self.check_table()
    }

    pub fn add_assign(&mut self, other: &CountSketch) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.table.iter_mut().zip(&other.table) {
            *a += b;
        }
        self.check_table()
    }

    pub fn scale(&mut self, alpha: f64) -> Result<()> {
        for x in &mut self.table {
            *x *= alpha;
        }
        self.check_table()
    }

    pub fn is_zero(&self) -> bool {
        self.table.iter().all(|&x| x == 0.0)
    }

    /// Median-of-rows estimate of coordinate `i`.
    pub fn estimate(&self, i: usize) -> f64 {
        let mut scratch = vec![0.0; self.shape.rows];
        self.estimate_into(i, &mut scratch)
    }

    fn estimate_into(&self, i: usize, scratch: &mut [f64]) -> f64 {
        let cols = self.shape.cols;
        for (r, h) in self.hashes.iter().enumerate() {
            scratch[r] = h.sign(i) * self.table[r * cols + h.bucket(i, cols)];
        }
        median_in_place(scratch)
    }

    /// Estimates every coordinate of a `dim`-dimensional vector.
    pub fn unsketch(&self, dim: usize) -> Result<ParamVector> {
        let mut scratch = vec![0.0; self.shape.rows];
        let values = (0..dim)
            .map(|i| self.estimate_into(i, &mut scratch))
            .collect();
        ParamVector::new(values)
    }

    /// Top-k of the median-of-rows estimates.
    pub fn unsketch_topk(&self, k: usize, dim: usize) -> Result<SparseUpdate> {
        if k > dim {
            return param_err("unsketch_topk needs k <= d");
        }
        if k == 0 {
            return Ok(SparseUpdate::empty(dim));
        }
        top_k(&self.unsketch(dim)?, k)
    }
}

/// Median with the even-count convention (mean of the two central values).
pub(crate) fn median_in_place(xs: &mut [f64]) -> f64 {
    xs.sort_unstable_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(rows: usize, cols: usize, seed: u64) -> SketchShape {
        SketchShape { rows, cols, seed }
    }

    #[test]
    fn zero_vector_sketches_to_zero() {
        let s = CountSketch::sketch(&ParamVector::zeros(50), shape(5, 16, 3)).unwrap();
        assert!(s.is_zero());
        let top = s.unsketch_topk(4, 50).unwrap();
        assert!(top.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mersenne_reduction_matches_naive() {
        let p = MERSENNE_61 as u128;
        for &(a, b) in &[(3u128, 5u128), (p - 1, p - 1), (1 << 100, 7), (u64::MAX as u128, 12345)] {
            let x = a * b % (1u128 << 122);
            assert_eq!(mod_mersenne(x) as u128, x % p);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut a = CountSketch::new(shape(3, 8, 1)).unwrap();
        let b = CountSketch::new(shape(3, 8, 2)).unwrap();
        assert!(a.add_assign(&b).is_err());
    }

    #[test]
    fn median_even_convention() {
        assert_eq!(median_in_place(&mut [3.0, 1.0]), 2.0);
        assert_eq!(median_in_place(&mut [5.0, 1.0, 100.0]), 5.0);
    }
}
