use alloc::vec::Vec;
use core::cmp::Ordering;

use super::ParamVector;
use crate::error::{param_err, Error, Result};

/// A k-sparse vector in an ambient space of dimension `dim`.
///
/// Indices are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SparseUpdate {
    indices: Vec<usize>,
    values: Vec<f64>,
    dim: usize,
}

impl SparseUpdate {
    pub fn new(indices: Vec<usize>, values: Vec<f64>, dim: usize) -> Result<Self> {
        if indices.len() != values.len() {
            return param_err("sparse update indices and values differ in length");
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return param_err("sparse update indices must be strictly increasing");
        }
        if indices.last().is_some_and(|&i| i >= dim) {
            return param_err("sparse update index out of range");
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            indices,
            values,
            dim,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
            dim,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn densify(&self) -> ParamVector {
        let mut out = ParamVector::zeros(self.dim);
        let slot = out.as_mut_slice();
        for (i, v) in self.iter() {
            slot[i] = v;
        }
        out
    }
}

/// Orders coordinates by descending magnitude, then ascending index.
fn by_magnitude(values: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// Extracts the `k` largest-magnitude coordinates of `v`.
///
/// Equal magnitudes resolve toward the lowest index, so the selection is a
/// pure function of the input. Zero coordinates are returned when `v` has
/// fewer than `k` nonzeros.
pub fn top_k(v: &ParamVector, k: usize) -> Result<SparseUpdate> {
    let d = v.dim();
    if k == 0 || k > d {
        return param_err(alloc::format!("top_k needs 1 <= k <= d, got k = {k}, d = {d}"));
    }
    let values = v.as_slice();
    let mut order: Vec<usize> = (0..d).collect();
    let cmp = by_magnitude(values);
    if k < d {
        order.select_nth_unstable_by(k - 1, &cmp);
        order.truncate(k);
    }
    order.sort_unstable();
    let picked = order.iter().map(|&i| values[i]).collect();
    Ok(SparseUpdate {
        indices: order,
        values: picked,
        dim: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn picks_two_largest() {
        let s = top_k(&pv(&[3.0, -5.0, 1.0, 0.0]), 2).unwrap();
        assert_eq!(s.indices(), &[0, 1]);
        assert_eq!(s.values(), &[3.0, -5.0]);
    }

    #[test]
    fn zero_vector_returns_lowest_index() {
        let s = top_k(&pv(&[0.0, 0.0, 0.0]), 1).unwrap();
        assert_eq!(s.indices(), &[0]);
        assert_eq!(s.values(), &[0.0]);
    }

    #[test]
    fn equal_magnitude_tie_breaks_low() {
        let s = top_k(&pv(&[2.0, -2.0, 1.0]), 1).unwrap();
        assert_eq!(s.indices(), &[0]);
        assert_eq!(s.values(), &[2.0]);
    }

    #[test]
    fn k_out_of_range() {
        assert!(top_k(&pv(&[1.0]), 0).is_err());
        assert!(top_k(&pv(&[1.0]), 2).is_err());
    }

    #[test]
    fn sparse_validation() {
        assert!(SparseUpdate::new(vec![1, 1], vec![1.0, 2.0], 3).is_err());
        assert!(SparseUpdate::new(vec![3], vec![1.0], 3).is_err());
        assert!(SparseUpdate::new(vec![0, 2], vec![1.0, 2.0], 3).is_ok());
    }
}
