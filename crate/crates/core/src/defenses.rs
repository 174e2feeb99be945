//! Server-side aggregation rules.
//!
//! All rules take updates that have already been clipped by the caller.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // method resolution falls back to std when a dev build links it
use num_traits::Float as _;
use rand::Rng;

use crate::error::{param_err, Error, Result};
use crate::numkit::ParamVector;
use crate::rng::gaussian;

/// Per-device update norm bound.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "mode", content = "l", rename_all = "snake_case", deny_unknown_fields))]
pub enum ClipMode {
    None,
    Fixed(f64),
    /// Bound scaled by the round's learning rate.
    Adaptive(f64),
}

impl ClipMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ClipMode::None => Ok(()),
            ClipMode::Fixed(l) | ClipMode::Adaptive(l) if l > 0.0 && !l.is_nan() => Ok(()),
            _ => param_err("clip bound must be positive"),
        }
    }

    /// The configured base bound, infinite when clipping is off.
    pub fn base(&self) -> f64 {
        match *self {
            ClipMode::None => f64::INFINITY,
            ClipMode::Fixed(l) | ClipMode::Adaptive(l) => l,
        }
    }
}

/// Effective clip bound for a round with learning rate `lambda_t`.
pub fn clip_schedule(mode: ClipMode, lambda_t: f64) -> f64 {
    match mode {
        ClipMode::None => f64::INFINITY,
        ClipMode::Fixed(l) => l,
        ClipMode::Adaptive(l) => l * lambda_t,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AggregatorRule {
    Mean,
    TrimmedMean,
    CoordMedian,
    Krum,
    Bulyan,
    MeanDp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatorSpec {
    pub rule: AggregatorRule,
    /// Assumed number of attackers for the robust rules.
    pub f: usize,
    /// Noise standard deviation for `MeanDp`.
    pub sigma: f64,
}

impl AggregatorSpec {
    pub fn new(rule: AggregatorRule, f: usize) -> Self {
        Self { rule, f, sigma: 0.0 }
    }

    pub fn mean() -> Self {
        Self::new(AggregatorRule::Mean, 0)
    }

    /// Applies the rule. The second value is the index Krum selected.
    pub fn aggregate<R: Rng + ?Sized>(
        &self,
        updates: &[ParamVector],
        rng: &mut R,
    ) -> Result<(ParamVector, Option<usize>)> {
        match self.rule {
            AggregatorRule::Mean => Ok((mean_aggregate(updates)?, None)),
            AggregatorRule::TrimmedMean => Ok((trimmed_mean(updates, self.f)?, None)),
            AggregatorRule::CoordMedian => Ok((coord_median(updates)?, None)),
            AggregatorRule::Krum => {
                let (v, i) = krum(updates, self.f)?;
                Ok((v, Some(i)))
            }
            AggregatorRule::Bulyan => Ok((bulyan(updates, self.f)?, None)),
            AggregatorRule::MeanDp => Ok((mean_dp(updates, self.sigma, rng)?, None)),
        }
    }
}

fn check_updates(updates: &[ParamVector]) -> Result<usize> {
    let first = match updates.first() {
        Some(u) => u,
        None => return param_err("no updates to aggregate"),
    };
    let d = first.dim();
    if let Some(bad) = updates.iter().find(|u| u.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.dim(),
        });
    }
    Ok(d)
}

/// Arithmetic mean, summed left to right in list order.
pub fn mean_aggregate(updates: &[ParamVector]) -> Result<ParamVector> {
    let d = check_updates(updates)?;
    let mut acc = vec![0.0; d];
    for u in updates {
        for (a, v) in acc.iter_mut().zip(u.as_slice()) {
            *a += v;
        }
    }
    let n = updates.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    ParamVector::new(acc)
}

/// Applies `reduce` to each sorted coordinate column.
fn per_coordinate(updates: &[ParamVector], reduce: impl Fn(&[f64]) -> f64) -> Result<ParamVector> {
    let d = check_updates(updates)?;
    let mut column = vec![0.0; updates.len()];
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        for (c, u) in column.iter_mut().zip(updates) {
            *c = u[j];
        }
        column.sort_unstable_by(f64::total_cmp);
        out.push(reduce(&column));
    }
    ParamVector::new(out)
}

/// Drops the `f` largest and `f` smallest values of every coordinate and
/// averages the rest.
pub fn trimmed_mean(updates: &[ParamVector], f: usize) -> Result<ParamVector> {
    let n = updates.len();
    if n <= 2 * f {
        return Err(Error::Infeasible {
            rule: "trimmed_mean",
            n,
            f,
        });
    }
    let keep = (n - 2 * f) as f64;
    per_coordinate(updates, |col| col[f..n - f].iter().sum::<f64>() / keep)
}

/// Coordinatewise median; even counts average the two central values.
pub fn coord_median(updates: &[ParamVector]) -> Result<ParamVector> {
    per_coordinate(updates, |col| {
        let n = col.len();
        if n % 2 == 1 {
            col[n / 2]
        } else {
            0.5 * (col[n / 2 - 1] + col[n / 2])
        }
    })
}

fn distance_matrix(updates: &[ParamVector]) -> Vec<Vec<f64>> {
    let n = updates.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = updates[i]
                .as_slice()
                .iter()
                .zip(updates[j].as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i][j] = d2.sqrt();
            dist[j][i] = dist[i][j];
        }
    }
    dist
}

/// Krum scores over the `pool` (indices into `dist`), removing `drop`
/// farthest neighbours per candidate. The candidate itself is never removed.
fn krum_scores(dist: &[Vec<f64>], pool: &[usize], drop: usize) -> Vec<f64> {
    let mut others = Vec::with_capacity(pool.len());
    pool.iter()
        .map(|&i| {
            others.clear();
            others.extend(pool.iter().filter(|&&j| j != i).map(|&j| dist[i][j]));
            others.sort_unstable_by(f64::total_cmp);
            let keep = others.len().saturating_sub(drop);
            others[..keep].iter().sum()
        })
        .collect()
}

/// Position in `pool` of the Krum winner.
///
/// Scores within `1e-12` (relative) of the minimum tie. Among ties the
/// lexicographically smallest update wins, then the lowest index, so the
/// chosen value does not depend on the order of `updates`.
fn krum_pick(updates: &[ParamVector], pool: &[usize], scores: &[f64]) -> usize {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * min.abs().max(1.0);
    let lex = |a: &ParamVector, b: &ParamVector| {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(core::cmp::Ordering::Equal)
    };
    (0..pool.len())
        .filter(|&p| scores[p] <= min + tol)
        .min_by(|&a, &b| lex(&updates[pool[a]], &updates[pool[b]]).then(pool[a].cmp(&pool[b])))
        .unwrap_or(0)
}

/// Krum: the update whose nearest `n - f - 3` neighbours are closest in
/// total l2 distance. See [`krum_pick`] for ties.
pub fn krum(updates: &[ParamVector], f: usize) -> Result<(ParamVector, usize)> {
    let n = updates.len();
    check_updates(updates)?;
    if n < f + 3 {
        return Err(Error::Infeasible { rule: "krum", n, f });
    }
    let dist = distance_matrix(updates);
    let pool: Vec<usize> = (0..n).collect();
    let scores = krum_scores(&dist, &pool, f + 2);
    let best = krum_pick(updates, &pool, &scores);
    Ok((updates[best].clone(), best))
}

/// Bulyan: repeated Krum selection into a set of `n - 2f` updates, then a
/// trimmed mean over that set.
///
/// Once the shrinking pool is too small for `f + 2` removals, each Krum
/// round removes as many neighbours as remain.
pub fn bulyan(updates: &[ParamVector], f: usize) -> Result<ParamVector> {
    let n = updates.len();
    check_updates(updates)?;
    if n < 4 * f + 3 {
        return Err(Error::Infeasible {
            rule: "bulyan",
            n,
            f,
        });
    }
    let dist = distance_matrix(updates);
    let mut pool: Vec<usize> = (0..n).collect();
    let mut selected = Vec::with_capacity(n - 2 * f);
    while selected.len() < n - 2 * f {
        let drop = (f + 2).min(pool.len() - 1);
        let scores = krum_scores(&dist, &pool, drop);
        let pos = krum_pick(updates, &pool, &scores);
        selected.push(updates[pool.remove(pos)].clone());
    }
    trimmed_mean(&selected, f)
}

/// Mean plus i.i.d. Gaussian noise of standard deviation `sigma`.
pub fn mean_dp<R: Rng + ?Sized>(
    updates: &[ParamVector],
    sigma: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return param_err("noise sigma must be finite and nonnegative");
    }
    let mut out = mean_aggregate(updates)?;
    if sigma > 0.0 {
        for v in out.as_mut_slice() {
            *v += sigma * gaussian(rng);
        }
        out.ensure_finite()?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn col(vals: &[f64]) -> Vec<ParamVector> {
        vals.iter()
            .map(|&v| ParamVector::new(vec![v]).unwrap())
            .collect()
    }

    #[test]
    fn clip_schedule_modes() {
        assert_eq!(clip_schedule(ClipMode::Fixed(5.0), 0.3), 5.0);
        assert!((clip_schedule(ClipMode::Adaptive(5.0), 0.2) - 1.0).abs() < 1e-15);
        assert_eq!(clip_schedule(ClipMode::None, 0.2), f64::INFINITY);
    }

    #[test]
    fn mean_examples() {
        let u = vec![
            ParamVector::new(vec![1.0, 2.0]).unwrap(),
            ParamVector::new(vec![3.0, 4.0]).unwrap(),
        ];
        assert_eq!(mean_aggregate(&u).unwrap().as_slice(), &[2.0, 3.0]);
        assert_eq!(mean_aggregate(&u[..1]).unwrap(), u[0]);
        assert!(mean_aggregate(&[]).is_err());
    }

    #[test]
    fn krum_ties_resolve_by_value() {
        // n = f + 3 leaves no neighbours to score, so everything ties
        let (v, i) = krum(&col(&[0.4, -1.0, 2.0]), 0).unwrap();
        assert_eq!((v[0], i), (-1.0, 1));
        let (v, i) = krum(&col(&[0.5, 0.5, 9.0, 0.1 + 0.2, 0.3]), 1).unwrap();
        assert_eq!(v[0], 0.3);
        assert_eq!(i, 4);
    }

    #[test]
    fn trimmed_examples() {
        assert_eq!(trimmed_mean(&col(&[1.0, 2.0, 3.0, 100.0]), 1).unwrap()[0], 2.5);
        assert!(trimmed_mean(&col(&[1.0, 2.0]), 1).is_err());
        let u = col(&[1.0, 5.0, 9.0]);
        assert_eq!(trimmed_mean(&u, 0).unwrap(), mean_aggregate(&u).unwrap());
    }

    #[test]
    fn median_examples() {
        assert_eq!(coord_median(&col(&[1.0, 2.0, 100.0])).unwrap()[0], 2.0);
        assert_eq!(coord_median(&col(&[1.0, 3.0])).unwrap()[0], 2.0);
    }

    #[test]
    fn krum_one_dimensional_example() {
        let u = col(&[0.0, 0.1, 0.2, 0.3, 10.0]);
        let dist = distance_matrix(&u);
        let scores = krum_scores(&dist, &[0, 1, 2, 3, 4], 3);
        let expect = [0.1, 0.1, 0.1, 0.1, 9.7];
        for (s, e) in scores.iter().zip(expect) {
            assert!((s - e).abs() < 1e-12);
        }
        let (v, i) = krum(&u, 1).unwrap();
        assert_eq!(i, 0);
        assert_eq!(v[0], 0.0);
        assert!(krum(&u[..3], 1).is_err());
    }

    #[test]
    fn krum_identical_picks_first() {
        let u = col(&[4.0; 6]);
        assert_eq!(krum(&u, 2).unwrap().1, 0);
    }

    #[test]
    fn bulyan_f0_is_mean() {
        let u = col(&[1.0, 2.0, 4.0, 8.0]);
        let b = bulyan(&u, 0).unwrap();
        assert!((b[0] - 3.75).abs() < 1e-15);
        assert!(bulyan(&u, 1).is_err());
    }

    #[test]
    fn mean_dp_zero_sigma_and_seed() {
        let u = col(&[1.0, 2.0]);
        let mut rng = stream_rng(1, Stream::Noise, 0);
        assert_eq!(mean_dp(&u, 0.0, &mut rng).unwrap(), mean_aggregate(&u).unwrap());
        let a = mean_dp(&u, 1.0, &mut stream_rng(1, Stream::Noise, 3)).unwrap();
        let b = mean_dp(&u, 1.0, &mut stream_rng(1, Stream::Noise, 3)).unwrap();
        assert_eq!(a, b);
        assert!(mean_dp(&u, -1.0, &mut rng).is_err());
    }
}
