//! Malicious update generation.
//!
//! Attackers know the server's clipping rule and stay inside it, so every
//! crafted update has l2 norm at most the round's effective bound.

use alloc::format;
use alloc::vec::Vec;
#[allow(unused_imports)] // method resolution falls back to std when a dev build links it
use num_traits::Float as _;
use rand::Rng;

use crate::data::AuxiliarySet;
use crate::defenses::{clip_schedule, ClipMode};
use crate::error::{param_err, Error, Result};
use crate::models::GradientOracle;
use crate::numkit::{l2_clip, ParamVector};
use crate::rng::gaussian;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AttackKind {
    TargetedPgd,
    Byzantine,
    ModelReplacement,
    AdaptiveTopk,
}

/// Inclusive range of rounds in which attackers act.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ActiveRounds {
    pub first: usize,
    pub last: usize,
}

impl ActiveRounds {
    pub fn always() -> Self {
        Self {
            first: 1,
            last: usize::MAX,
        }
    }

    pub fn contains(&self, t: usize) -> bool {
        self.first <= t && t <= self.last
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub pgd_epochs: usize,
    /// Attacker minibatch size over the auxiliary set.
    pub batch: usize,
    pub lr: f64,
    pub boost: f64,
    /// The server's clipping rule, as known to the attacker.
    pub known_clip: ClipMode,
    pub collude: bool,
    pub active: ActiveRounds,
}

impl AttackSpec {
    pub fn pgd(known_clip: ClipMode) -> Self {
        Self {
            kind: AttackKind::TargetedPgd,
            pgd_epochs: 5,
            batch: 10,
            lr: 0.1,
            boost: 20.0,
            known_clip,
            collude: true,
            active: ActiveRounds::always(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pgd_epochs == 0 || self.batch == 0 {
            return param_err("attack needs at least one epoch and a positive batch");
        }
        if !(self.lr > 0.0 && self.boost > 0.0) {
            return param_err("attack learning rate and boost must be positive");
        }
        self.known_clip.validate()
    }
}

/// What an attacker sees in a round.
#[derive(Debug, Clone, Copy)]
pub struct RoundView<'a> {
    pub model: &'a GradientOracle,
    pub round: usize,
    pub lambda_t: f64,
    /// Coordinates the server will update this round (adaptive attack only).
    pub topk_indices: Option<&'a [usize]>,
}

impl RoundView<'_> {
    pub fn global_params(&self) -> &ParamVector {
        self.model.params()
    }
}

fn bound(view: &RoundView, spec: &AttackSpec) -> f64 {
    clip_schedule(spec.known_clip, view.lambda_t)
}

/// Projected gradient descent on the flipped auxiliary labels.
///
/// Each epoch is a pass over the auxiliary set in consecutive minibatches
/// with step `lr * boost`; after each epoch the accumulated delta is
/// optionally masked to `mask` and then projected onto the l2 ball of the
/// known clip bound.
fn pgd(
    view: &RoundView,
    spec: &AttackSpec,
    aux: &AuxiliarySet,
    mask: Option<&[usize]>,
    radius: f64,
) -> Result<ParamVector> {
    if aux.is_empty() {
        return Err(Error::AttackInfeasible("auxiliary set is empty".into()));
    }
    let start = view.global_params();
    let mut local = view.model.clone();
    let step = spec.lr * spec.boost;
    let data = &aux.examples;
    let mut delta = ParamVector::zeros(start.dim());
    for _ in 0..spec.pgd_epochs {
        let mut lo = 0;
        while lo < data.len() {
            let hi = (lo + spec.batch).min(data.len());
            let g = local.gradient(&data.range(lo, hi))?;
            let mut p = local.params().clone();
            p.axpy(-step, &g)?;
            local.set_params(p)?;
            lo = hi;
        }
        delta = local.params().sub(start)?;
        if let Some(keep) = mask {
            let mut masked = ParamVector::zeros(delta.dim());
            let out = masked.as_mut_slice();
            for &i in keep {
                out[i] = delta[i];
            }
            delta = masked;
        }
        delta = l2_clip(&delta, radius)?;
        let mut p = start.clone();
        p.add_assign(&delta)?;
        local.set_params(p)?;
    }
    Ok(delta)
}

pub fn targeted_pgd(view: &RoundView, spec: &AttackSpec, aux: &AuxiliarySet) -> Result<ParamVector> {
    pgd(view, spec, aux, None, bound(view, spec))
}

/// [`targeted_pgd`] restricted to the coordinates the server will apply.
pub fn adaptive_topk_attack(
    view: &RoundView,
    spec: &AttackSpec,
    aux: &AuxiliarySet,
) -> Result<ParamVector> {
    let Some(keep) = view.topk_indices else {
        return param_err("adaptive attack needs the round's top-k coordinates");
    };
    let d = view.global_params().dim();
    if keep.iter().any(|&i| i >= d) {
        return param_err("top-k coordinate out of range");
    }
    pgd(view, spec, aux, Some(keep), bound(view, spec))
}

/// A uniformly random direction on the sphere of the known clip radius.
pub fn byzantine_update<R: Rng + ?Sized>(
    view: &RoundView,
    spec: &AttackSpec,
    rng: &mut R,
) -> Result<ParamVector> {
    let radius = bound(view, spec);
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::AttackInfeasible(format!(
            "byzantine update needs a finite positive bound, got {radius}"
        )));
    }
    let d = view.global_params().dim();
    loop {
        let dir: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            return ParamVector::new(dir.iter().map(|v| radius * v / norm).collect());
        }
    }
}

/// Update that moves the aggregate model onto `target` when it enters the
/// average with total weight `weight` and the server step is `lambda_t`.
///
/// Benign contributions are assumed to cancel. The result is clipped to the
/// known bound.
pub fn model_replacement(
    view: &RoundView,
    spec: &AttackSpec,
    target: &ParamVector,
    weight: f64,
) -> Result<ParamVector> {
    if view.lambda_t == 0.0 {
        return Err(Error::AttackInfeasible("learning rate is zero".into()));
    }
    if !(weight > 0.0 && weight <= 1.0) {
        return param_err("averaging weight must lie in (0, 1]");
    }
    let mut u = target.sub(view.global_params())?;
    u.scale(1.0 / (weight * view.lambda_t))?;
    l2_clip(&u, bound(view, spec))
}

/// Dispatches on `spec.kind`.
///
/// The model-replacement target is the global model after an unclipped PGD
/// fit to the auxiliary set. `weight` is the attackers' combined share of
/// the round's average.
pub fn craft<R: Rng + ?Sized>(
    view: &RoundView,
    spec: &AttackSpec,
    aux: &AuxiliarySet,
    weight: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    match spec.kind {
        AttackKind::TargetedPgd => targeted_pgd(view, spec, aux),
        AttackKind::AdaptiveTopk => adaptive_topk_attack(view, spec, aux),
        AttackKind::Byzantine => byzantine_update(view, spec, rng),
        AttackKind::ModelReplacement => {
            let mut target = view.global_params().clone();
            target.add_assign(&pgd(view, spec, aux, None, f64::INFINITY)?)?;
            model_replacement(view, spec, &target, weight)
        }
    }
}
