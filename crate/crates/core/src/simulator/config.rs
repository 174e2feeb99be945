use alloc::format;
#[allow(unused_imports)] // method resolution falls back to std when a dev build links it
use num_traits::Float as _;

use crate::attacks::{AttackKind, AttackSpec};
use crate::defenses::{AggregatorSpec, ClipMode};
use crate::error::{param_err, Result};
use crate::numkit::SketchShape;
use crate::sparsefed::SparseFedSpec;

/// Server learning-rate schedule over rounds `1..=T`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields))]
pub enum Schedule {
    Constant { lambda: f64 },
    /// Linear ramp from 0 to `peak` over the first `warmup_frac * T` rounds,
    /// then linear decay reaching 0 at round `T`.
    Triangular { peak: f64, warmup_frac: f64 },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Constant { lambda } if lambda >= 0.0 && lambda.is_finite() => Ok(()),
            Schedule::Triangular { peak, warmup_frac }
                if peak >= 0.0 && peak.is_finite() && (0.0..=1.0).contains(&warmup_frac) =>
            {
                Ok(())
            }
            _ => param_err("schedule values out of range"),
        }
    }
}

/// Learning rate for round `t` of `total`.
pub fn schedule_lambda(schedule: &Schedule, t: usize, total: usize) -> f64 {
    match *schedule {
        Schedule::Constant { lambda } => lambda,
        Schedule::Triangular { peak, warmup_frac } => {
            let t = t as f64;
            let total = total as f64;
            let warm = warmup_frac * total;
            if t <= warm {
                peak * t / warm
            } else if total > warm {
                (peak * (total - t) / (total - warm)).max(0.0)
            } else {
                peak
            }
        }
    }
}

/// How compromised devices enter a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "mode", content = "count", rename_all = "snake_case"))]
pub enum AttackerPresence {
    /// Compromised devices are sampled like any other.
    Sampled,
    /// This many compromised devices join every round.
    Forced(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Participation {
    /// Fresh sample each round; devices may return in later rounds.
    Repeated,
    /// Each device participates at most once over the run.
    AtMostOnce,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Defense {
    /// A robust or plain aggregation rule followed by server momentum.
    Aggregator { spec: AggregatorSpec, momentum: f64 },
    SparseFed(SparseFedSpec),
    /// Sketched variant; `shape` fixes the count sketch.
    FetchSgd { k: usize, rho: f64, shape: SketchShape },
}

/// Additive corruption of the aggregated update, for radius experiments.
///
/// Each round of the poisoned run adds a random vector of l1 norm exactly
/// `l1_budget` to the server's aggregate.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Injection {
    pub l1_budget: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Seeds {
    pub sampling: u64,
    pub attack: u64,
    pub noise: u64,
}

impl Seeds {
    pub fn from_master(seed: u64) -> Self {
        use crate::rng::{derive_seed, Stream};
        Self {
            sampling: derive_seed(seed, Stream::Sampling, 0),
            attack: derive_seed(seed, Stream::Attack, 0),
            noise: derive_seed(seed, Stream::Noise, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub rounds: usize,
    pub per_round: usize,
    pub p_compromised: f64,
    pub presence: AttackerPresence,
    pub participation: Participation,
    pub tau: usize,
    pub local_batch: usize,
    pub local_lr: f64,
    pub clip: ClipMode,
    pub schedule: Schedule,
    pub defense: Defense,
    pub attack: Option<AttackSpec>,
    pub injection: Option<Injection>,
    pub seeds: Seeds,
    /// Keep the parameters after every round in the record.
    pub keep_trace: bool,
}

impl ProtocolConfig {
    /// Number of compromised devices in a population of `n`.
    pub fn compromised_count(&self, n: usize) -> usize {
        (self.p_compromised * n as f64).round() as usize
    }

    /// Expected attackers per round.
    pub fn expected_attackers(&self) -> f64 {
        match self.presence {
            AttackerPresence::Sampled => self.p_compromised * self.per_round as f64,
            AttackerPresence::Forced(c) => c as f64,
        }
    }

    pub fn validate(&self, n_devices: usize, dim: usize) -> Result<()> {
        if self.rounds == 0 {
            return param_err("at least one round is required");
        }
        if self.per_round == 0 || self.per_round > n_devices {
            return param_err(format!(
                "per_round must lie in [1, {n_devices}], got {}",
                self.per_round
            ));
        }
        if !(0.0..=1.0).contains(&self.p_compromised) {
            return param_err("p_compromised must lie in [0, 1]");
        }
        if self.tau == 0 || self.local_batch == 0 {
            return param_err("tau and local batch must be at least 1");
        }
        if !(self.local_lr >= 0.0 && self.local_lr.is_finite()) {
            return param_err("local learning rate must be finite and nonnegative");
        }
        self.clip.validate()?;
        self.schedule.validate()?;
        if let AttackerPresence::Forced(c) = self.presence {
            if c > self.per_round || c > self.compromised_count(n_devices) {
                return param_err("forced attacker count exceeds the round size or the compromised set");
            }
        }
        if self.participation == Participation::AtMostOnce
            && self.rounds * self.per_round > n_devices
        {
            return param_err("not enough devices for single participation over all rounds");
        }
        match self.defense {
            Defense::Aggregator { spec, momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return param_err("server momentum must lie in [0, 1)");
                }
                if !(spec.sigma >= 0.0) {
                    return param_err("noise sigma must be nonnegative");
                }
            }
            Defense::SparseFed(spec) => spec.validate(dim)?,
            Defense::FetchSgd { k, rho, shape } => {
                if k == 0 || k > dim {
                    return param_err("k must lie in [1, d]");
                }
                if !(0.0..1.0).contains(&rho) {
                    return param_err("momentum must lie in [0, 1)");
                }
                if shape.rows == 0 || shape.cols == 0 {
                    return param_err("sketch needs rows and columns");
                }
            }
        }
        if let Some(a) = &self.attack {
            a.validate()?;
            if a.kind == AttackKind::AdaptiveTopk && !matches!(self.defense, Defense::SparseFed(_)) {
                return param_err("the adaptive top-k attack needs the sparsefed defense");
            }
        }
        if let Some(inj) = &self.injection {
            if !(inj.l1_budget >= 0.0 && inj.l1_budget.is_finite()) {
                return param_err("injection budget must be finite and nonnegative");
            }
        }
        Ok(())
    }

    /// Copy with attack and injection removed.
    pub fn benign(&self) -> Self {
        Self {
            attack: None,
            injection: None,
            ..self.clone()
        }
    }
}
