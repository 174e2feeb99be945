//! The federated round loop and paired benign/poisoned execution.
//!
//! Sign convention: a device update is `theta_local - theta_global`, so the
//! server moves the model by `+lambda(t)` times the aggregate. Device
//! updates may be computed in any order or in parallel through an
//! [`Executor`]; they are always consumed in device-id order.

mod config;
mod metrics;
mod scenario;

pub use config::{
    schedule_lambda, AttackerPresence, Defense, Injection, Participation, ProtocolConfig, Schedule,
    Seeds,
};
pub use metrics::{count_poisoned, metrics_attack_accuracy, metrics_oif};
pub use scenario::{BlobsScenario, Federation};

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::{index, SliceRandom};

use crate::attacks::{craft, AttackKind, RoundView};
use crate::certify::{drift_check, DriftReport, LipschitzSource, RadiusParams, SOFTMAX_UNIT_CUBE_C};
use crate::defenses::{clip_schedule, mean_aggregate};
use crate::error::{Error, Result};
use crate::models::{empirical_coord_lipschitz, GradientOracle, ModelKind};
use crate::numkit::{l1_distance, l2_clip, top_k, CountSketch, ParamVector};
use crate::certify::rho_from_clipping;
use crate::rng::{gaussian, stream_rng, Stream};
use crate::sparsefed::{fetchsgd_step, sparsefed_step, RoundState};

/// Runs independent jobs and returns their results in input order.
pub trait Executor {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync,
    {
        items.iter().map(f).collect()
    }
}

/// Parameter norm beyond which a run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub round: usize,
    pub lambda: f64,
    pub test_acc: f64,
    pub attack_acc: f64,
    pub train_loss: Option<f64>,
    pub norm_min: f64,
    pub norm_mean: f64,
    pub norm_max: f64,
    /// Attackers that submitted crafted updates this round.
    pub attackers: usize,
    /// l1 distance to the paired benign model (paired runs only).
    pub l1_drift: Option<f64>,
    /// l1 norm of the error-feedback memory after the round.
    pub w_l1: Option<f64>,
    /// Fraction of l1 mass held back by top-k this round.
    pub loss_fraction: Option<f64>,
    /// `|applied - aggregate|_1` for the sparsified step, before `lambda`.
    pub sparsity_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    /// Did not converge: divergence or an infeasible defense.
    Dnc { round: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<RoundRow>,
    pub status: RunStatus,
    pub final_params: ParamVector,
    /// Parameters after each completed round, when requested.
    pub trace: Vec<ParamVector>,
    pub final_test_acc: f64,
    pub final_attack_acc: f64,
    pub n_poisoned: usize,
    /// `None` when no device is compromised.
    pub oif: Option<f64>,
    pub expected_attackers: f64,
    /// Largest effective clip bound used in any round.
    pub max_clip: f64,
}

impl RunRecord {
    pub fn is_dnc(&self) -> bool {
        matches!(self.status, RunStatus::Dnc { .. })
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Infeasible { .. })
}

struct Population {
    compromised: Vec<bool>,
    forced: Vec<usize>,
    /// Devices eligible for sampling (excludes forced ones).
    pool: Vec<usize>,
    /// Pre-drawn order for single participation.
    once_order: Vec<usize>,
}

impl Population {
    fn new(cfg: &ProtocolConfig, n: usize) -> Self {
        let m = cfg.compromised_count(n);
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut stream_rng(cfg.seeds.attack, Stream::Attack, 0));
        let mut chosen = ids[..m].to_vec();
        chosen.sort_unstable();
        let mut compromised = vec![false; n];
        chosen.iter().for_each(|&i| compromised[i] = true);
        let forced = match cfg.presence {
            AttackerPresence::Forced(c) => chosen[..c].to_vec(),
            AttackerPresence::Sampled => Vec::new(),
        };
        let pool: Vec<usize> = (0..n).filter(|i| !forced.contains(i)).collect();
        let mut once_order = Vec::new();
        if cfg.participation == Participation::AtMostOnce {
            once_order = pool.clone();
            once_order.shuffle(&mut stream_rng(cfg.seeds.sampling, Stream::Sampling, 0));
        }
        Self {
            compromised,
            forced,
            pool,
            once_order,
        }
    }

    /// Participants of round `t`, sorted by id.
    fn sample(&self, cfg: &ProtocolConfig, t: usize) -> Vec<usize> {
        let free = cfg.per_round - self.forced.len();
        let mut picked = self.forced.clone();
        match cfg.participation {
            Participation::Repeated => {
                let mut rng = stream_rng(cfg.seeds.sampling, Stream::Sampling, t as u64);
                picked.extend(
                    index::sample(&mut rng, self.pool.len(), free)
                        .into_iter()
                        .map(|i| self.pool[i]),
                );
            }
            Participation::AtMostOnce => {
                let start = (t - 1) * free;
                picked.extend_from_slice(&self.once_order[start..start + free]);
            }
        }
        picked.sort_unstable();
        picked
    }
}

fn injection_vector(inj: &Injection, d: usize, t: usize) -> Result<ParamVector> {
    let mut rng = stream_rng(inj.seed, Stream::Injection, t as u64);
    let raw: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
    let l1: f64 = raw.iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        return Ok(ParamVector::zeros(d));
    }
    ParamVector::new(raw.iter().map(|v| v * inj.l1_budget / l1).collect())
}

struct Server {
    state: RoundState,
    momentum: ParamVector,
}

/// Runs `cfg.rounds` rounds of federated training.
pub fn run<E: Executor>(fed: &Federation, cfg: &ProtocolConfig, exec: &E) -> Result<RunRecord> {
    let n = fed.devices.len();
    let d = fed.initial.dim();
    cfg.validate(n, d)?;
    if cfg.injection.is_some() && matches!(cfg.defense, Defense::FetchSgd { .. }) {
        return Err(Error::Parameter(
            "injection is not supported with the sketched defense".to_string(),
        ));
    }
    let population = Population::new(cfg, n);
    let mut model = fed.initial.clone();
    let mut server = Server {
        state: match cfg.defense {
            Defense::FetchSgd { shape, .. } => RoundState::with_sketches(d, shape)?,
            _ => RoundState::new(d),
        },
        momentum: ParamVector::zeros(d),
    };
    let mut rows = Vec::with_capacity(cfg.rounds);
    let mut trace = Vec::new();
    let mut status = RunStatus::Completed;
    let mut max_clip: f64 = 0.0;

    for t in 1..=cfg.rounds {
        let lambda = schedule_lambda(&cfg.schedule, t, cfg.rounds);
        let bound = clip_schedule(cfg.clip, lambda);
        max_clip = max_clip.max(bound);
        match round(fed, cfg, exec, &population, &mut model, &mut server, t, lambda, bound) {
            Ok(mut row) => {
                let norm = model.params().l2_norm();
                if !(norm <= DIVERGENCE_NORM) {
                    status = RunStatus::Dnc {
                        round: t,
                        reason: alloc::format!("parameter norm {norm:e} exceeds {DIVERGENCE_NORM:e}"),
                    };
                    break;
                }
                row.test_acc = model.accuracy(&fed.test)?;
                row.attack_acc = metrics_attack_accuracy(&model, &fed.aux)?;
                row.train_loss = match &fed.train_eval {
                    Some(b) => Some(model.loss(b)?),
                    None => None,
                };
                rows.push(row);
                if cfg.keep_trace {
                    trace.push(model.params().clone());
                }
            }
            Err(e) if is_divergence(&e) => {
                status = RunStatus::Dnc {
                    round: t,
                    reason: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let n_poisoned = count_poisoned(&model, &fed.aux)?;
    let oif = if cfg.p_compromised > 0.0 {
        Some(metrics_oif(n_poisoned, cfg.p_compromised, fed.total_points())?)
    } else {
        None
    };
    Ok(RunRecord {
        final_test_acc: model.accuracy(&fed.test)?,
        final_attack_acc: metrics_attack_accuracy(&model, &fed.aux)?,
        n_poisoned,
        oif,
        expected_attackers: cfg.expected_attackers(),
        max_clip,
        rows,
        status,
        final_params: model.params().clone(),
        trace,
    })
}

#[allow(clippy::too_many_arguments)]
fn round<E: Executor>(
    fed: &Federation,
    cfg: &ProtocolConfig,
    exec: &E,
    population: &Population,
    model: &mut GradientOracle,
    server: &mut Server,
    t: usize,
    lambda: f64,
    bound: f64,
) -> Result<RoundRow> {
    let d = model.dim();
    let participants = population.sample(cfg, t);
    let attack = cfg.attack.filter(|a| a.active.contains(t));
    let is_attacker = |id: usize| attack.is_some() && population.compromised[id];
    let benign_ids: Vec<usize> = participants.iter().copied().filter(|&i| !is_attacker(i)).collect();
    let attacker_ids: Vec<usize> = participants.iter().copied().filter(|&i| is_attacker(i)).collect();

    let current: &GradientOracle = model;
    let benign: Vec<Result<ParamVector>> = exec.map(&benign_ids, |&id| {
        current
            .local_update(&fed.devices[id].examples, cfg.tau, cfg.local_lr, cfg.local_batch, bound)
            .map_err(|e| match e {
                Error::EmptyDevice { .. } => Error::EmptyDevice { device: id },
                other => other,
            })
    });
    let benign: Vec<ParamVector> = benign.into_iter().collect::<Result<_>>()?;

    let mut crafted: Vec<ParamVector> = Vec::with_capacity(attacker_ids.len());
    if let Some(spec) = attack.filter(|_| !attacker_ids.is_empty()) {
        let topk: Option<Vec<usize>> = match (spec.kind, cfg.defense) {
            (AttackKind::AdaptiveTopk, Defense::SparseFed(sf)) => {
                let mut probe = server.state.w.clone();
                if sf.momentum_into_memory {
                    let mut r = server.state.r.scaled(sf.rho)?;
                    if !benign.is_empty() {
                        r.add_assign(&mean_aggregate(&benign)?)?;
                    }
                    probe.add_assign(&r)?;
                } else if !benign.is_empty() {
                    probe.add_assign(&mean_aggregate(&benign)?)?;
                }
                Some(top_k(&probe, sf.k)?.indices().to_vec())
            }
            _ => None,
        };
        let view = RoundView {
            model: current,
            round: t,
            lambda_t: lambda,
            topk_indices: topk.as_deref(),
        };
        let weight = attacker_ids.len() as f64 / participants.len() as f64;
        let one = |stream_index: u64| -> Result<ParamVector> {
            let mut rng = stream_rng(cfg.seeds.attack, Stream::Attack, stream_index);
            match craft(&view, &spec, &fed.aux, weight, &mut rng) {
                Err(Error::AttackInfeasible(_)) => Ok(ParamVector::zeros(d)),
                other => other,
            }
        };
        if spec.collude {
            let shared = one(t as u64)?;
            crafted.extend(core::iter::repeat_n(shared, attacker_ids.len()));
        } else {
            for &id in &attacker_ids {
                crafted.push(one((t as u64) << 32 | id as u64)?);
            }
        }
    }

    // Merge back into device-id order and apply the server clip.
    let mut updates = Vec::with_capacity(participants.len());
    let (mut bi, mut ai) = (0, 0);
    for &id in &participants {
        let u = if is_attacker(id) {
            ai += 1;
            &crafted[ai - 1]
        } else {
            bi += 1;
            &benign[bi - 1]
        };
        updates.push(l2_clip(u, bound)?);
    }
    let norms: Vec<f64> = updates.iter().map(|u| u.l2_norm()).collect();
    let mut row = RoundRow {
        round: t,
        lambda,
        test_acc: 0.0,
        attack_acc: 0.0,
        train_loss: None,
        norm_min: norms.iter().copied().fold(f64::INFINITY, f64::min),
        norm_mean: norms.iter().sum::<f64>() / norms.len() as f64,
        norm_max: norms.iter().copied().fold(0.0, f64::max),
        attackers: attacker_ids.len(),
        l1_drift: None,
        w_l1: None,
        loss_fraction: None,
        sparsity_gap: None,
    };

    let injection = match &cfg.injection {
        Some(inj) => Some(injection_vector(inj, d, t)?),
        None => None,
    };
    let mut params = model.params().clone();
    match cfg.defense {
        Defense::Aggregator { spec, momentum } => {
            let mut rng = stream_rng(cfg.seeds.noise, Stream::Noise, t as u64);
            let (mut agg, _) = spec.aggregate(&updates, &mut rng)?;
            if let Some(eps) = &injection {
                agg.add_assign(eps)?;
            }
            server.momentum.scale(momentum)?;
            server.momentum.add_assign(&agg)?;
            params.axpy(lambda, &server.momentum)?;
        }
        Defense::SparseFed(spec) => {
            let mut u = mean_aggregate(&updates)?;
            if let Some(eps) = &injection {
                u.add_assign(eps)?;
            }
            let out = sparsefed_step(&mut server.state, &u, &spec)?;
            let applied = out.delta.densify();
            params.axpy(lambda, &applied)?;
            row.w_l1 = Some(server.state.w.l1_norm());
            row.loss_fraction = Some(out.loss_fraction);
            row.sparsity_gap = Some(l1_distance(&applied, &u)?);
        }
        Defense::FetchSgd { k, rho, shape } => {
            let sketches = updates
                .iter()
                .map(|u| CountSketch::sketch(u, shape))
                .collect::<Result<Vec<_>>>()?;
            let out = fetchsgd_step(&mut server.state, &sketches, lambda, k, rho)?;
            params.add_assign(&out.delta.densify())?;
            row.loss_fraction = Some(out.loss_fraction);
        }
    }
    model.set_params(params)?;
    Ok(row)
}

/// Benign and poisoned runs on shared randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedRun {
    pub benign: RunRecord,
    pub poisoned: RunRecord,
    pub drift: DriftReport,
}

/// Radius parameters implied by a paired run.
///
/// `rho` is the injection budget when present, otherwise the worst-case l1
/// mass of the compromised share under the largest clip bound. `gamma` is
/// the largest sparsification gap seen in either run. `c` is analytic for
/// softmax regression on unit-cube data and an empirical estimate
/// otherwise.
pub fn default_radius(
    fed: &Federation,
    cfg: &ProtocolConfig,
    benign: &RunRecord,
    poisoned: &RunRecord,
    rounds: usize,
) -> Result<RadiusParams> {
    let d = fed.initial.dim();
    let rho = match &cfg.injection {
        Some(inj) => inj.l1_budget,
        None => rho_from_clipping(cfg.p_compromised, poisoned.max_clip.max(benign.max_clip), d)?
            .worst_case_l1,
    };
    let unit_cube = fed
        .devices
        .iter()
        .all(|dv| dv.examples.iter().all(|(x, _)| x.iter().all(|v| (0.0..=1.0).contains(v))));
    let (c, c_source) = match fed.initial.kind() {
        ModelKind::SoftmaxLinear { .. } if unit_cube => (SOFTMAX_UNIT_CUBE_C, LipschitzSource::Analytic),
        kind => (
            empirical_coord_lipschitz(kind, &fed.pooled_train(), 200, cfg.seeds.noise)?,
            LipschitzSource::Empirical,
        ),
    };
    let gap = |r: &RunRecord| {
        r.rows
            .iter()
            .filter_map(|row| row.sparsity_gap)
            .fold(0.0, f64::max)
    };
    let (k, gamma, c_source) = match cfg.defense {
        Defense::SparseFed(spec) => (spec.k, gap(benign).max(gap(poisoned)), c_source),
        Defense::Aggregator { .. } => (d, 0.0, c_source),
        Defense::FetchSgd { .. } => (d, 0.0, LipschitzSource::Empirical),
    };
    Ok(RadiusParams {
        rho,
        c,
        gamma,
        k,
        d,
        lambdas: (1..=rounds)
            .map(|t| schedule_lambda(&cfg.schedule, t, cfg.rounds))
            .collect(),
        c_source,
    })
}

/// Runs `cfg` with and without its attack (and injection) on identical
/// sampling, data and noise streams, and compares the parameter traces
/// with the certified radius. Attacker devices behave honestly in the
/// benign run.
pub fn run_paired<E: Executor>(
    fed: &Federation,
    cfg: &ProtocolConfig,
    exec: &E,
    radius: Option<RadiusParams>,
) -> Result<PairedRun> {
    if cfg.attack.is_none() && cfg.injection.is_none() {
        return Err(Error::Parameter(
            "paired runs need an attack or an injection".to_string(),
        ));
    }
    let traced = ProtocolConfig {
        keep_trace: true,
        ..cfg.clone()
    };
    let benign = run(fed, &traced.benign(), exec)?;
    let mut poisoned = run(fed, &traced, exec)?;
    let rounds = benign.trace.len().min(poisoned.trace.len());
    let params = match radius {
        Some(mut p) => {
            p.lambdas.truncate(rounds);
            p
        }
        None => default_radius(fed, cfg, &benign, &poisoned, rounds)?,
    };
    let drift = if params.rho.is_finite() {
        drift_check(&benign.trace[..rounds], &poisoned.trace[..rounds], &params)?
    } else {
        let distances = benign.trace[..rounds]
            .iter()
            .zip(&poisoned.trace[..rounds])
            .map(|(a, b)| l1_distance(a, b))
            .collect::<Result<Vec<_>>>()?;
        DriftReport {
            radii: vec![f64::INFINITY; distances.len()],
            distances,
            bound_holds: true,
            holds_every_round: true,
            heuristic: params.c_source == LipschitzSource::Empirical,
        }
    };
    for (row, dist) in poisoned.rows.iter_mut().zip(&drift.distances) {
        row.l1_drift = Some(*dist);
    }
    if !cfg.keep_trace {
        poisoned.trace.clear();
    }
    let mut benign = benign;
    if !cfg.keep_trace {
        benign.trace.clear();
    }
    Ok(PairedRun {
        benign,
        poisoned,
        drift,
    })
}
