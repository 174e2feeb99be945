//! Run artifacts: a per-round CSV with a versioned first line, and a JSON
//! summary.
//!
//! Floats are written in Rust's shortest round-trip form, so the bundled
//! reader recovers every value bit for bit. Missing optional values are
//! empty fields.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sparsefed_core::certify::DriftReport;
use sparsefed_core::simulator::{RoundRow, RunRecord, RunStatus};

use crate::error::FormatError;

pub const ROUNDS_VERSION: &str = "# sparsefed-rounds v1";
pub const SUMMARY_VERSION: &str = "sparsefed-summary v1";

pub const ROUND_COLUMNS: [&str; 13] = [
    "round",
    "lambda",
    "test_acc",
    "attack_acc",
    "train_loss",
    "norm_min",
    "norm_mean",
    "norm_max",
    "attackers",
    "l1_drift",
    "w_l1",
    "loss_fraction",
    "sparsity_gap",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_rounds(rows: &[RoundRow]) -> Vec<u8> {
    let mut out = format!("{ROUNDS_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(ROUND_COLUMNS).expect("writing to memory");
        for r in rows {
            w.write_record([
                r.round.to_string(),
                r.lambda.to_string(),
                r.test_acc.to_string(),
                r.attack_acc.to_string(),
                opt(r.train_loss),
                r.norm_min.to_string(),
                r.norm_mean.to_string(),
                r.norm_max.to_string(),
                r.attackers.to_string(),
                opt(r.l1_drift),
                opt(r.w_l1),
                opt(r.loss_fraction),
                opt(r.sparsity_gap),
            ])
            .expect("writing to memory");
        }
        w.flush().expect("writing to memory");
    }
    out
}

/// Parses a rounds CSV written by [`write_rounds`], checking the version
/// line and the header.
pub fn read_rounds(bytes: &[u8], path: &Path) -> Result<Vec<RoundRow>, FormatError> {
    let fail = |offset: u64, message: String| FormatError { path: path.to_path_buf(), offset, message };
    let first_end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    if &bytes[..first_end] != ROUNDS_VERSION.as_bytes() {
        return Err(fail(0, format!("first line must be {ROUNDS_VERSION:?}")));
    }
    let body = &bytes[(first_end + 1).min(bytes.len())..];
    let base = (first_end + 1) as u64;
    let mut rdr = csv::ReaderBuilder::new().from_reader(body);
    let header = rdr.headers().map_err(|e| fail(base, e.to_string()))?;
    if !header.iter().eq(ROUND_COLUMNS) {
        return Err(fail(base, format!("header must be {}", ROUND_COLUMNS.join(","))));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| fail(base + e.position().map_or(0, |p| p.byte()), e.to_string()))?;
        let at = base + rec.position().map_or(0, |p| p.byte());
        let col = |i: usize| -> Result<&str, FormatError> {
            rec.get(i).ok_or_else(|| fail(at, format!("missing column {}", ROUND_COLUMNS[i])))
        };
        let float = |i: usize| -> Result<f64, FormatError> {
            let s = col(i)?;
            s.parse().map_err(|_| fail(at, format!("bad {} value {s:?}", ROUND_COLUMNS[i])))
        };
        let maybe = |i: usize| -> Result<Option<f64>, FormatError> {
            if col(i)?.is_empty() {
                Ok(None)
            } else {
                float(i).map(Some)
            }
        };
        let int = |i: usize| -> Result<usize, FormatError> {
            let s = col(i)?;
            s.parse().map_err(|_| fail(at, format!("bad {} value {s:?}", ROUND_COLUMNS[i])))
        };
        rows.push(RoundRow {
            round: int(0)?,
            lambda: float(1)?,
            test_acc: float(2)?,
            attack_acc: float(3)?,
            train_loss: maybe(4)?,
            norm_min: float(5)?,
            norm_mean: float(6)?,
            norm_max: float(7)?,
            attackers: int(8)?,
            l1_drift: maybe(9)?,
            w_l1: maybe(10)?,
            loss_fraction: maybe(11)?,
            sparsity_gap: maybe(12)?,
        });
    }
    Ok(rows)
}

/// Final metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub status: String,
    pub dnc_round: Option<usize>,
    pub dnc_reason: Option<String>,
    pub rounds_completed: usize,
    pub final_test_acc: f64,
    pub final_attack_acc: f64,
    pub n_poisoned: usize,
    pub oif: Option<f64>,
    pub expected_attackers: f64,
    /// Largest clip bound used; absent when clipping is off.
    pub max_clip: Option<f64>,
}

impl From<&RunRecord> for RunOutcome {
    fn from(r: &RunRecord) -> Self {
        let (status, dnc_round, dnc_reason) = match &r.status {
            RunStatus::Completed => ("completed", None, None),
            RunStatus::Dnc { round, reason } => ("dnc", Some(*round), Some(reason.clone())),
        };
        Self {
            status: status.to_string(),
            dnc_round,
            dnc_reason,
            rounds_completed: r.rows.len(),
            final_test_acc: r.final_test_acc,
            final_attack_acc: r.final_attack_acc,
            n_poisoned: r.n_poisoned,
            oif: r.oif,
            expected_attackers: r.expected_attackers,
            max_clip: r.max_clip.is_finite().then_some(r.max_clip),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub final_l1: f64,
    pub max_l1: f64,
    /// Absent when the radius is infinite (no finite corruption budget).
    pub final_radius: Option<f64>,
    pub bound_holds: bool,
    pub holds_every_round: bool,
    pub heuristic: bool,
}

impl From<&DriftReport> for DriftSummary {
    fn from(d: &DriftReport) -> Self {
        let r = d.radii.last().copied().unwrap_or(0.0);
        Self {
            final_l1: d.distances.last().copied().unwrap_or(0.0),
            max_l1: d.distances.iter().copied().fold(0.0, f64::max),
            final_radius: r.is_finite().then_some(r),
            bound_holds: d.bound_holds,
            holds_every_round: d.holds_every_round,
            heuristic: d.heuristic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// The poisoned run for `paired`.
    pub run: RunOutcome,
    pub benign: Option<RunOutcome>,
    pub drift: Option<DriftSummary>,
    pub wall_time_s: f64,
}
