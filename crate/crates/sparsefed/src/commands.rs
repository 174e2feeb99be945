//! Subcommand implementations. Each returns its artifacts so the binary
//! only prints and maps errors to exit codes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sparsefed_core::certify::{radius_closed_form, radius_recurrence_with, LipschitzSource, RadiusParams, Recurrence};
use sparsefed_core::simulator::{run, run_paired, schedule_lambda, Executor, RunRecord, Schedule, Sequential};
use sparsefed_core::sparsefed::{select_k, KSelection};

use crate::config::{load_config, ExperimentConfig};
use crate::error::{run_err, CliError};
use crate::exec::{with_threads, RayonExec};
use crate::output::{out_root, run_dir, write_atomic};
use crate::record::{write_rounds, DriftSummary, RunOutcome, Summary, SUMMARY_VERSION};

/// Where a run comes from and where it goes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub summary: Summary,
}

impl Artifacts {
    /// The DNC error when the (poisoned) run stopped early.
    pub fn dnc(&self) -> Option<CliError> {
        let r = &self.summary.run;
        r.dnc_round.map(|round| CliError::Dnc {
            round,
            reason: r.dnc_reason.clone().unwrap_or_default(),
        })
    }
}

fn loaded(opts: &RunOptions) -> Result<ExperimentConfig, CliError> {
    Ok(load_config(&opts.config, &opts.overrides)?.normalized())
}

fn write_common(dir: &Path, cfg: &ExperimentConfig, summary: &Summary) -> Result<(), CliError> {
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let json = serde_json::to_vec_pretty(summary).map_err(|e| CliError::Internal(e.to_string()))?;
    write_atomic(&dir.join("summary.json"), &json)
}

fn summary(command: &str, cfg: &ExperimentConfig, run: &RunRecord, started: Instant) -> Summary {
    Summary {
        format: SUMMARY_VERSION.to_string(),
        command: command.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        run: RunOutcome::from(run),
        benign: None,
        drift: None,
        wall_time_s: started.elapsed().as_secs_f64(),
    }
}

/// Executes one run and writes `rounds.csv`, `summary.json` and the
/// normalized `config.toml`.
pub fn cmd_run(opts: &RunOptions) -> Result<Artifacts, CliError> {
    run_config(&loaded(opts)?, opts.out.as_deref(), opts.threads)
}

pub fn run_config(cfg: &ExperimentConfig, out: Option<&Path>, threads: Option<usize>) -> Result<Artifacts, CliError> {
    with_threads(threads, || run_config_with(cfg, out, &RayonExec))?
}

pub fn run_config_with<E: Executor>(cfg: &ExperimentConfig, out: Option<&Path>, exec: &E) -> Result<Artifacts, CliError> {
    let started = Instant::now();
    let (fed, protocol) = cfg.resolve()?;
    let record = run(&fed, &protocol, exec).map_err(run_err)?;
    let dir = run_dir(&out_root(out, cfg), cfg);
    write_atomic(&dir.join("rounds.csv"), &write_rounds(&record.rows))?;
    let s = summary("run", cfg, &record, started);
    write_common(&dir, cfg, &s)?;
    Ok(Artifacts { dir, summary: s })
}

/// Executes the benign and poisoned runs and writes `benign.csv`,
/// `poisoned.csv` (with per-round drift), `summary.json` and `config.toml`.
pub fn cmd_paired(opts: &RunOptions) -> Result<Artifacts, CliError> {
    paired_config(&loaded(opts)?, opts.out.as_deref(), opts.threads)
}

pub fn paired_config(cfg: &ExperimentConfig, out: Option<&Path>, threads: Option<usize>) -> Result<Artifacts, CliError> {
    with_threads(threads, || paired_config_with(cfg, out, &RayonExec))?
}

pub fn paired_config_with<E: Executor>(cfg: &ExperimentConfig, out: Option<&Path>, exec: &E) -> Result<Artifacts, CliError> {
    let started = Instant::now();
    if cfg.attack.is_none() && cfg.injection.is_none() {
        return Err(CliError::Config("paired runs need an [attack] or [injection] table".into()));
    }
    let (fed, protocol) = cfg.resolve()?;
    let pair = run_paired(&fed, &protocol, exec, None).map_err(run_err)?;
    let dir = run_dir(&out_root(out, cfg), cfg);
    write_atomic(&dir.join("benign.csv"), &write_rounds(&pair.benign.rows))?;
    write_atomic(&dir.join("poisoned.csv"), &write_rounds(&pair.poisoned.rows))?;
    let mut s = summary("paired", cfg, &pair.poisoned, started);
    s.benign = Some(RunOutcome::from(&pair.benign));
    s.drift = Some(DriftSummary::from(&pair.drift));
    s.wall_time_s = started.elapsed().as_secs_f64();
    write_common(&dir, cfg, &s)?;
    Ok(Artifacts { dir, summary: s })
}

/// Inputs of the radius calculator.
#[derive(Debug, Clone)]
pub struct CertifyArgs {
    pub rho: f64,
    pub c: f64,
    pub gamma: f64,
    pub k: usize,
    pub d: usize,
    pub rounds: usize,
    pub schedule: Schedule,
    pub variant: Recurrence,
}

impl CertifyArgs {
    pub fn params(&self, rho: f64, k: usize, rounds: usize) -> RadiusParams {
        RadiusParams {
            rho,
            c: self.c,
            gamma: self.gamma,
            k,
            d: self.d,
            lambdas: (1..=rounds).map(|t| schedule_lambda(&self.schedule, t, rounds)).collect(),
            c_source: LipschitzSource::Analytic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadiusRow {
    pub rho: f64,
    pub k: usize,
    pub rounds: usize,
    pub recurrence: f64,
    pub closed_form: f64,
    pub closed_form_dense: f64,
}

pub fn certify_row(args: &CertifyArgs, rho: f64, k: usize, rounds: usize) -> Result<RadiusRow, CliError> {
    let p = args.params(rho, k, rounds);
    let err = |e: sparsefed_core::Error| CliError::Config(e.to_string());
    Ok(RadiusRow {
        rho,
        k,
        rounds,
        recurrence: radius_recurrence_with(&p, args.variant).map_err(err)?,
        closed_form: radius_closed_form(&p, true).map_err(err)?,
        closed_form_dense: radius_closed_form(&p, false).map_err(err)?,
    })
}

/// Radii over the product of `rhos`, `ks` and `ts` (each defaulting to the
/// single configured value), as CSV.
pub fn certify_grid(args: &CertifyArgs, rhos: &[f64], ks: &[usize], ts: &[usize]) -> Result<String, CliError> {
    let or = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
    let rhos = if rhos.is_empty() { vec![args.rho] } else { rhos.to_vec() };
    let mut out = String::from("rho,k,rounds,recurrence,closed_form,closed_form_dense\n");
    for &rho in &rhos {
        for &t in &or(ts, args.rounds) {
            for &k in &or(ks, args.k) {
                let r = certify_row(args, rho, k, t)?;
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.rho, r.k, r.rounds, r.recurrence, r.closed_form, r.closed_form_dense
                ));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TuneArgs {
    pub omega: f64,
    pub r: usize,
    pub samples: usize,
    /// Minibatch size per sampled gradient; the config's local batch when
    /// absent.
    pub batch: Option<usize>,
}

/// Chooses k from gradients of the configured initial model on the pooled
/// device data.
pub fn cmd_tune_k(opts: &RunOptions, args: &TuneArgs) -> Result<(KSelection, usize), CliError> {
    let cfg = loaded(opts)?;
    let fed = cfg.federation()?;
    let batch = args.batch.unwrap_or(cfg.protocol.local_batch);
    let sel = select_k(&fed.initial, &fed.pooled_train(), args.omega, args.r, args.samples, batch, cfg.seeds().noise)
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok((sel, fed.initial.dim()))
}

/// Splits `a,b,c` at top-level commas, leaving commas inside brackets,
/// braces and quotes alone.
pub fn split_values(s: &str) -> Vec<String> {
    let (mut out, mut cur, mut depth, mut quote) = (Vec::new(), String::new(), 0i32, None);
    for ch in s.chars() {
        match (ch, quote) {
            ('"' | '\'', None) => quote = Some(ch),
            (q, Some(open)) if q == open => quote = None,
            ('[' | '{', None) => depth += 1,
            (']' | '}', None) => depth -= 1,
            (',', None) if depth == 0 => {
                out.push(std::mem::take(&mut cur).trim().to_string());
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

/// One `key=v1,v2,...` sweep axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl Axis {
    pub fn parse(spec: &str) -> Result<Self, CliError> {
        let (key, vals) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("sweep axis {spec:?} is not key=v1,v2,...")))?;
        let values = split_values(vals);
        if key.trim().is_empty() || values.is_empty() || values.iter().any(String::is_empty) {
            return Err(CliError::Config(format!("sweep axis {spec:?} has an empty key or value")));
        }
        Ok(Self { key: key.trim().to_string(), values })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub values: Vec<String>,
    pub status: String,
    pub dir: Option<PathBuf>,
    pub final_test_acc: Option<f64>,
    pub final_attack_acc: Option<f64>,
    pub oif: Option<f64>,
    pub final_drift: Option<f64>,
    pub error: Option<String>,
}

/// Runs every point of the grid, in parallel across points, and writes
/// `<root>/sweep-<hash>/summary.csv`. A failing point is recorded and the
/// sweep continues.
pub fn cmd_sweep(opts: &RunOptions, axes: &[Axis], paired: bool) -> Result<(PathBuf, Vec<SweepPoint>), CliError> {
    if axes.is_empty() {
        return Err(CliError::Config("sweep needs at least one --grid axis".into()));
    }
    let base = loaded(opts)?;
    let mut points: Vec<Vec<String>> = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| axis.values.iter().map(move |v| [p.clone(), vec![v.clone()]].concat()))
            .collect();
    }
    let root = out_root(opts.out.as_deref(), &base);
    let one = |values: &Vec<String>| -> SweepPoint {
        let mut overrides = opts.overrides.clone();
        overrides.extend(axes.iter().zip(values).map(|(a, v)| format!("{}={v}", a.key)));
        let result = load_config(&opts.config, &overrides).and_then(|c| {
            let c = c.normalized();
            if paired {
                paired_config_with(&c, Some(&root), &Sequential)
            } else {
                run_config_with(&c, Some(&root), &Sequential)
            }
        });
        let mut p = SweepPoint {
            values: values.clone(),
            status: "error".into(),
            dir: None,
            final_test_acc: None,
            final_attack_acc: None,
            oif: None,
            final_drift: None,
            error: None,
        };
        match result {
            Ok(a) => {
                p.status = a.summary.run.status.clone();
                p.final_test_acc = Some(a.summary.run.final_test_acc);
                p.final_attack_acc = Some(a.summary.run.final_attack_acc);
                p.oif = a.summary.run.oif;
                p.final_drift = a.summary.drift.as_ref().map(|d| d.final_l1);
                p.dir = Some(a.dir);
            }
            Err(e) => p.error = Some(e.to_string()),
        }
        p
    };
    let results: Vec<SweepPoint> = with_threads(opts.threads, || points.par_iter().map(one).collect())?;

    let spec: String = axes.iter().map(|a| format!("{}={};", a.key, a.values.join(","))).collect();
    let tag: String = {
        use sha2::{Digest, Sha256};
        let d = Sha256::digest(format!("{}{}{spec}", base.hash(), paired).as_bytes());
        d.iter().take(6).map(|b| format!("{b:02x}")).collect()
    };
    let dir = root.join(format!("sweep-{tag}"));
    let mut csv = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = axes.iter().map(|a| a.key.clone()).collect();
    header.extend(
        ["status", "final_test_acc", "final_attack_acc", "oif", "final_drift", "run_dir", "error"].map(String::from),
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let io = |e: csv::Error| CliError::Internal(e.to_string());
    csv.write_record(&header).map_err(io)?;
    for p in &results {
        let mut rec = p.values.clone();
        rec.extend([
            p.status.clone(),
            opt(p.final_test_acc),
            opt(p.final_attack_acc),
            opt(p.oif),
            opt(p.final_drift),
            p.dir.as_ref().map(|d| d.display().to_string()).unwrap_or_default(),
            p.error.clone().unwrap_or_default(),
        ]);
        csv.write_record(&rec).map_err(io)?;
    }
    let bytes = csv.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
    write_atomic(&dir.join("summary.csv"), &bytes)?;
    Ok((dir, results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_respects_nesting() {
        assert_eq!(split_values("1,2, 3"), vec!["1", "2", "3"]);
        assert_eq!(
            split_values("{ mode = \"fixed\", l = 1.0 },{ mode = \"none\" }"),
            vec!["{ mode = \"fixed\", l = 1.0 }", "{ mode = \"none\" }"]
        );
        assert_eq!(split_values("\"a,b\",c"), vec!["\"a,b\"", "c"]);
        assert!(split_values("").is_empty());
    }

    #[test]
    fn axis_rejects_empty_lists() {
        assert!(Axis::parse("defense.k=").is_err());
        assert!(Axis::parse("defense.k=1,,2").is_err());
        assert!(Axis::parse("=1").is_err());
        assert_eq!(Axis::parse("defense.k=1,2").unwrap().values, vec!["1", "2"]);
    }

    fn one_step() -> CertifyArgs {
        CertifyArgs {
            rho: 0.1,
            c: 0.25, gamma: 0.0, k: 1, d: 4, rounds: 1,
            schedule: Schedule::Constant { lambda: 1.0 },
            variant: Recurrence::Proof,
        }
    }

    #[test]
    fn certify_one_step_values() {
        let r = certify_row(&one_step(), 0.1, 1, 1).unwrap();
        assert!((r.recurrence - 0.1).abs() < 1e-15);
        assert!((r.closed_form - 0.15).abs() < 1e-15);
        let r = certify_row(&one_step(), 0.0, 1, 5).unwrap();
        assert_eq!((r.recurrence, r.closed_form), (0.0, 0.0));
    }

    #[test]
    fn certify_grid_monotone_in_k() {
        let args = CertifyArgs { d: 1000, rounds: 20, ..one_step() };
        let csv = certify_grid(&args, &[], &[10, 100, 1000], &[]).unwrap();
        let rec: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
        assert_eq!(rec.len(), 3);
        assert!(rec.windows(2).all(|w| w[0] <= w[1]));
    }
}
