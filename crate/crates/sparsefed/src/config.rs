//! TOML experiment configuration.
//!
//! A file has an optional top-level `seed` and the tables `[data]`,
//! `[protocol]`, `[defense]`, `[attack]`, `[injection]`, `[seeds]` and
//! `[output]`. Every key has a default except where noted, unknown keys
//! are errors, and `--set table.key=value` overrides are applied to the
//! parsed document before validation. See the README for the full grammar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sparsefed_core::attacks::{ActiveRounds, AttackKind, AttackSpec};
use sparsefed_core::data::{build_auxiliary, partition, PartitionMode, PartitionSpec};
use sparsefed_core::defenses::{AggregatorRule, AggregatorSpec, ClipMode};
use sparsefed_core::models::{Batch, GradientOracle, ModelKind};
use sparsefed_core::numkit::SketchShape;
use sparsefed_core::simulator::{
    AttackerPresence, BlobsScenario, Defense, Federation, Injection, Participation, ProtocolConfig,
    Schedule, Seeds,
};
use sparsefed_core::sparsefed::SparseFedSpec;

use crate::error::{config_err, CliError};
use crate::io::{load_csv, load_idx};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; unset entries of `[seeds]` derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injection: Option<Injection>,
    #[serde(default)]
    pub seeds: SeedsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Blobs {
        #[serde(default = "d::dims")]
        dims: usize,
        #[serde(default = "d::classes")]
        classes: usize,
        #[serde(default = "d::separation")]
        separation: f64,
        #[serde(default = "d::n_devices")]
        n_devices: usize,
        #[serde(default = "d::points_per_device")]
        points_per_device: usize,
        #[serde(default = "d::partition")]
        partition: PartitionMode,
        #[serde(default = "d::n_test")]
        n_test: usize,
        #[serde(default = "d::aux_size")]
        aux_size: usize,
        /// Hidden width of a one-hidden-layer MLP; absent for softmax
        /// regression.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hidden: Option<usize>,
        #[serde(default)]
        init_scale: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "d::n_devices")]
        n_devices: usize,
        #[serde(default = "d::points_per_device")]
        points_per_device: usize,
        #[serde(default = "d::partition")]
        partition: PartitionMode,
        #[serde(default = "d::aux_size")]
        aux_size: usize,
        /// Number of classes; defaults to one more than the largest label.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hidden: Option<usize>,
        #[serde(default)]
        init_scale: f64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default = "d::n_devices")]
        n_devices: usize,
        #[serde(default = "d::points_per_device")]
        points_per_device: usize,
        #[serde(default = "d::partition")]
        partition: PartitionMode,
        #[serde(default = "d::aux_size")]
        aux_size: usize,
        /// Number of classes; defaults to one more than the largest label.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hidden: Option<usize>,
        #[serde(default)]
        init_scale: f64,
    },
}

/// How file datasets are distributed and modelled.
struct Split {
    n_devices: usize,
    points_per_device: usize,
    partition: PartitionMode,
    aux_size: usize,
    classes: Option<usize>,
    hidden: Option<usize>,
    init_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Blobs {
            dims: d::dims(),
            classes: d::classes(),
            separation: d::separation(),
            n_devices: d::n_devices(),
            points_per_device: d::points_per_device(),
            partition: d::partition(),
            n_test: d::n_test(),
            aux_size: d::aux_size(),
            hidden: None,
            init_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    #[serde(default = "d::rounds", alias = "T")]
    pub rounds: usize,
    #[serde(default = "d::per_round")]
    pub per_round: usize,
    #[serde(default)]
    pub p_compromised: f64,
    /// Attackers joining every round; absent means they are sampled like
    /// everyone else.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced_attackers: Option<usize>,
    #[serde(default = "d::participation")]
    pub participation: Participation,
    #[serde(default = "d::one", alias = "tau")]
    pub local_epochs: usize,
    #[serde(default = "d::local_batch")]
    pub local_batch: usize,
    #[serde(default = "d::local_lr")]
    pub local_lr: f64,
    #[serde(default = "d::clip")]
    pub clip: ClipMode,
    #[serde(default = "d::schedule")]
    pub schedule: Schedule,
    /// Record the training loss over all device data each round.
    #[serde(default)]
    pub train_loss: bool,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        toml::from_str("").expect("every protocol key has a default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseConfig {
    Mean {
        #[serde(default)]
        momentum: f64,
    },
    TrimmedMean {
        f: usize,
        #[serde(default)]
        momentum: f64,
    },
    CoordMedian {
        #[serde(default)]
        momentum: f64,
    },
    Krum {
        f: usize,
        #[serde(default)]
        momentum: f64,
    },
    Bulyan {
        f: usize,
        #[serde(default)]
        momentum: f64,
    },
    MeanDp {
        sigma: f64,
        #[serde(default)]
        momentum: f64,
    },
    Sparsefed {
        k: usize,
        #[serde(default = "d::rho")]
        rho: f64,
        #[serde(default)]
        momentum_into_memory: bool,
        #[serde(default = "d::yes")]
        mask_momentum: bool,
    },
    Fetchsgd {
        k: usize,
        #[serde(default = "d::rho")]
        rho: f64,
        rows: usize,
        cols: usize,
        #[serde(default)]
        sketch_seed: u64,
    },
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig::Mean { momentum: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "d::attack_kind")]
    pub kind: AttackKind,
    #[serde(default = "d::epochs")]
    pub epochs: usize,
    #[serde(default = "d::local_batch")]
    pub batch: usize,
    #[serde(default = "d::local_lr")]
    pub lr: f64,
    #[serde(default = "d::boost")]
    pub boost: f64,
    #[serde(default = "d::yes")]
    pub collude: bool,
    #[serde(default = "d::one")]
    pub first_round: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_round: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

mod d {
    use super::*;
    pub fn dims() -> usize { 16 }
    pub fn classes() -> usize { 4 }
    pub fn separation() -> f64 { 4.0 }
    pub fn n_devices() -> usize { 100 }
    pub fn points_per_device() -> usize { 10 }
    pub fn partition() -> PartitionMode { PartitionMode::Iid }
    pub fn n_test() -> usize { 400 }
    pub fn aux_size() -> usize { 10 }
    pub fn rounds() -> usize { 50 }
    pub fn per_round() -> usize { 10 }
    pub fn participation() -> Participation { Participation::Repeated }
    pub fn one() -> usize { 1 }
    pub fn local_batch() -> usize { 10 }
    pub fn local_lr() -> f64 { 0.1 }
    pub fn clip() -> ClipMode { ClipMode::None }
    pub fn schedule() -> Schedule { Schedule::Triangular { peak: 1.0, warmup_frac: 0.2 } }
    pub fn rho() -> f64 { 0.9 }
    pub fn yes() -> bool { true }
    pub fn attack_kind() -> AttackKind { AttackKind::TargetedPgd }
    pub fn epochs() -> usize { 5 }
    pub fn boost() -> f64 { 20.0 }
}

/// Parses a config with `key=value` overrides applied to the document.
///
/// Override values are read as TOML values when they parse as one and as
/// strings otherwise, so `defense.rule=krum` and `protocol.T=5` both work.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    for (table, tag, default) in [("data", "source", "blobs"), ("defense", "rule", "mean")] {
        if let Some(toml::Value::Table(t)) = doc.get_mut(table) {
            t.entry(tag).or_insert_with(|| toml::Value::String(default.into()));
        }
    }
    ExperimentConfig::deserialize(toml::Value::Table(doc))
        .map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text, overrides).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    cfg.rebase_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Fills derived seeds so the config is fully explicit. Idempotent.
    pub fn normalized(&self) -> Self {
        // TOML integers are signed, so derived seeds keep 63 bits.
        let fit = |s: u64| s & i64::MAX as u64;
        let derived = Seeds::from_master(self.seed);
        let mut out = self.clone();
        out.seeds = SeedsConfig {
            data: Some(self.seeds.data.unwrap_or(self.seed)),
            sampling: Some(self.seeds.sampling.unwrap_or(fit(derived.sampling))),
            attack: Some(self.seeds.attack.unwrap_or(fit(derived.attack))),
            noise: Some(self.seeds.noise.unwrap_or(fit(derived.noise))),
        };
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    /// First 12 hex digits of the SHA-256 of the normalized config without
    /// its output section.
    pub fn hash(&self) -> String {
        let mut c = self.normalized();
        c.output = OutputConfig::default();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    fn rebase_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataConfig::Blobs { .. } => {}
            DataConfig::Idx { train_images, train_labels, test_images, test_labels, .. } => {
                [train_images, train_labels, test_images, test_labels].into_iter().for_each(fix);
            }
            DataConfig::Csv { train, test, .. } => [train, test].into_iter().for_each(fix),
        }
        if let Some(dir) = &mut self.output.dir {
            fix(dir);
        }
    }

    pub fn seeds(&self) -> Seeds {
        let n = self.normalized().seeds;
        Seeds {
            sampling: n.sampling.expect("normalized"),
            attack: n.attack.expect("normalized"),
            noise: n.noise.expect("normalized"),
        }
    }

    fn data_seed(&self) -> u64 {
        self.seeds.data.unwrap_or(self.seed)
    }

    /// Builds the federation and the protocol.
    pub fn resolve(&self) -> Result<(Federation, ProtocolConfig), CliError> {
        let mut fed = self.federation()?;
        let protocol = self.protocol(&fed)?;
        protocol.validate(fed.devices.len(), fed.initial.dim()).map_err(config_err)?;
        if self.protocol.train_loss {
            fed.train_eval = Some(fed.pooled_train());
        }
        Ok((fed, protocol))
    }

    pub fn federation(&self) -> Result<Federation, CliError> {
        let seed = self.data_seed();
        match &self.data {
            DataConfig::Blobs {
                dims,
                classes,
                separation,
                n_devices,
                points_per_device,
                partition,
                n_test,
                aux_size,
                hidden,
                init_scale,
            } => BlobsScenario {
                dims: *dims,
                classes: *classes,
                separation: *separation,
                n_devices: *n_devices,
                points_per_device: *points_per_device,
                partition: *partition,
                n_test: *n_test,
                aux_size: *aux_size,
                hidden: *hidden,
                init_scale: *init_scale,
                seed,
            }
            .build()
            .map_err(config_err),
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                n_devices,
                points_per_device,
                partition,
                aux_size,
                classes,
                hidden,
                init_scale,
            } => {
                let split = Split {
                    n_devices: *n_devices,
                    points_per_device: *points_per_device,
                    partition: *partition,
                    aux_size: *aux_size,
                    classes: *classes,
                    hidden: *hidden,
                    init_scale: *init_scale,
                };
                let train = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?;
                split_federation(train, test, &split, seed)
            }
            DataConfig::Csv {
                train,
                test,
                n_devices,
                points_per_device,
                partition,
                aux_size,
                classes,
                hidden,
                init_scale,
            } => {
                let split = Split {
                    n_devices: *n_devices,
                    points_per_device: *points_per_device,
                    partition: *partition,
                    aux_size: *aux_size,
                    classes: *classes,
                    hidden: *hidden,
                    init_scale: *init_scale,
                };
                split_federation(load_csv(train)?, load_csv(test)?, &split, seed)
            }
        }
    }

    fn protocol(&self, fed: &Federation) -> Result<ProtocolConfig, CliError> {
        let p = &self.protocol;
        let defense = match self.defense {
            DefenseConfig::Mean { momentum } => aggregator(AggregatorRule::Mean, 0, 0.0, momentum),
            DefenseConfig::TrimmedMean { f, momentum } => aggregator(AggregatorRule::TrimmedMean, f, 0.0, momentum),
            DefenseConfig::CoordMedian { momentum } => aggregator(AggregatorRule::CoordMedian, 0, 0.0, momentum),
            DefenseConfig::Krum { f, momentum } => aggregator(AggregatorRule::Krum, f, 0.0, momentum),
            DefenseConfig::Bulyan { f, momentum } => aggregator(AggregatorRule::Bulyan, f, 0.0, momentum),
            DefenseConfig::MeanDp { sigma, momentum } => aggregator(AggregatorRule::MeanDp, 0, sigma, momentum),
            DefenseConfig::Sparsefed { k, rho, momentum_into_memory, mask_momentum } => {
                Defense::SparseFed(SparseFedSpec { k, rho, momentum_into_memory, mask_momentum })
            }
            DefenseConfig::Fetchsgd { k, rho, rows, cols, sketch_seed } => Defense::FetchSgd {
                k,
                rho,
                shape: SketchShape { rows, cols, seed: sketch_seed },
            },
        };
        let attack = self.attack.as_ref().map(|a| AttackSpec {
            kind: a.kind,
            pgd_epochs: a.epochs,
            batch: a.batch,
            lr: a.lr,
            boost: a.boost,
            known_clip: p.clip,
            collude: a.collude,
            active: ActiveRounds {
                first: a.first_round,
                last: a.last_round.unwrap_or(ActiveRounds::always().last),
            },
        });
        if self.attack.is_some() && fed.aux.is_empty() {
            return Err(CliError::Config("an attack needs a nonempty auxiliary set".into()));
        }
        Ok(ProtocolConfig {
            rounds: p.rounds,
            per_round: p.per_round,
            p_compromised: p.p_compromised,
            presence: p.forced_attackers.map_or(AttackerPresence::Sampled, AttackerPresence::Forced),
            participation: p.participation,
            tau: p.local_epochs,
            local_batch: p.local_batch,
            local_lr: p.local_lr,
            clip: p.clip,
            schedule: p.schedule,
            defense,
            attack,
            injection: self.injection,
            seeds: self.seeds(),
            keep_trace: false,
        })
    }
}

fn aggregator(rule: AggregatorRule, f: usize, sigma: f64, momentum: f64) -> Defense {
    Defense::Aggregator { spec: AggregatorSpec { rule, f, sigma }, momentum }
}

fn split_federation(train: Batch, held_out: Batch, s: &Split, seed: u64) -> Result<Federation, CliError> {
    if train.dim() != held_out.dim() {
        return Err(CliError::Config("train and test data differ in feature count".into()));
    }
    let max_label = train.labels().iter().chain(held_out.labels()).copied().max().unwrap_or(0);
    let classes = s.classes.unwrap_or(max_label + 1);
    if max_label >= classes {
        return Err(CliError::Config(format!("label {max_label} out of range for {classes} classes")));
    }
    let devices = partition(
        &train,
        &PartitionSpec { mode: s.partition, n_devices: s.n_devices, points_per_device: s.points_per_device, seed },
    )
    .map_err(config_err)?;
    let aux = build_auxiliary(&held_out, s.aux_size, classes, seed).map_err(config_err)?;
    let keep: Vec<usize> = (0..held_out.len()).filter(|i| !aux.source_indices.contains(i)).collect();
    let inputs = train.dim();
    let kind = match s.hidden {
        None => ModelKind::SoftmaxLinear { inputs, classes },
        Some(hidden) => ModelKind::Mlp { inputs, hidden, classes },
    };
    let initial = if s.init_scale > 0.0 {
        GradientOracle::init(kind, s.init_scale, seed)
    } else {
        GradientOracle::zeros(kind)
    }
    .map_err(config_err)?;
    Federation::new(initial, devices, held_out.select(&keep), aux).map_err(config_err)
}
