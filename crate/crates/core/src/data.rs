//! Synthetic data, device partitioning and auxiliary-set construction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // method resolution falls back to std when a dev build links it
use num_traits::Float as _;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{param_err, Result};
use crate::models::Batch;
use crate::rng::{gaussian, stream_rng, Stream};

/// One device's local examples.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDataset {
    pub device_id: usize,
    pub examples: Batch,
    /// Sorted, deduplicated set of labels present.
    pub class_profile: Vec<usize>,
}

impl DeviceDataset {
    pub fn new(device_id: usize, examples: Batch) -> Self {
        let mut class_profile = examples.labels().to_vec();
        class_profile.sort_unstable();
        class_profile.dedup();
        Self {
            device_id,
            examples,
            class_profile,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Test points carrying attacker-chosen labels.
///
/// `examples` holds the flipped labels; `true_labels[i]` is the ground truth
/// of example `i` and never equals its flipped label.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliarySet {
    pub examples: Batch,
    pub true_labels: Vec<usize>,
    /// Positions of the chosen points in the source batch.
    pub source_indices: Vec<usize>,
}

impl AuxiliarySet {
    pub fn empty(dim: usize) -> Self {
        Self {
            examples: Batch::empty(dim),
            true_labels: Vec::new(),
            source_indices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    pub fn flipped_labels(&self) -> &[usize] {
        self.examples.labels()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PartitionMode {
    Iid,
    SingleClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub n_devices: usize,
    pub points_per_device: usize,
    pub seed: u64,
}

/// Gaussian class clusters mapped into the unit cube.
///
/// Class means sit at distance `separation / sqrt(2)` from the origin along
/// distinct coordinate axes (random unit directions when `classes > dims`),
/// so any two means are `separation` apart. Points get unit-variance
/// isotropic noise, then every coordinate goes through the fixed map
/// `x -> clamp(x / (separation + 3), 0, 1)`, so off-mean coordinates are
/// zero about half the time. Labels cycle through
/// the classes before shuffling, so class counts differ by at most one.
pub fn make_blobs(
    n: usize,
    dims: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Batch> {
    if classes == 0 || dims == 0 {
        return param_err("make_blobs needs positive dims and classes");
    }
    if n < classes {
        return param_err(format!("make_blobs needs n >= classes ({n} < {classes})"));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return param_err("separation must be positive");
    }
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let radius = separation / 2f64.sqrt();
    let means: Vec<Vec<f64>> = if classes <= dims {
        let mut axes: Vec<usize> = (0..dims).collect();
        axes.shuffle(&mut rng);
        (0..classes)
            .map(|c| {
                let mut mu = vec![0.0; dims];
                mu[axes[c]] = radius;
                mu
            })
            .collect()
    } else {
        (0..classes)
            .map(|_| {
                let dir: Vec<f64> = (0..dims).map(|_| gaussian(&mut rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                dir.iter().map(|v| radius * v / norm).collect()
            })
            .collect()
    };
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let span = separation + 3.0;
    let mut features = Vec::with_capacity(n * dims);
    for &y in &labels {
        for mu in &means[y] {
            let noise = gaussian(&mut rng);
            features.push(((mu + noise) / span).clamp(0.0, 1.0));
        }
    }
    Batch::new(features, labels, dims)
}

/// Splits `data` across devices without overlap.
///
/// `Iid` shuffles the whole batch and deals consecutive chunks.
/// `SingleClass` gives device `i` only examples of class
/// `i mod n_classes`, drawn without replacement from a shuffled per-class
/// pool.
pub fn partition(data: &Batch, spec: &PartitionSpec) -> Result<Vec<DeviceDataset>> {
    if spec.n_devices == 0 || spec.points_per_device == 0 {
        return param_err("partition needs at least one device and one point per device");
    }
    let total = spec.n_devices * spec.points_per_device;
    if total > data.len() {
        return param_err(format!(
            "partition wants {total} points but the dataset has {}",
            data.len()
        ));
    }
    let mut rng = stream_rng(spec.seed, Stream::Partition, 0);
    match spec.mode {
        PartitionMode::Iid => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            Ok(order
                .chunks(spec.points_per_device)
                .take(spec.n_devices)
                .enumerate()
                .map(|(id, idx)| DeviceDataset::new(id, data.select(idx)))
                .collect())
        }
        PartitionMode::SingleClass => {
            let n_classes = data.labels().iter().max().map_or(0, |m| m + 1);
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
            for (i, &y) in data.labels().iter().enumerate() {
                pools[y].push(i);
            }
            for pool in &mut pools {
                pool.shuffle(&mut rng);
            }
            let mut cursor = vec![0usize; n_classes];
            let mut devices = Vec::with_capacity(spec.n_devices);
            for id in 0..spec.n_devices {
                let class = id % n_classes;
                let start = cursor[class];
                let end = start + spec.points_per_device;
                if end > pools[class].len() {
                    return param_err(format!(
                        "class {class} has {} points, single_class partition needs more",
                        pools[class].len()
                    ));
                }
                cursor[class] = end;
                devices.push(DeviceDataset::new(id, data.select(&pools[class][start..end])));
            }
            Ok(devices)
        }
    }
}

/// Samples `s` distinct points of `data` and relabels each to a class other
/// than its own.
///
/// Target labels start as a balanced shuffled multiset over all classes and
/// are then repaired by swaps so that no point keeps its true label. With
/// two classes every point takes the other class.
pub fn build_auxiliary(data: &Batch, s: usize, classes: usize, seed: u64) -> Result<AuxiliarySet> {
    if s > data.len() {
        return param_err(format!(
            "auxiliary set of {s} points requested from {} available",
            data.len()
        ));
    }
    if s == 0 {
        return Ok(AuxiliarySet::empty(data.dim()));
    }
    if classes < 2 {
        return param_err("label flipping needs at least two classes");
    }
    let mut rng = stream_rng(seed, Stream::Auxiliary, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(s);
    let points = data.select(&order);
    let truth = points.labels().to_vec();

    let mut targets: Vec<usize> = (0..s).map(|i| i % classes).collect();
    targets.shuffle(&mut rng);
    if classes == 2 {
        targets = truth.iter().map(|&y| 1 - y).collect();
    } else {
        for i in 0..s {
            if targets[i] != truth[i] {
                continue;
            }
            let swap = (0..s).find(|&j| targets[j] != truth[i] && targets[i] != truth[j]);
            match swap {
                Some(j) => targets.swap(i, j),
                None => {
                    // Degenerate pool; fall back to a uniform other label.
                    let r = rng.random_range(0..classes - 1);
                    targets[i] = if r >= truth[i] { r + 1 } else { r };
                }
            }
        }
    }
    debug_assert!(targets.iter().zip(&truth).all(|(t, y)| t != y));
    Ok(AuxiliarySet {
        examples: points.with_labels(targets)?,
        true_labels: truth,
        source_indices: order,
    })
}
