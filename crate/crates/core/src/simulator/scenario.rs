use alloc::vec;
use alloc::vec::Vec;

use crate::data::{build_auxiliary, make_blobs, partition, AuxiliarySet, DeviceDataset, PartitionMode, PartitionSpec};
use crate::error::{param_err, Result};
use crate::models::{Batch, GradientOracle, ModelKind};

/// Everything a run needs besides the protocol: the device population, the
/// evaluation sets and the starting model.
#[derive(Debug, Clone)]
pub struct Federation {
    pub initial: GradientOracle,
    /// Device `i` has `device_id == i`.
    pub devices: Vec<DeviceDataset>,
    /// Held-out test points, auxiliary points removed.
    pub test: Batch,
    pub aux: AuxiliarySet,
    /// Set used for the per-round training loss, if any.
    pub train_eval: Option<Batch>,
}

impl Federation {
    pub fn new(
        initial: GradientOracle,
        devices: Vec<DeviceDataset>,
        test: Batch,
        aux: AuxiliarySet,
    ) -> Result<Self> {
        if devices.is_empty() {
            return param_err("federation needs at least one device");
        }
        if devices.iter().enumerate().any(|(i, d)| d.device_id != i) {
            return param_err("device ids must be 0..n in order");
        }
        let inputs = initial.kind().inputs();
        if devices.iter().any(|d| d.examples.dim() != inputs) || test.dim() != inputs {
            return param_err("data dimension differs from model inputs");
        }
        Ok(Self {
            initial,
            devices,
            test,
            aux,
            train_eval: None,
        })
    }

    pub fn total_points(&self) -> usize {
        self.devices.iter().map(|d| d.examples.len()).sum()
    }

    /// Union of all device data in device order.
    pub fn pooled_train(&self) -> Batch {
        let mut all = Batch::empty(self.initial.kind().inputs());
        for d in &self.devices {
            all.extend(&d.examples).expect("device dimensions were checked");
        }
        all
    }
}

/// Synthetic blobs federation.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlobsScenario {
    pub dims: usize,
    pub classes: usize,
    pub separation: f64,
    pub n_devices: usize,
    pub points_per_device: usize,
    pub partition: PartitionMode,
    pub n_test: usize,
    pub aux_size: usize,
    pub hidden: Option<usize>,
    pub init_scale: f64,
    pub seed: u64,
}

impl BlobsScenario {
    pub fn model_kind(&self) -> ModelKind {
        match self.hidden {
            None => ModelKind::SoftmaxLinear {
                inputs: self.dims,
                classes: self.classes,
            },
            Some(hidden) => ModelKind::Mlp {
                inputs: self.dims,
                hidden,
                classes: self.classes,
            },
        }
    }

    /// Draws train and test points from one blob mixture, partitions the
    /// train part, and takes the auxiliary set out of the test part.
    ///
    /// With single-class partitioning the train part takes an equal number
    /// of points from every class so each class can fill its devices.
    pub fn build(&self) -> Result<Federation> {
        let all = match self.partition {
            PartitionMode::Iid => make_blobs(
                self.n_devices * self.points_per_device + self.n_test,
                self.dims,
                self.classes,
                self.separation,
                self.seed,
            )?,
            PartitionMode::SingleClass => {
                let per_class = self.n_devices.div_ceil(self.classes) * self.points_per_device;
                let pool = make_blobs(
                    per_class * self.classes + self.n_test,
                    self.dims,
                    self.classes,
                    self.separation,
                    self.seed,
                )?;
                let mut taken = vec![0usize; self.classes];
                let (mut first, mut rest) = (Vec::new(), Vec::new());
                for (i, &y) in pool.labels().iter().enumerate() {
                    if taken[y] < per_class {
                        taken[y] += 1;
                        first.push(i);
                    } else {
                        rest.push(i);
                    }
                }
                if taken.iter().any(|&c| c < per_class) {
                    return param_err("n_test too small to balance classes for single-class devices");
                }
                first.extend(rest);
                pool.select(&first)
            }
        };
        let n_train = all.len() - self.n_test;
        let train = all.range(0, n_train);
        let held_out = all.range(n_train, all.len());
        let devices = partition(
            &train,
            &PartitionSpec {
                mode: self.partition,
                n_devices: self.n_devices,
                points_per_device: self.points_per_device,
                seed: self.seed,
            },
        )?;
        let aux = build_auxiliary(&held_out, self.aux_size, self.classes, self.seed)?;
        let keep: Vec<usize> = (0..held_out.len())
            .filter(|i| !aux.source_indices.contains(i))
            .collect();
        let test = held_out.select(&keep);
        let initial = if self.init_scale > 0.0 {
            GradientOracle::init(self.model_kind(), self.init_scale, self.seed)?
        } else {
            GradientOracle::zeros(self.model_kind())?
        };
        Federation::new(initial, devices, test, aux)
    }
}
