use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{link_rate, ClientProfile};
use crate::data::{self, LabeledDataset, PartitionMode};
use crate::error::{Error, Result};
use crate::model::{ModelShape, SubModelSpec};
use crate::rng::{self, Stream};

/// Scheme selector, including the uploaded-parameter-selection variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeKind {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "feddd")]
    Feddd,
    #[serde(rename = "feddd_random")]
    FedddRandom,
    #[serde(rename = "feddd_max")]
    FedddMax,
    #[serde(rename = "feddd_delta")]
    FedddDelta,
    #[serde(rename = "feddd_ordered")]
    FedddOrdered,
    #[serde(rename = "fedcs")]
    FedCs,
    #[serde(rename = "oort")]
    Oort,
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fedavg" => SchemeKind::FedAvg,
            "feddd" => SchemeKind::Feddd,
            "feddd_random" | "feddd-random" => SchemeKind::FedddRandom,
            "feddd_max" | "feddd-max" => SchemeKind::FedddMax,
            "feddd_delta" | "feddd-delta" => SchemeKind::FedddDelta,
            "feddd_ordered" | "feddd-ordered" => SchemeKind::FedddOrdered,
            "fedcs" => SchemeKind::FedCs,
            "oort" => SchemeKind::Oort,
            other => return Err(Error::Config(format!("unknown scheme {other:?}"))),
        })
    }
}

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::FedAvg => "fedavg",
            SchemeKind::Feddd => "feddd",
            SchemeKind::FedddRandom => "feddd_random",
            SchemeKind::FedddMax => "feddd_max",
            SchemeKind::FedddDelta => "feddd_delta",
            SchemeKind::FedddOrdered => "feddd_ordered",
            SchemeKind::FedCs => "fedcs",
            SchemeKind::Oort => "oort",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        dims: usize,
        per_class: usize,
        test_per_class: usize,
        noise: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

/// Client system parameters: either rate ranges sampled directly, or
/// physical channel parameters run through the Shannon-rate formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProfileConfig {
    Ranges {
        rate_up: [f64; 2],
        rate_down: [f64; 2],
        freq_hz: [f64; 2],
        cycles_per_sample: [f64; 2],
    },
    Shannon {
        bandwidth_up: [f64; 2],
        bandwidth_down: [f64; 2],
        power_up: [f64; 2],
        power_down: f64,
        gain: [f64; 2],
        noise: f64,
        freq_hz: [f64; 2],
        cycles_per_sample: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SubmodelConfig {
    Homogeneous,
    /// Hidden-width fractions of the sub-model families; client `i` joins
    /// family `i % len`, so equal-sized families when `clients` divides.
    Families { fractions: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    DataSize,
    Equal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scheme: SchemeKind,
    pub clients: usize,
    pub rounds: usize,
    pub h: usize,
    pub a_server: f64,
    pub d_max: f64,
    pub delta: f64,
    pub oort_alpha: f64,
    pub train: TrainSettings,
    pub model: ModelSettings,
    pub dataset: DatasetConfig,
    pub partition: PartitionMode,
    pub profiles: ProfileConfig,
    pub submodels: SubmodelConfig,
    pub bits_per_param: u32,
    pub weighting: Weighting,
    /// Log per-round gradient norms and sigma estimates and evaluate the
    /// convergence bound in the summary (extra full-batch passes).
    pub bound_monitor: bool,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scheme: SchemeKind::Feddd,
            clients: 20,
            rounds: 100,
            h: 5,
            a_server: 0.6,
            d_max: 0.8,
            delta: 0.1,
            oort_alpha: 2.0,
            train: TrainSettings {
                learning_rate: 0.1,
                epochs: 1,
                batch_size: 32,
            },
            model: ModelSettings {
                hidden: vec![32, 16],
            },
            dataset: DatasetConfig::Synthetic {
                classes: 10,
                dims: 20,
                per_class: 200,
                test_per_class: 50,
                noise: 0.35,
            },
            partition: PartitionMode::NoniidB,
            profiles: ProfileConfig::Ranges {
                rate_up: [1e4, 5e4],
                rate_down: [4e4, 2e5],
                freq_hz: [1e9, 1e10],
                cycles_per_sample: [1e6, 1e7],
            },
            submodels: SubmodelConfig::Homogeneous,
            bits_per_param: 32,
            weighting: Weighting::DataSize,
            bound_monitor: false,
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("need at least one round".into()));
        }
        if self.h == 0 {
            return Err(Error::Config("broadcast period h must be >= 1".into()));
        }
        if !(self.a_server > 0.0 && self.a_server <= 1.0) {
            return Err(Error::Config("a_server must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.d_max) {
            return Err(Error::Config("d_max must lie in [0, 1]".into()));
        }
        if self.bits_per_param == 0 {
            return Err(Error::Config("bits_per_param must be >= 1".into()));
        }
        if let SubmodelConfig::Families { fractions } = &self.submodels {
            if fractions.is_empty() {
                return Err(Error::Config("need at least one sub-model family".into()));
            }
            for &f in fractions {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config("family fractions must lie in (0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    /// Build the train/test pair. Synthetic data draws one pool per class and
    /// splits it, so train and test share class centers but not noise draws.
    pub fn build_datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                dims,
                per_class,
                test_per_class,
                noise,
            } => {
                let data_seed = rng::derive(self.seed, Stream::DataCenters, 0, 0);
                let pool = data::gen_synthetic(
                    *classes,
                    *dims,
                    per_class + test_per_class,
                    *noise,
                    data_seed,
                )?;
                let mut train = LabeledDataset::new(*dims, *classes);
                let mut test = LabeledDataset::new(*dims, *classes);
                for c in 0..*classes {
                    let base = c * (per_class + test_per_class);
                    for i in 0..*per_class {
                        train.push(pool.feature(base + i), c);
                    }
                    for i in 0..*test_per_class {
                        test.push(pool.feature(base + per_class + i), c);
                    }
                }
                Ok((train, test))
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = data::load_idx(train_images, train_labels)?;
                let test = data::load_idx(test_images, test_labels)?;
                if train.dim != test.dim {
                    return Err(Error::Config(format!(
                        "train dim {} vs test dim {}",
                        train.dim, test.dim
                    )));
                }
                Ok((train, test))
            }
        }
    }

    pub fn model_shape(&self, input_dim: usize, classes: usize) -> ModelShape {
        ModelShape::mlp(input_dim, &self.model.hidden, classes)
    }

    pub fn submodel_specs(&self, global: &ModelShape) -> Vec<SubModelSpec> {
        match &self.submodels {
            SubmodelConfig::Homogeneous => vec![SubModelSpec::full(global); self.clients],
            SubmodelConfig::Families { fractions } => (0..self.clients)
                .map(|i| SubModelSpec::scaled(global, fractions[i % fractions.len()]))
                .collect(),
        }
    }

    /// Sample static client profiles; `sizes_bits` and `samples` come from
    /// the sub-model specs and partition.
    pub fn sample_profiles(
        &self,
        sizes_bits: &[f64],
        samples: &[usize],
        dis: &[Vec<f64>],
        specs: &[SubModelSpec],
    ) -> Vec<ClientProfile> {
        let mut rng = rng::rng(self.seed, Stream::Profiles, 0, 0);
        let mut out = Vec::with_capacity(self.clients);
        for i in 0..self.clients {
            let (rate_up, rate_down, freq, cycles) = match &self.profiles {
                ProfileConfig::Ranges {
                    rate_up,
                    rate_down,
                    freq_hz,
                    cycles_per_sample,
                } => (
                    sample(&mut rng, *rate_up),
                    sample(&mut rng, *rate_down),
                    sample(&mut rng, *freq_hz),
                    sample(&mut rng, *cycles_per_sample),
                ),
                ProfileConfig::Shannon {
                    bandwidth_up,
                    bandwidth_down,
                    power_up,
                    power_down,
                    gain,
                    noise,
                    freq_hz,
                    cycles_per_sample,
                } => {
                    let g = sample(&mut rng, *gain);
                    let up = link_rate(sample(&mut rng, *bandwidth_up), sample(&mut rng, *power_up), g, *noise);
                    let down = link_rate(sample(&mut rng, *bandwidth_down), *power_down, g, *noise);
                    (
                        up,
                        down,
                        sample(&mut rng, *freq_hz),
                        sample(&mut rng, *cycles_per_sample),
                    )
                }
            };
            out.push(ClientProfile {
                freq_hz: freq,
                cycles_per_sample: cycles,
                batch_size: self.train.batch_size,
                rate_up,
                rate_down,
                size_bits: sizes_bits[i],
                samples: samples[i],
                dis: dis[i].clone(),
                spec: specs[i].clone(),
            });
        }
        out
    }
}

fn sample(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[0] >= range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}
