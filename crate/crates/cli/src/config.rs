//! Run configuration: defaults, overlaid by a TOML file, overlaid by flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use spikecp::harness::{ExperimentConfig, ResamplePolicy, SyntheticSpec, ValidationSettings};
use spikecp::seed::child_seed;
use spikecp::snn::{Architecture, NeuronParams};
use spikecp::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    De,
    Vi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub classes: usize,
    pub channels: usize,
    pub steps: usize,
    pub base_rate: f64,
    pub signal_rate: f64,
    pub difficulty: [f64; 2],
    pub train_size: usize,
    pub pool_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        Self {
            classes: spec.num_classes,
            channels: spec.channels,
            steps: spec.steps,
            base_rate: spec.base_rate,
            signal_rate: spec.signal_rate,
            difficulty: [spec.difficulty.0, spec.difficulty.1],
            train_size: 1200,
            pool_size: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub mode: Mode,
    pub k: usize,
    pub hidden: Vec<usize>,
    pub beta_mem: f64,
    pub beta_syn: f64,
    pub threshold: f64,
    pub resample: ResamplePolicy,
}

impl Default for ModelSection {
    fn default() -> Self {
        let n = NeuronParams::default();
        Self {
            mode: Mode::De,
            k: 6,
            hidden: vec![32],
            beta_mem: n.beta_mem,
            beta_syn: n.beta_syn,
            threshold: n.threshold,
            resample: ResamplePolicy::PerRealization,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub surrogate_slope: f64,
    pub prior_variance: f64,
    pub posterior_init_std: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            surrogate_slope: t.surrogate_slope,
            prior_variance: t.init_variance,
            posterior_init_std: t.posterior_init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateSection {
    pub trials: usize,
    pub cal: usize,
    pub alphas: Vec<f64>,
    pub tolerance: f64,
    pub ensemble_size: usize,
    pub correlation: f64,
    pub r: f64,
    pub dominance_samples: usize,
}

impl Default for ValidateSection {
    fn default() -> Self {
        let v = ValidationSettings::default();
        Self {
            trials: v.trials,
            cal: v.n_cal,
            alphas: v.alphas,
            tolerance: v.tolerance,
            ensemble_size: v.ensemble_size,
            correlation: v.correlation,
            r: v.power_exponent,
            dominance_samples: v.dominance_samples,
        }
    }
}

/// Everything a command can depend on. One master seed feeds every random stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub experiment: ExperimentConfig,
    pub validate: ValidateSection,
}

/// Indices of the streams derived from the master seed.
const TRAIN_DATA_STREAM: u64 = 1;
const POOL_DATA_STREAM: u64 = 2;
const TRAINING_STREAM: u64 = 3;
const SAMPLING_STREAM: u64 = 4;
const EXPERIMENT_STREAM: u64 = 5;
const VALIDATE_STREAM: u64 = 6;

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn hash(&self) -> String {
        spikecp::formats::config_hash(self)
    }

    fn spec(&self, stream: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.data.classes,
            channels: self.data.channels,
            steps: self.data.steps,
            base_rate: self.data.base_rate,
            signal_rate: self.data.signal_rate,
            difficulty: (self.data.difficulty[0], self.data.difficulty[1]),
            seed: child_seed(self.seed, stream),
        }
    }

    pub fn train_spec(&self) -> SyntheticSpec {
        self.spec(TRAIN_DATA_STREAM)
    }

    pub fn pool_spec(&self) -> SyntheticSpec {
        self.spec(POOL_DATA_STREAM)
    }

    pub fn architecture(&self, inputs: usize, classes: usize) -> Result<Architecture> {
        let mut sizes = vec![inputs];
        sizes.extend(&self.model.hidden);
        sizes.push(classes);
        let neuron = NeuronParams {
            beta_mem: self.model.beta_mem,
            beta_syn: self.model.beta_syn,
            threshold: self.model.threshold,
        };
        Ok(Architecture::new(sizes, neuron)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            surrogate_slope: self.train.surrogate_slope,
            init_variance: self.train.prior_variance,
            posterior_init_std: self.train.posterior_init_std,
            seed: child_seed(self.seed, TRAINING_STREAM),
        }
    }

    pub fn sampling_seed(&self) -> u64 {
        child_seed(self.seed, SAMPLING_STREAM)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: child_seed(self.seed, EXPERIMENT_STREAM),
            ..self.experiment.clone()
        }
    }

    pub fn validation(&self) -> ValidationSettings {
        ValidationSettings {
            trials: self.validate.trials,
            n_cal: self.validate.cal,
            alphas: self.validate.alphas.clone(),
            tolerance: self.validate.tolerance,
            ensemble_size: self.validate.ensemble_size,
            correlation: self.validate.correlation,
            power_exponent: self.validate.r,
            dominance_samples: self.validate.dominance_samples,
            seed: child_seed(self.seed, VALIDATE_STREAM),
        }
    }

    pub fn check(&self) -> Result<()> {
        self.train_spec().validate()?;
        self.train_config().validate()?;
        if self.model.k == 0 {
            bail!("model.k must be at least 1");
        }
        if self.data.train_size == 0 || self.data.pool_size == 0 {
            bail!("data.train_size and data.pool_size must be at least 1");
        }
        Ok(())
    }
}

/// Comma-separated list parsed element by element.
pub fn parse_list<T, E: std::fmt::Display>(
    raw: &str,
    parse: impl Fn(&str) -> std::result::Result<T, E>,
) -> Result<Vec<T>> {
    raw.split(',')
        .map(|v| parse(v.trim()).map_err(|e| anyhow::anyhow!("bad list element '{v}': {e}")))
        .collect()
}
