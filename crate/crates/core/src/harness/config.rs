use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::energy::{RegularizerMode, SgldConfig};
use crate::error::{Error, Result};
use crate::selftrain::{default_portion_schedule, RoundConfig};

/// Full description of one run. Serialized as TOML; every field has a
/// default so a config file only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_rounds: usize,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub pretrain: PretrainConfig,
    pub selftrain: SelfTrainConfig,
    pub sgld: SgldSection,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    TwoMoons {
        n_per_domain: usize,
        rotation_degrees: f64,
        noise_std: f64,
    },
    Blobs {
        n_per_domain: usize,
        n_classes: usize,
        dim: usize,
        shift: Vec<f64>,
    },
    Csv {
        source: PathBuf,
        target: PathBuf,
        target_eval: Option<PathBuf>,
        features: Vec<String>,
        label: String,
        classes: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerName {
    Literal,
    MaximumLikelihood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainConfig {
    pub alpha: f64,
    pub portion_start: f64,
    pub portion_step: f64,
    pub portion_max: f64,
    /// Explicit per-round portions; overrides start/step/max when set.
    pub portion_schedule: Option<Vec<f64>>,
    pub smoothing_epsilon: f64,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub regularizer: RegularizerName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgldSection {
    pub n_steps: usize,
    pub step_size: f64,
    pub noise_std: f64,
    pub proper: bool,
    pub buffer_capacity: usize,
    pub reinit_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Write wall-clock seconds into `metrics.csv`. Off by default so equal
    /// configs give byte-identical metrics.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_rounds: 5,
            out_dir: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            pretrain: PretrainConfig::default(),
            selftrain: SelfTrainConfig::default(),
            sgld: SgldSection::default(),
            output: OutputConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::TwoMoons {
            n_per_domain: 1000,
            rotation_degrees: 30.0,
            noise_std: 0.1,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![32] }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
        }
    }
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            portion_start: 0.2,
            portion_step: 0.05,
            portion_max: 0.5,
            portion_schedule: None,
            smoothing_epsilon: 0.0,
            epochs_per_round: 10,
            batch_size: 64,
            regularizer: RegularizerName::Literal,
        }
    }
}

impl Default for SgldSection {
    fn default() -> Self {
        let s = SgldConfig::default();
        Self {
            n_steps: s.n_steps,
            step_size: s.step_size,
            noise_std: s.noise_std,
            proper: s.proper_sgld,
            buffer_capacity: 10_000,
            reinit_prob: 0.05,
        }
    }
}

impl From<RegularizerName> for RegularizerMode {
    fn from(name: RegularizerName) -> Self {
        match name {
            RegularizerName::Literal => RegularizerMode::Literal,
            RegularizerName::MaximumLikelihood => RegularizerMode::MaximumLikelihood,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            // keep diagnostics on one line
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
            let msg = e.message().trim().replace('\n', " ");
            Error::Config(match line {
                Some(l) => format!("line {l}: {msg}"),
                None => msg,
            })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn portion_schedule(&self) -> Vec<f64> {
        let s = &self.selftrain;
        match &s.portion_schedule {
            Some(explicit) => explicit.clone(),
            None => default_portion_schedule(
                self.n_rounds,
                s.portion_start,
                s.portion_step,
                s.portion_max,
            ),
        }
    }

    /// Round configuration with SGLD init bounds taken from `init_bounds`.
    pub fn round_config(&self, init_bounds: Vec<(f64, f64)>) -> RoundConfig {
        let s = &self.selftrain;
        RoundConfig {
            alpha: s.alpha,
            portion_schedule: self.portion_schedule(),
            smoothing_epsilon: s.smoothing_epsilon,
            epochs_per_round: s.epochs_per_round,
            batch_size: s.batch_size,
            regularizer: s.regularizer.into(),
            sgld: SgldConfig {
                n_steps: self.sgld.n_steps,
                step_size: self.sgld.step_size,
                noise_std: self.sgld.noise_std,
                proper_sgld: self.sgld.proper,
                init_bounds,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.model.hidden.contains(&0) {
            return bad("model.hidden sizes must be positive".into());
        }
        if self.pretrain.batch_size == 0 || self.selftrain.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.sgld.buffer_capacity == 0 {
            return bad("sgld.buffer_capacity must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.sgld.reinit_prob) {
            return bad("sgld.reinit_prob must lie in [0, 1]".into());
        }
        if !(self.sgld.step_size > 0.0) || !(self.sgld.noise_std >= 0.0) {
            return bad("sgld.step_size must be positive and sgld.noise_std non-negative".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0)
            || !(0.0..1.0).contains(&o.momentum)
            || !(o.weight_decay >= 0.0)
        {
            return bad(
                "optimizer needs learning_rate >= 0, momentum in [0, 1), weight_decay >= 0".into(),
            );
        }
        let schedule = self.portion_schedule();
        if schedule.len() < self.n_rounds {
            return bad(format!(
                "selftrain.portion_schedule has {} entries for {} rounds",
                schedule.len(),
                self.n_rounds
            ));
        }
        self.round_config(Vec::new())
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        match &self.data {
            DataConfig::TwoMoons {
                n_per_domain,
                noise_std,
                ..
            } => {
                if *n_per_domain < 2 || !(*noise_std >= 0.0) {
                    return bad("two_moons needs n_per_domain >= 2 and noise_std >= 0".into());
                }
            }
            DataConfig::Blobs {
                n_per_domain,
                n_classes,
                dim,
                shift,
            } => {
                if *n_classes < 2 || *dim < 2 || shift.len() != *dim || n_per_domain < n_classes {
                    return bad("blobs needs n_classes >= 2, dim >= 2, shift of length dim".into());
                }
            }
            DataConfig::Csv {
                features, classes, ..
            } => {
                if features.is_empty() || classes.len() < 2 {
                    return bad("csv data needs feature columns and at least two classes".into());
                }
            }
        }
        Ok(())
    }
}
