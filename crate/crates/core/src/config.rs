//! TOML run configuration shared by the command-line tool and examples.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! vocab_size = 64
//! train_size = 4096
//! eval_size = 1024
//! image_dim = 32
//! text_dim = 32
//! [data.noise]
//! concepts_per_image = [1, 1]
//! caption_coverage = 1.0
//! distractor_rate = 0.0
//! feature_noise_sigma = 0.0
//!
//! [model]
//! hidden = [64]
//! embed_dim = 32
//!
//! [train]
//! epochs = 10
//! batch_size_per_worker = 128
//!
//! [eval]          # optional
//! [paths]         # optional
//! [grad_check]    # optional
//! ```
//!
//! The root `seed` drives every random stream (data, initialization, batch
//! order); `train.seed`, if present, is replaced by it. Command-line flags
//! override file values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckConfig;
use crate::model::{Activation, ModelConfig, DEFAULT_TEMPERATURE};
use crate::train::TrainConfig;
use crate::zeroshot::{DEFAULT_KS, DEFAULT_TEMPLATE};

/// Model settings without the input widths, which come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub learnable_temperature: bool,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

impl ModelSection {
    pub fn model_config(&self, image_dim: usize, text_dim: usize) -> ModelConfig {
        ModelConfig {
            image_dim,
            text_dim,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            activation: self.activation,
            temperature: self.temperature,
            learnable_temperature: self.learnable_temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "default_template")]
    pub template: String,
    /// Evaluate the EMA teacher instead of the student.
    #[serde(default)]
    pub use_teacher: bool,
}

fn default_ks() -> Vec<usize> {
    DEFAULT_KS.to_vec()
}
fn default_template() -> String {
    DEFAULT_TEMPLATE.into()
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: default_ks(),
            template: default_template(),
            use_teacher: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_checkpoint_dir")]
    pub checkpoint_dir: PathBuf,
    #[serde(default = "default_metrics")]
    pub metrics: PathBuf,
    #[serde(default = "default_eval_report")]
    pub eval_report: PathBuf,
}

fn default_data_dir() -> PathBuf {
    "runs/data".into()
}
fn default_checkpoint_dir() -> PathBuf {
    "runs/checkpoint".into()
}
fn default_metrics() -> PathBuf {
    "runs/metrics.jsonl".into()
}
fn default_eval_report() -> PathBuf {
    "runs/eval.json".into()
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: default_data_dir(),
            checkpoint_dir: default_checkpoint_dir(),
            metrics: default_metrics(),
            eval_report: default_eval_report(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub grad_check: GradCheckConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().into()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.model_config(self.data.image_dim, self.data.text_dim)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[data]
vocab_size = 8
train_size = 32
eval_size = 16
image_dim = 6
text_dim = 5
[data.noise]
concepts_per_image = [1, 1]
caption_coverage = 1.0
distractor_rate = 0.0
feature_noise_sigma = 0.0
[model]
embed_dim = 4
[train]
epochs = 1
batch_size_per_worker = 8
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.lr, 3e-3);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.weight_decay, 0.0);
        assert_eq!(cfg.train.alpha, 1.0);
        assert_eq!(cfg.eval.ks, vec![1, 2, 5, 10]);
        assert_eq!(cfg.eval.template, "a photo of {label}");
        assert_eq!(cfg.model.temperature, 0.07);
        let mc = cfg.model_config();
        assert_eq!((mc.image_dim, mc.text_dim), (6, 5));
    }

    #[test]
    fn missing_field_is_named() {
        let text = MINIMAL.replace("vocab_size = 8\n", "");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("vocab_size"), "{err}");
    }

    #[test]
    fn unknown_field_is_named() {
        let text = MINIMAL.replace("epochs = 1", "epochs = 1\nepoch_count = 2");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("epoch_count"), "{err}");
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
