//! The pipeline steps behind the `softpair` binary: generate data, train,
//! evaluate, and check gradients.
//!
//! A generated data directory looks like
//!
//! ```text
//! <data_dir>/train/           training pairs
//! <data_dir>/eval_held_in/    evaluation images over training concepts
//! <data_dir>/eval_held_out/   evaluation images over held-out concepts (if any)
//! <data_dir>/labels/          one label row per concept
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{self, NoiseConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckReport};
use crate::train::{self, TrainOutcome};
use crate::zeroshot::{self, EvalResult, PromptTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Contrastive loss only (α = 0).
    Contrastive,
    /// Contrastive plus EMA distillation with the configured α.
    ContrastiveDistill,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "C" => Ok(Ablation::Contrastive),
            "C+D" | "CD" => Ok(Ablation::ContrastiveDistill),
            other => Err(Error::Config(format!("ablation must be C or C+D, got {other:?}"))),
        }
    }
}

impl Ablation {
    pub fn apply(self, cfg: &mut RunConfig) {
        cfg.train.distillation = self == Ablation::ContrastiveDistill;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub seed: u64,
    pub vocab_size: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub held_out: Vec<usize>,
    pub noise: NoiseConfig,
    pub out: PathBuf,
}

pub fn gen_data(cfg: &RunConfig) -> Result<GenSummary> {
    let split = data::generate_split(&cfg.data, cfg.seed)?;
    let out = &cfg.paths.data_dir;
    data::save_dataset(&split.train, out.join("train"))?;
    data::save_dataset(&split.eval_held_in, out.join("eval_held_in"))?;
    if let Some(ds) = &split.eval_held_out {
        data::save_dataset(ds, out.join("eval_held_out"))?;
    }
    let template = PromptTemplate::new(cfg.eval.template.clone())?;
    let labels = split.vocab.label_features();
    let prompts = labels
        .names
        .iter()
        .map(|n| template.apply(n))
        .collect::<Result<Vec<_>>>()?;
    data::save_labels(&labels, &prompts, out.join("labels"))?;
    Ok(GenSummary {
        seed: cfg.seed,
        vocab_size: cfg.data.vocab_size,
        train_size: split.train.len(),
        eval_size: split.eval_held_in.len(),
        held_out: split.held_out,
        noise: cfg.data.noise,
        out: out.clone(),
    })
}

/// Fails unless `dir` can be created and written to.
pub fn ensure_writable_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Trains on `<data_dir>/train` and writes the checkpoint and metrics log.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let paths = &cfg.paths;
    ensure_writable_dir(&paths.checkpoint_dir)?;
    if let Some(parent) = paths.metrics.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_writable_dir(parent)?;
    }
    let dataset = data::load_dataset(paths.data_dir.join("train"))?;
    let outcome = train::train(&dataset, &cfg.model_config(), &cfg.train)?;
    train::save_checkpoint(&outcome.checkpoint, &paths.checkpoint_dir)?;
    train::write_metrics(&paths.metrics, &outcome.metrics)?;
    Ok(outcome)
}

/// Evaluates a checkpoint on a dataset directory against a label directory.
pub fn run_eval(
    checkpoint_dir: &Path,
    images_dir: &Path,
    labels_dir: &Path,
    ks: &[usize],
    use_teacher: bool,
) -> Result<EvalResult> {
    let ckpt = train::load_checkpoint(checkpoint_dir)?;
    let ds = data::load_dataset(images_dir)?;
    let labels = data::load_labels(labels_dir)?;
    let model = if use_teacher {
        ckpt.teacher.params()
    } else {
        &ckpt.model
    };
    zeroshot::evaluate(model, &ds.image_features, &ds.image_concepts, &labels, ks)
}

pub fn run_grad_check(cfg: &gradcheck::GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    gradcheck::run_grad_check(cfg, seed, None)
}
