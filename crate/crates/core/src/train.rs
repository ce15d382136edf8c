//! Training loop with simulated data-parallel workers.
//!
//! Each step splits the global batch into contiguous per-worker shards. Every
//! worker embeds its shard with the student and the teacher; the embeddings
//! are all-gathered in worker order so the loss sees the full global batch and
//! every cross-shard pairing is a negative. Embedding gradients are scattered
//! back to the shards, each worker backpropagates its own rows, and shard
//! gradients are summed in worker order. The result equals the single-worker
//! computation on the same global batch up to summation order.
//!
//! Per-step order: forward (student and teacher) -> loss -> backward ->
//! SGD with `lr_at(step)` -> EMA update.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, read_json, write_json, SyntheticPairDataset};
use crate::error::{Error, Result};
use crate::losses::{self, KlDirection, LossOptions, LossReport};
use crate::math::Matrix;
use crate::model::{
    self, ema_init, init_model, Activation, EmaTeacher, ForwardCache, Gradients, Layer,
    ModelConfig, TowerParams, TwoTowerModel, DEFAULT_EMA_DECAY,
};
use crate::optim::{self, CosineSchedule, SgdState, DEFAULT_LR, DEFAULT_MOMENTUM};
use crate::tensor_io::{self, Dtype};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Cadence {
    #[default]
    Step,
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size_per_worker: usize,
    #[serde(default = "one")]
    pub num_workers: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_decay")]
    pub ema_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub eta_min: f64,
    /// Whether the cosine schedule advances per optimizer step or per epoch.
    #[serde(default)]
    pub schedule_unit: Cadence,
    /// When the EMA teacher is refreshed.
    #[serde(default)]
    pub ema_cadence: Cadence,
    /// `false` trains with the contrastive loss only (α forced to 0).
    #[serde(default = "yes")]
    pub distillation: bool,
    #[serde(default)]
    pub kl_direction: KlDirection,
    #[serde(default)]
    pub log_every_step: bool,
    /// Adds wall-clock seconds to metrics records (breaks byte-identical logs).
    #[serde(default)]
    pub log_wall_time: bool,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_alpha() -> f64 {
    losses::DEFAULT_ALPHA
}
fn default_decay() -> f64 {
    DEFAULT_EMA_DECAY
}
fn default_lr() -> f64 {
    DEFAULT_LR
}
fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size_per_worker: usize, num_workers: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size_per_worker,
            num_workers,
            alpha: losses::DEFAULT_ALPHA,
            ema_decay: DEFAULT_EMA_DECAY,
            seed,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: 0.0,
            eta_min: 0.0,
            schedule_unit: Cadence::Step,
            ema_cadence: Cadence::Step,
            distillation: true,
            kl_direction: KlDirection::TeacherTarget,
            log_every_step: false,
            log_wall_time: false,
        }
    }

    pub fn global_batch(&self) -> usize {
        self.batch_size_per_worker * self.num_workers
    }

    /// α actually applied: zero in contrastive-only mode.
    pub fn effective_alpha(&self) -> f64 {
        if self.distillation {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            alpha: self.effective_alpha(),
            kl_direction: self.kl_direction,
        }
    }

    pub fn validate(&self, dataset_size: usize) -> Result<()> {
        if self.batch_size_per_worker == 0 || self.num_workers == 0 {
            return Err(Error::Config(
                "batch_size_per_worker and num_workers must be positive".into(),
            ));
        }
        if self.global_batch() > dataset_size {
            return Err(Error::Config(format!(
                "global batch {} x {} = {} exceeds dataset size {dataset_size}",
                self.batch_size_per_worker,
                self.num_workers,
                self.global_batch()
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must be in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        CosineSchedule::new(self.lr, 1, self.eta_min)?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_size: usize) -> usize {
        dataset_size / self.global_batch()
    }
}

/// Concatenates per-worker `(image, text)` embedding shards in worker order.
pub fn gather_embeddings(shards: &[(Matrix, Matrix)]) -> Result<(Matrix, Matrix)> {
    if shards.is_empty() {
        return Err(Error::Shard("no shards to gather".into()));
    }
    let d = shards[0].0.cols();
    for (w, (i, t)) in shards.iter().enumerate() {
        if i.cols() != d || t.cols() != d || i.rows() != t.rows() {
            return Err(Error::Shard(format!(
                "worker {w}: image {:?} / text {:?}, expected N x {d} each with equal N",
                i.shape(),
                t.shape()
            )));
        }
    }
    let images: Vec<&Matrix> = shards.iter().map(|s| &s.0).collect();
    let texts: Vec<&Matrix> = shards.iter().map(|s| &s.1).collect();
    Ok((Matrix::vstack(&images)?, Matrix::vstack(&texts)?))
}

struct ShardForward {
    image: Matrix,
    text: Matrix,
    image_cache: ForwardCache,
    text_cache: ForwardCache,
    teacher_image: Matrix,
    teacher_text: Matrix,
}

fn shard_forward(
    model: &TwoTowerModel,
    teacher: &TwoTowerModel,
    images: &Matrix,
    texts: &Matrix,
) -> Result<ShardForward> {
    let (image, image_cache) = model::forward(&model.image, images)?;
    let (text, text_cache) = model::forward(&model.text, texts)?;
    let (teacher_image, _) = model::forward(&teacher.image, images)?;
    let (teacher_text, _) = model::forward(&teacher.text, texts)?;
    Ok(ShardForward {
        image,
        text,
        image_cache,
        text_cache,
        teacher_image,
        teacher_text,
    })
}

/// Loss and reduced gradients for one global batch split across `num_workers`.
/// Does not touch the parameters.
pub fn sharded_loss(
    model: &TwoTowerModel,
    teacher: &TwoTowerModel,
    image_batch: &Matrix,
    text_batch: &Matrix,
    num_workers: usize,
    options: LossOptions,
) -> Result<LossReport> {
    let n = image_batch.rows();
    if text_batch.rows() != n {
        return Err(Error::Shape(format!(
            "{n} image rows but {} text rows",
            text_batch.rows()
        )));
    }
    if num_workers == 0 || !n.is_multiple_of(num_workers) {
        return Err(Error::Shard(format!(
            "batch of {n} does not split evenly across {num_workers} workers"
        )));
    }
    let per = n / num_workers;
    let ranges: Vec<(usize, usize)> = (0..num_workers).map(|w| (w * per, (w + 1) * per)).collect();

    let forwards = ranges
        .par_iter()
        .map(|&(a, b)| {
            shard_forward(
                model,
                teacher,
                &image_batch.slice_rows(a, b),
                &text_batch.slice_rows(a, b),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let student_shards: Vec<(Matrix, Matrix)> = forwards
        .iter()
        .map(|f| (f.image.clone(), f.text.clone()))
        .collect();
    let teacher_shards: Vec<(Matrix, Matrix)> = forwards
        .iter()
        .map(|f| (f.teacher_image.clone(), f.teacher_text.clone()))
        .collect();
    let (zi, zt) = gather_embeddings(&student_shards)?;
    let (tzi, tzt) = gather_embeddings(&teacher_shards)?;
    let teacher_probs = losses::match_probabilities(&losses::similarity_logits(
        &tzi,
        &tzt,
        teacher.temperature(),
    )?);
    let loss = losses::embedding_loss(&zi, &zt, model.temperature(), Some(&teacher_probs), options)?;

    let shard_grads = forwards
        .par_iter()
        .zip(&ranges)
        .map(|(f, &(a, b))| {
            Ok(Gradients {
                image: model::tower_backward(
                    &model.image,
                    &f.image_cache,
                    &loss.grad_image.slice_rows(a, b),
                )?,
                text: model::tower_backward(
                    &model.text,
                    &f.text_cache,
                    &loss.grad_text.slice_rows(a, b),
                )?,
                log_temperature: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // ordered reduction keeps results independent of thread scheduling
    let mut iter = shard_grads.into_iter();
    let mut grads = iter.next().expect("at least one worker");
    for g in iter {
        grads.add_assign(&g)?;
    }
    grads.log_temperature = model
        .learnable_temperature()
        .then_some(loss.grad_log_temperature);

    Ok(LossReport {
        l_image: loss.l_image,
        l_text: loss.l_text,
        l_infonce: loss.l_infonce,
        l_kl: loss.l_kl,
        total: loss.total,
        alpha: options.alpha,
        grads,
    })
}

/// Mutable training state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: TwoTowerModel,
    pub teacher: EmaTeacher,
    pub sgd: SgdState,
    pub step: usize,
    pub epoch: usize,
}

impl TrainState {
    pub fn init(model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        let model = init_model(config.seed, model_config)?;
        let teacher = ema_init(&model, config.ema_decay)?;
        let sgd = SgdState::new(&model, config.momentum, config.weight_decay)?;
        Ok(Self {
            model,
            teacher,
            sgd,
            step: 0,
            epoch: 0,
        })
    }
}

/// One optimization step on an aligned global batch at learning rate `lr`.
pub fn train_step(
    state: &mut TrainState,
    image_batch: &Matrix,
    text_batch: &Matrix,
    config: &TrainConfig,
    lr: f64,
) -> Result<LossReport> {
    let report = sharded_loss(
        &state.model,
        state.teacher.params(),
        image_batch,
        text_batch,
        config.num_workers,
        config.loss_options(),
    )?;
    optim::sgd_step(&mut state.model, &report.grads, &mut state.sgd, lr)?;
    if config.ema_cadence == Cadence::Step {
        state.teacher.update(&state.model)?;
    }
    state.step += 1;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// `"step"` or `"epoch"`.
    pub kind: String,
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_image: f64,
    pub l_text: f64,
    pub l_infonce: f64,
    pub l_kl: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TwoTowerModel,
    pub teacher: EmaTeacher,
    pub sgd: SgdState,
    pub step: usize,
    pub epoch: usize,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, model_config: &ModelConfig, config: &TrainConfig) -> Self {
        Self {
            model: state.model.clone(),
            teacher: state.teacher.clone(),
            sgd: state.sgd.clone(),
            step: state.step,
            epoch: state.epoch,
            model_config: model_config.clone(),
            train_config: config.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

fn record(kind: &str, step: usize, epoch: usize, lr: f64, r: [f64; 5], wall: Option<f64>) -> MetricsRecord {
    MetricsRecord {
        kind: kind.into(),
        step,
        epoch,
        lr,
        l_image: r[0],
        l_text: r[1],
        l_infonce: r[2],
        l_kl: r[3],
        total: r[4],
        wall_time: wall,
    }
}

/// Trains from a fresh initialization for `config.epochs` epochs.
pub fn train(
    dataset: &SyntheticPairDataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut state = TrainState::init(model_config, config)?;
    let metrics = train_epochs(&mut state, dataset, model_config, config)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_state(&state, model_config, config),
        metrics,
    })
}

/// Runs epochs `state.epoch..config.epochs` on `state`.
pub fn train_epochs(
    state: &mut TrainState,
    dataset: &SyntheticPairDataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<Vec<MetricsRecord>> {
    config.validate(dataset.len())?;
    if dataset.image_dim() != model_config.image_dim || dataset.text_dim() != model_config.text_dim {
        return Err(Error::Shape(format!(
            "dataset features are {} (image) / {} (text) but model expects {} / {}",
            dataset.image_dim(),
            dataset.text_dim(),
            model_config.image_dim,
            model_config.text_dim
        )));
    }
    let steps_per_epoch = config.steps_per_epoch(dataset.len());
    let schedule = match config.schedule_unit {
        Cadence::Step => CosineSchedule::new(config.lr, (config.epochs * steps_per_epoch).max(1), config.eta_min)?,
        Cadence::Epoch => CosineSchedule::new(config.lr, config.epochs.max(1), config.eta_min)?,
    };
    let start = Instant::now();
    let wall = |on: bool| on.then(|| start.elapsed().as_secs_f64());
    let mut metrics = Vec::new();

    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let batches = data::permutation_batches(
            dataset.len(),
            config.global_batch(),
            data::epoch_seed(config.seed, epoch),
        )?;
        let mut sums = [0.0; 5];
        let mut lr = 0.0;
        for idx in &batches {
            lr = match config.schedule_unit {
                Cadence::Step => schedule.lr_at(state.step)?,
                Cadence::Epoch => schedule.lr_at(epoch)?,
            };
            let images = dataset.image_features.select_rows(idx);
            let texts = dataset.text_features.select_rows(idx);
            let r = train_step(state, &images, &texts, config, lr)?;
            let values = [r.l_image, r.l_text, r.l_infonce, r.l_kl, r.total];
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            if config.log_every_step {
                metrics.push(record("step", state.step, epoch, lr, values, wall(config.log_wall_time)));
            }
        }
        if config.ema_cadence == Cadence::Epoch {
            state.teacher.update(&state.model)?;
        }
        let count = batches.len() as f64;
        let means = sums.map(|s| s / count);
        metrics.push(record("epoch", state.step, epoch, lr, means, wall(config.log_wall_time)));
        state.epoch += 1;
    }
    Ok(metrics)
}

pub fn write_metrics(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub const CHECKPOINT_FORMAT: &str = "softpair-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    step: usize,
    epoch: usize,
    temperature: f64,
    teacher_temperature: f64,
    ema_decay: f64,
    momentum: f64,
    weight_decay: f64,
    log_temperature_buffer: f64,
    model_config: ModelConfig,
    train_config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

fn checkpoint_err(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Writes `manifest.json` and `tensors.bin` (EMB1 f64 records: student,
/// teacher, then momentum buffers) into `dir`.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = ckpt.model.tensor_names();
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let groups = [
        ("student", ckpt.model.tensors()),
        ("teacher", ckpt.teacher.params().tensors()),
        ("momentum", ckpt.sgd.buffers().iter().collect()),
    ];
    for (group, tensors) in groups {
        for (name, m) in names.iter().zip(tensors) {
            entries.push(TensorEntry {
                name: format!("{group}.{name}"),
                rows: m.rows(),
                cols: m.cols(),
            });
            blob.extend(tensor_io::encode(m, Dtype::F64));
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        step: ckpt.step,
        epoch: ckpt.epoch,
        temperature: ckpt.model.temperature(),
        teacher_temperature: ckpt.teacher.params().temperature(),
        ema_decay: ckpt.teacher.decay(),
        momentum: ckpt.sgd.momentum(),
        weight_decay: ckpt.sgd.weight_decay(),
        log_temperature_buffer: ckpt.sgd.log_temperature_buffer(),
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        tensors: entries,
    };
    let path = dir.join("tensors.bin");
    fs::write(&path, blob).map_err(|e| Error::io(path, e))?;
    write_json(&dir.join("manifest.json"), &manifest)
}

fn rebuild_towers(
    tensors: &mut std::vec::IntoIter<Matrix>,
    config: &ModelConfig,
    temperature: f64,
    group: &str,
) -> Result<TwoTowerModel> {
    let depth = config.hidden.len() + 1;
    let mut take_tower = |activation: Activation| -> Result<TowerParams> {
        let layers = (0..depth)
            .map(|_| {
                let weight = tensors.next().ok_or_else(|| checkpoint_err(group, "missing tensor"))?;
                let bias = tensors.next().ok_or_else(|| checkpoint_err(group, "missing tensor"))?;
                Ok(Layer { weight, bias })
            })
            .collect::<Result<Vec<_>>>()?;
        TowerParams::new(layers, activation).map_err(|e| checkpoint_err(group, e.to_string()))
    };
    let image = take_tower(config.activation)?;
    let text = take_tower(config.activation)?;
    TwoTowerModel::new(image, text, temperature, config.learnable_temperature)
        .map_err(|e| checkpoint_err(group, e.to_string()))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let raw: serde_json::Value = read_json(&manifest_path)?;
    match raw.get("format").and_then(|v| v.as_str()) {
        Some(CHECKPOINT_FORMAT) => {}
        other => {
            return Err(checkpoint_err(
                "format",
                format!("expected \"{CHECKPOINT_FORMAT}\", found {other:?}"),
            ))
        }
    }
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| checkpoint_err("version", "missing or not an integer"))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::UnsupportedVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: CHECKPOINT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| Error::json(&manifest_path, e))?;

    let blob_path = dir.join("tensors.bin");
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let (m, dtype, used) = tensor_io::decode_prefix(&blob[offset..])
            .map_err(|e| checkpoint_err(&entry.name, e.to_string()))?;
        if dtype != Dtype::F64 {
            return Err(checkpoint_err(&entry.name, "expected f64 payload"));
        }
        if m.shape() != (entry.rows, entry.cols) {
            return Err(checkpoint_err(
                &entry.name,
                format!("shape {:?} but manifest says {}x{}", m.shape(), entry.rows, entry.cols),
            ));
        }
        tensors.push(m);
        offset += used;
    }
    if offset != blob.len() {
        return Err(checkpoint_err(
            "tensors.bin",
            format!("{} trailing bytes", blob.len() - offset),
        ));
    }
    let per_group = 4 * (manifest.model_config.hidden.len() + 1);
    if tensors.len() != 3 * per_group {
        return Err(checkpoint_err(
            "tensors",
            format!("expected {} tensors, found {}", 3 * per_group, tensors.len()),
        ));
    }
    let momentum: Vec<Matrix> = tensors.split_off(2 * per_group);
    let mut iter = tensors.into_iter();
    let model = rebuild_towers(&mut iter, &manifest.model_config, manifest.temperature, "student")?;
    let teacher_params = rebuild_towers(
        &mut iter,
        &manifest.model_config,
        manifest.teacher_temperature,
        "teacher",
    )?;
    let teacher = EmaTeacher::from_parts(teacher_params, manifest.ema_decay)
        .map_err(|e| checkpoint_err("ema_decay", e.to_string()))?;
    if !model.same_shape(teacher.params()) {
        return Err(checkpoint_err("teacher", "shape differs from student"));
    }
    for (i, (b, p)) in momentum.iter().zip(model.tensors()).enumerate() {
        if b.shape() != p.shape() {
            return Err(checkpoint_err(format!("momentum[{i}]"), "shape differs from parameter"));
        }
    }
    Ok(Checkpoint {
        model,
        teacher,
        sgd: SgdState::from_parts(
            momentum,
            manifest.log_temperature_buffer,
            manifest.momentum,
            manifest.weight_decay,
        ),
        step: manifest.step,
        epoch: manifest.epoch,
        model_config: manifest.model_config,
        train_config: manifest.train_config,
    })
}
