//! Synthetic noisy image–caption pairs and the on-disk dataset layout.
//!
//! Each concept has an image prototype and a text prototype. An image row is
//! the sum of its concepts' image prototypes plus Gaussian noise; its caption
//! row sums the text prototypes of the concepts it mentions. Captions miss
//! depicted concepts (`caption_coverage < 1`) and mention absent ones
//! (`distractor_rate > 0`), so pairings are many-to-many and noisy.
//!
//! A dataset directory holds `images.emb`, `texts.emb` (EMB1, f32) and
//! `meta.json` with concept sets, names and the generating config. A label
//! directory holds `labels.emb` and `labels.json`.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::seed::{derive_seed, rng_for};
use crate::tensor_io::{self, Dtype};

pub const DATASET_FORMAT: &str = "softpair-dataset";
pub const LABELS_FORMAT: &str = "softpair-labels";
pub const META_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Inclusive `[min, max]` number of concepts depicted per image.
    pub concepts_per_image: [usize; 2],
    /// Probability that a depicted concept is mentioned in the caption.
    pub caption_coverage: f64,
    /// Probability that the caption mentions one concept absent from the image.
    pub distractor_rate: f64,
    pub feature_noise_sigma: f64,
}

impl NoiseConfig {
    pub fn clean() -> Self {
        Self {
            concepts_per_image: [1, 1],
            caption_coverage: 1.0,
            distractor_rate: 0.0,
            feature_noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.concepts_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::Generation(format!(
                "concepts_per_image must satisfy 1 <= min <= max, got [{lo}, {hi}]"
            )));
        }
        for (name, p) in [
            ("caption_coverage", self.caption_coverage),
            ("distractor_rate", self.distractor_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Generation(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return Err(Error::Generation(format!(
                "feature_noise_sigma must be >= 0, got {}",
                self.feature_noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVocabulary {
    pub names: Vec<String>,
    /// `C × D_img`, unit rows.
    pub image_protos: Matrix,
    /// `C × D_txt`, unit rows.
    pub text_protos: Matrix,
    pub seed: u64,
}

impl ConceptVocabulary {
    /// Random prototypes. With `latent_dim = None` every prototype entry is
    /// i.i.d. standard normal before scaling to unit norm. With
    /// `Some(k)` each concept gets a k-dim latent vector and both prototypes are
    /// fixed random linear images of it, so the image↔text relation is shared
    /// across concepts and can transfer to unseen ones.
    pub fn generate(
        vocab_size: usize,
        image_dim: usize,
        text_dim: usize,
        latent_dim: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Generation(format!(
                "vocab_size must be >= 2, got {vocab_size}"
            )));
        }
        if image_dim == 0 || text_dim == 0 || latent_dim == Some(0) {
            return Err(Error::Generation("dims must be positive".into()));
        }
        let mut rng = rng_for(seed, "data/prototypes");
        let (image_raw, text_raw) = match latent_dim {
            None => (
                gaussian(&mut rng, vocab_size, image_dim),
                gaussian(&mut rng, vocab_size, text_dim),
            ),
            Some(k) => {
                let latent = gaussian(&mut rng, vocab_size, k);
                let to_image = gaussian(&mut rng, k, image_dim);
                let to_text = gaussian(&mut rng, k, text_dim);
                (
                    math::matmul(&latent, &to_image)?,
                    math::matmul(&latent, &to_text)?,
                )
            }
        };
        Ok(Self {
            names: (0..vocab_size).map(|i| format!("concept_{i:03}")).collect(),
            image_protos: math::l2_normalize_rows(&image_raw, 1e-12)
                .map_err(|e| Error::Generation(e.to_string()))?,
            text_protos: math::l2_normalize_rows(&text_raw, 1e-12)
                .map_err(|e| Error::Generation(e.to_string()))?,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn image_dim(&self) -> usize {
        self.image_protos.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.text_protos.cols()
    }

    /// Text prototypes of every concept, as label features for zero-shot evaluation.
    pub fn label_features(&self) -> LabelFeatures {
        LabelFeatures {
            names: self.names.clone(),
            features: self.text_protos.clone(),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut *rng))
        .collect();
    Matrix::from_raw(rows, cols, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPairDataset {
    pub image_features: Matrix,
    pub text_features: Matrix,
    /// Sorted concept ids depicted in each image.
    pub image_concepts: Vec<Vec<usize>>,
    /// Sorted concept ids mentioned in each caption.
    pub text_concepts: Vec<Vec<usize>>,
    pub concept_names: Vec<String>,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl SyntheticPairDataset {
    pub fn len(&self) -> usize {
        self.image_features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_dim(&self) -> usize {
        self.image_features.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.text_features.cols()
    }

    fn validate(&self) -> Result<()> {
        let n = self.image_features.rows();
        if self.text_features.rows() != n
            || self.image_concepts.len() != n
            || self.text_concepts.len() != n
        {
            return Err(Error::Format(format!(
                "row counts disagree: images {n}, texts {}, image concept sets {}, text concept sets {}",
                self.text_features.rows(),
                self.image_concepts.len(),
                self.text_concepts.len()
            )));
        }
        let c = self.concept_names.len();
        for (kind, sets) in [("image", &self.image_concepts), ("text", &self.text_concepts)] {
            for (r, s) in sets.iter().enumerate() {
                if s.is_empty() {
                    return Err(Error::Format(format!("{kind} row {r} has no concepts")));
                }
                if let Some(&bad) = s.iter().find(|&&id| id >= c) {
                    return Err(Error::Format(format!(
                        "{kind} row {r} references concept {bad} but only {c} exist"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draws `dataset_size` pairs whose concepts all come from `allowed`.
pub fn generate_pairs(
    vocab: &ConceptVocabulary,
    allowed: &[usize],
    dataset_size: usize,
    noise: &NoiseConfig,
    seed: u64,
    tag: &str,
) -> Result<SyntheticPairDataset> {
    noise.validate()?;
    if dataset_size == 0 {
        return Err(Error::Generation("dataset_size must be >= 1".into()));
    }
    let [lo, hi] = noise.concepts_per_image;
    if allowed.len() < hi + usize::from(noise.distractor_rate > 0.0) {
        return Err(Error::Generation(format!(
            "{} allowed concepts cannot supply {hi} per image plus distractors",
            allowed.len()
        )));
    }
    if let Some(&bad) = allowed.iter().find(|&&c| c >= vocab.len()) {
        return Err(Error::Generation(format!("concept {bad} not in vocabulary")));
    }
    let mut rng = rng_for(seed, tag);
    let (di, dt) = (vocab.image_dim(), vocab.text_dim());
    let mut image = Vec::with_capacity(dataset_size * di);
    let mut text = Vec::with_capacity(dataset_size * dt);
    let mut image_concepts = Vec::with_capacity(dataset_size);
    let mut text_concepts = Vec::with_capacity(dataset_size);

    for _ in 0..dataset_size {
        let k = rng.random_range(lo..=hi);
        let mut depicted: Vec<usize> = allowed.choose_multiple(&mut rng, k).copied().collect();
        depicted.sort_unstable();

        let mut mentioned: Vec<usize> = depicted
            .iter()
            .copied()
            .filter(|_| rng.random_bool(noise.caption_coverage))
            .collect();
        if rng.random_bool(noise.distractor_rate) {
            let absent: Vec<usize> = allowed
                .iter()
                .copied()
                .filter(|c| !depicted.contains(c))
                .collect();
            mentioned.push(*absent.choose(&mut rng).expect("checked above"));
        }
        if mentioned.is_empty() {
            // a caption always says something; fall back to one depicted concept
            mentioned.push(*depicted.choose(&mut rng).expect("k >= 1"));
        }
        mentioned.sort_unstable();

        image.extend(sum_rows(&vocab.image_protos, &depicted, noise.feature_noise_sigma, &mut rng));
        text.extend(sum_rows(&vocab.text_protos, &mentioned, noise.feature_noise_sigma, &mut rng));
        image_concepts.push(depicted);
        text_concepts.push(mentioned);
    }

    Ok(SyntheticPairDataset {
        image_features: Matrix::new(dataset_size, di, image)?,
        text_features: Matrix::new(dataset_size, dt, text)?,
        image_concepts,
        text_concepts,
        concept_names: vocab.names.clone(),
        noise: *noise,
        seed,
    })
}

fn sum_rows(protos: &Matrix, ids: &[usize], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; protos.cols()];
    for &id in ids {
        for (o, p) in out.iter_mut().zip(protos.row(id)) {
            *o += p;
        }
    }
    if sigma > 0.0 {
        for o in &mut out {
            let e: f64 = StandardNormal.sample(&mut *rng);
            *o += sigma * e;
        }
    }
    out
}

/// Generates a dataset over the full vocabulary.
pub fn generate(
    vocab_size: usize,
    dataset_size: usize,
    image_dim: usize,
    text_dim: usize,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<SyntheticPairDataset> {
    let vocab = ConceptVocabulary::generate(vocab_size, image_dim, text_dim, None, seed)?;
    let all: Vec<usize> = (0..vocab_size).collect();
    generate_pairs(&vocab, &all, dataset_size, noise, seed, "data/train")
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub vocab_size: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    /// Shared latent dimension for structured prototypes; absent means i.i.d. prototypes.
    #[serde(default)]
    pub latent_dim: Option<usize>,
    /// Fraction of concepts excluded from training pairs.
    #[serde(default)]
    pub held_out_fraction: f64,
    pub noise: NoiseConfig,
    /// Noise for evaluation images; defaults to the training noise.
    #[serde(default)]
    pub eval_noise: Option<NoiseConfig>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return Err(Error::Generation(format!(
                "held_out_fraction must be in [0, 1), got {}",
                self.held_out_fraction
            )));
        }
        if self.train_size == 0 {
            return Err(Error::Generation("train_size must be >= 1".into()));
        }
        self.noise.validate()?;
        if let Some(n) = &self.eval_noise {
            n.validate()?;
        }
        Ok(())
    }
}

/// A full synthetic experiment: vocabulary, training pairs, and evaluation sets
/// over seen (held-in) and unseen (held-out) concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub vocab: ConceptVocabulary,
    pub held_out: Vec<usize>,
    pub train: SyntheticPairDataset,
    pub eval_held_in: SyntheticPairDataset,
    pub eval_held_out: Option<SyntheticPairDataset>,
}

pub fn generate_split(config: &DataConfig, seed: u64) -> Result<SyntheticSplit> {
    config.validate()?;
    let vocab = ConceptVocabulary::generate(
        config.vocab_size,
        config.image_dim,
        config.text_dim,
        config.latent_dim,
        seed,
    )?;
    let n_out = (config.held_out_fraction * config.vocab_size as f64).round() as usize;
    let mut order: Vec<usize> = (0..config.vocab_size).collect();
    order.shuffle(&mut rng_for(seed, "data/held_out"));
    let mut held_out = order[..n_out].to_vec();
    held_out.sort_unstable();
    let seen: Vec<usize> = (0..config.vocab_size)
        .filter(|c| !held_out.contains(c))
        .collect();

    let eval_noise = config.eval_noise.unwrap_or(config.noise);
    let train = generate_pairs(&vocab, &seen, config.train_size, &config.noise, seed, "data/train")?;
    let eval_held_in = generate_pairs(
        &vocab,
        &seen,
        config.eval_size.max(1),
        &eval_noise,
        seed,
        "data/eval_held_in",
    )?;
    let eval_held_out = if held_out.is_empty() {
        None
    } else {
        // held-out images depict only unseen concepts; cap the count per image to what exists
        let mut noise = eval_noise;
        noise.concepts_per_image[1] = noise.concepts_per_image[1].min(held_out.len());
        noise.concepts_per_image[0] = noise.concepts_per_image[0].min(noise.concepts_per_image[1]);
        if held_out.len() < 2 {
            noise.distractor_rate = 0.0;
        }
        Some(generate_pairs(
            &vocab,
            &held_out,
            config.eval_size.max(1),
            &noise,
            seed,
            "data/eval_held_out",
        )?)
    };
    Ok(SyntheticSplit {
        vocab,
        held_out,
        train,
        eval_held_in,
        eval_held_out,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    format: String,
    version: u32,
    rows: usize,
    image_dim: usize,
    text_dim: usize,
    concept_names: Vec<String>,
    image_concepts: Vec<Vec<usize>>,
    text_concepts: Vec<Vec<usize>>,
    noise: NoiseConfig,
    seed: u64,
}

pub fn save_dataset(ds: &SyntheticPairDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tensor_io::save(dir.join("images.emb"), &ds.image_features, Dtype::F32)?;
    tensor_io::save(dir.join("texts.emb"), &ds.text_features, Dtype::F32)?;
    let meta = DatasetMeta {
        format: DATASET_FORMAT.into(),
        version: META_VERSION,
        rows: ds.len(),
        image_dim: ds.image_dim(),
        text_dim: ds.text_dim(),
        concept_names: ds.concept_names.clone(),
        image_concepts: ds.image_concepts.clone(),
        text_concepts: ds.text_concepts.clone(),
        noise: ds.noise,
        seed: ds.seed,
    };
    write_json(&dir.join("meta.json"), &meta)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<SyntheticPairDataset> {
    let dir = dir.as_ref();
    let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
    if meta.format != DATASET_FORMAT {
        return Err(Error::Format(format!(
            "{}: expected format \"{DATASET_FORMAT}\", found \"{}\"",
            dir.display(),
            meta.format
        )));
    }
    if meta.version != META_VERSION {
        return Err(Error::UnsupportedVersion {
            found: meta.version,
            expected: META_VERSION,
        });
    }
    let image_features = tensor_io::load(dir.join("images.emb"))?;
    let text_features = tensor_io::load(dir.join("texts.emb"))?;
    if image_features.shape() != (meta.rows, meta.image_dim)
        || text_features.shape() != (meta.rows, meta.text_dim)
    {
        return Err(Error::Truncated(format!(
            "{}: meta declares {} rows ({} / {} dims) but tensors are {:?} and {:?}",
            dir.display(),
            meta.rows,
            meta.image_dim,
            meta.text_dim,
            image_features.shape(),
            text_features.shape()
        )));
    }
    let ds = SyntheticPairDataset {
        image_features,
        text_features,
        image_concepts: meta.image_concepts,
        text_concepts: meta.text_concepts,
        concept_names: meta.concept_names,
        noise: meta.noise,
        seed: meta.seed,
    };
    ds.validate()?;
    Ok(ds)
}

/// Named label feature rows (`C × D_txt`) for building a label index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFeatures {
    pub names: Vec<String>,
    pub features: Matrix,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelsMeta {
    format: String,
    version: u32,
    labels: Vec<String>,
    /// Prompted text for each label, informational.
    #[serde(default)]
    prompts: Vec<String>,
}

pub fn save_labels(labels: &LabelFeatures, prompts: &[String], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tensor_io::save(dir.join("labels.emb"), &labels.features, Dtype::F32)?;
    let meta = LabelsMeta {
        format: LABELS_FORMAT.into(),
        version: META_VERSION,
        labels: labels.names.clone(),
        prompts: prompts.to_vec(),
    };
    write_json(&dir.join("labels.json"), &meta)
}

pub fn load_labels(dir: impl AsRef<Path>) -> Result<LabelFeatures> {
    let dir = dir.as_ref();
    let meta: LabelsMeta = read_json(&dir.join("labels.json"))?;
    if meta.format != LABELS_FORMAT {
        return Err(Error::Format(format!(
            "{}: expected format \"{LABELS_FORMAT}\", found \"{}\"",
            dir.display(),
            meta.format
        )));
    }
    if meta.version != META_VERSION {
        return Err(Error::UnsupportedVersion {
            found: meta.version,
            expected: META_VERSION,
        });
    }
    let features = tensor_io::load(dir.join("labels.emb"))?;
    if features.rows() != meta.labels.len() {
        return Err(Error::Truncated(format!(
            "{}: {} label names but {} feature rows",
            dir.display(),
            meta.labels.len(),
            features.rows()
        )));
    }
    Ok(LabelFeatures {
        names: meta.labels,
        features,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Seeded permutation of `0..len` cut into full batches; the ragged tail is dropped.
pub fn permutation_batches(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > len {
        return Err(Error::Input(format!(
            "batch size {batch_size} must be in [1, {len}]"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_for(epoch_seed, "batches"));
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

pub fn epoch_batches(
    ds: &SyntheticPairDataset,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<(Matrix, Matrix)>> {
    Ok(permutation_batches(ds.len(), batch_size, epoch_seed)?
        .iter()
        .map(|idx| {
            (
                ds.image_features.select_rows(idx),
                ds.text_features.select_rows(idx),
            )
        })
        .collect())
}

/// Seed for epoch `epoch` of a run with root seed `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, &format!("epoch/{epoch}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(cov: f64, dis: f64, sigma: f64) -> NoiseConfig {
        NoiseConfig {
            concepts_per_image: [1, 3],
            caption_coverage: cov,
            distractor_rate: dis,
            feature_noise_sigma: sigma,
        }
    }

    #[test]
    fn vocabulary_invariants() {
        let v = ConceptVocabulary::generate(10, 8, 6, None, 1).unwrap();
        for m in [&v.image_protos, &v.text_protos] {
            for row in m.row_iter() {
                let n = math::norm(row);
                assert!((0.5..=2.0).contains(&n));
            }
        }
        let mut names = v.names.clone();
        names.dedup();
        assert_eq!(names.len(), 10);
        assert!(ConceptVocabulary::generate(1, 8, 6, None, 1).is_err());
        let latent = ConceptVocabulary::generate(10, 8, 6, Some(4), 1).unwrap();
        assert_eq!(latent.image_protos.shape(), (10, 8));
    }

    #[test]
    fn noise_free_captions_match_images() {
        let ds = generate(16, 200, 8, 8, &noise(1.0, 0.0, 0.0), 3).unwrap();
        assert_eq!(ds.image_concepts, ds.text_concepts);
    }

    #[test]
    fn forced_distractors() {
        let ds = generate(16, 200, 8, 8, &noise(0.5, 1.0, 0.1), 3).unwrap();
        for (img, txt) in ds.image_concepts.iter().zip(&ds.text_concepts) {
            assert!(txt.iter().any(|c| !img.contains(c)));
        }
    }

    #[test]
    fn every_row_has_concepts() {
        let ds = generate(16, 500, 8, 8, &noise(0.0, 0.0, 0.1), 9).unwrap();
        assert!(ds.image_concepts.iter().all(|s| !s.is_empty()));
        assert!(ds.text_concepts.iter().all(|s| !s.is_empty()));
        assert!(ds.validate().is_ok());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(16, 50, 8, 4, &noise(0.7, 0.3, 0.2), 5).unwrap();
        let b = generate(16, 50, 8, 4, &noise(0.7, 0.3, 0.2), 5).unwrap();
        let c = generate(16, 50, 8, 4, &noise(0.7, 0.3, 0.2), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(matches!(generate(1, 10, 4, 4, &noise(1.0, 0.0, 0.0), 0), Err(Error::Generation(_))));
        assert!(matches!(generate(8, 0, 4, 4, &noise(1.0, 0.0, 0.0), 0), Err(Error::Generation(_))));
        assert!(matches!(generate(8, 10, 4, 4, &noise(1.5, 0.0, 0.0), 0), Err(Error::Generation(_))));
        assert!(matches!(generate(8, 10, 4, 4, &noise(1.0, 0.0, -1.0), 0), Err(Error::Generation(_))));
        let mut bad = noise(1.0, 0.0, 0.0);
        bad.concepts_per_image = [0, 2];
        assert!(matches!(generate(8, 10, 4, 4, &bad, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(12, 40, 6, 5, &noise(0.6, 0.3, 0.1), 2).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.image_features, tensor_io::quantize_f32(&ds.image_features));
        assert_eq!(back.text_features, tensor_io::quantize_f32(&ds.text_features));
        assert_eq!(back.image_concepts, ds.image_concepts);
        assert_eq!(back.text_concepts, ds.text_concepts);
        assert_eq!(back.noise, ds.noise);

        // the stored 32-bit payload is a fixed point of load∘save
        let first = fs::read(dir.path().join("images.emb")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&back, dir2.path()).unwrap();
        assert_eq!(first, fs::read(dir2.path().join("images.emb")).unwrap());
        assert_eq!(
            fs::read(dir.path().join("meta.json")).unwrap(),
            fs::read(dir2.path().join("meta.json")).unwrap()
        );
    }

    #[test]
    fn dataset_load_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(12, 40, 6, 5, &noise(1.0, 0.0, 0.0), 2).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("images.emb");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("EMB1")), "{err}");

        save_dataset(&ds, dir.path()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[7..15].copy_from_slice(&41u64.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Truncated(_))));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = ConceptVocabulary::generate(5, 4, 3, None, 0).unwrap();
        let labels = v.label_features();
        save_labels(&labels, &[], dir.path()).unwrap();
        let back = load_labels(dir.path()).unwrap();
        assert_eq!(back.names, labels.names);
        assert_eq!(back.features, tensor_io::quantize_f32(&labels.features));
    }

    #[test]
    fn batches_examples() {
        let b = permutation_batches(10, 10, 1).unwrap();
        assert_eq!(b.len(), 1);
        let mut all = b[0].clone();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let a = permutation_batches(32, 4, 1).unwrap();
        let c = permutation_batches(32, 4, 2).unwrap();
        assert_ne!(a, c);

        // chunking keeps the first ⌊M/B⌋·B elements of the permutation
        let b = permutation_batches(23, 5, 7).unwrap();
        assert_eq!(b.len(), 4);
        let full = permutation_batches(23, 23, 7).unwrap();
        let flat: Vec<usize> = b.concat();
        assert_eq!(flat, full[0][..20]);

        assert!(permutation_batches(5, 6, 0).is_err());
        assert!(permutation_batches(5, 0, 0).is_err());
    }

    #[test]
    fn epoch_batches_align_rows() {
        let ds = generate(8, 20, 4, 3, &noise(1.0, 0.0, 0.0), 1).unwrap();
        let idx = permutation_batches(20, 6, 3).unwrap();
        let batches = epoch_batches(&ds, 6, 3).unwrap();
        assert_eq!(batches.len(), 3);
        for (b, ids) in batches.iter().zip(&idx) {
            for (r, &i) in ids.iter().enumerate() {
                assert_eq!(b.0.row(r), ds.image_features.row(i));
                assert_eq!(b.1.row(r), ds.text_features.row(i));
            }
        }
    }

    #[test]
    fn split_holds_out_concepts() {
        let cfg = DataConfig {
            vocab_size: 20,
            train_size: 300,
            eval_size: 50,
            image_dim: 8,
            text_dim: 8,
            latent_dim: Some(6),
            held_out_fraction: 0.2,
            noise: noise(0.6, 0.3, 0.1),
            eval_noise: None,
        };
        let s = generate_split(&cfg, 4).unwrap();
        assert_eq!(s.held_out.len(), 4);
        for sets in [&s.train.image_concepts, &s.train.text_concepts, &s.eval_held_in.image_concepts] {
            assert!(sets.iter().flatten().all(|c| !s.held_out.contains(c)));
        }
        let out = s.eval_held_out.unwrap();
        assert!(out.image_concepts.iter().flatten().all(|c| s.held_out.contains(c)));
    }

    #[test]
    fn noise_free_rows_are_prototype_sums() {
        let v = ConceptVocabulary::generate(16, 8, 6, None, 11).unwrap();
        let all: Vec<usize> = (0..16).collect();
        let n = NoiseConfig {
            concepts_per_image: [1, 3],
            ..NoiseConfig::clean()
        };
        let ds = generate_pairs(&v, &all, 64, &n, 11, "sanity").unwrap();
        for r in 0..ds.len() {
            let mut img = [0.0; 8];
            for &c in &ds.image_concepts[r] {
                for (a, b) in img.iter_mut().zip(v.image_protos.row(c)) {
                    *a += b;
                }
            }
            let mut txt = [0.0; 6];
            for &c in &ds.text_concepts[r] {
                for (a, b) in txt.iter_mut().zip(v.text_protos.row(c)) {
                    *a += b;
                }
            }
            for (a, b) in img.iter().zip(ds.image_features.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in txt.iter().zip(ds.text_features.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
