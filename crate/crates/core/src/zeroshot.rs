//! Zero-shot evaluation: prompt templating, a cosine label index, and flat hit@k.

use std::collections::BTreeMap;

use serde::{Serialize, Serializer};

use crate::data::LabelFeatures;
use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::model::{self, TowerParams, TwoTowerModel};

pub const PLACEHOLDER: &str = "{label}";
pub const DEFAULT_TEMPLATE: &str = "a photo of {label}";
pub const DEFAULT_KS: [usize; 4] = [1, 2, 5, 10];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pattern: String,
}

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        let count = pattern.matches(PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::Input(format!(
                "template {pattern:?} must contain {PLACEHOLDER} exactly once, found {count}"
            )));
        }
        Ok(Self { pattern })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn apply(&self, label: &str) -> Result<String> {
        if label.is_empty() {
            return Err(Error::Input("empty label".into()));
        }
        Ok(self.pattern.replacen(PLACEHOLDER, label, 1))
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            pattern: DEFAULT_TEMPLATE.into(),
        }
    }
}

pub fn apply_prompt(template: &PromptTemplate, label: &str) -> Result<String> {
    template.apply(label)
}

/// Label names with unit-norm embeddings; row `i` belongs to label `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelIndex {
    labels: Vec<String>,
    embeddings: Matrix,
}

impl LabelIndex {
    /// Wraps precomputed embeddings, normalizing rows.
    pub fn new(labels: Vec<String>, embeddings: &Matrix) -> Result<Self> {
        if labels.len() != embeddings.rows() {
            return Err(Error::Index(format!(
                "{} labels but {} embedding rows",
                labels.len(),
                embeddings.rows()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::Index(format!("duplicate label {dup:?}")));
        }
        Ok(Self {
            labels,
            embeddings: math::l2_normalize_rows(embeddings, math::NORM_EPS)?,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Embeds label features with the text tower.
pub fn build_label_index(
    label_features: &Matrix,
    labels: &[String],
    text_tower: &TowerParams,
) -> Result<LabelIndex> {
    if !label_features.is_finite() {
        return Err(Error::Index("label features must be finite".into()));
    }
    if labels.len() != label_features.rows() {
        return Err(Error::Index(format!(
            "{} labels but {} feature rows",
            labels.len(),
            label_features.rows()
        )));
    }
    let (embeddings, _) = model::forward(text_tower, label_features)?;
    LabelIndex::new(labels.to_vec(), &embeddings)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Row of the label in the index.
    pub label: usize,
    pub similarity: f64,
}

/// The `k` most similar labels, descending; ties go to the lower label index.
pub fn knn_predict(index: &LabelIndex, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 || k > index.len() {
        return Err(Error::Query(format!(
            "k = {k} outside [1, {}] (number of labels)",
            index.len()
        )));
    }
    if query.len() != index.embeddings.cols() {
        return Err(Error::Query(format!(
            "query has dimension {}, index has {}",
            query.len(),
            index.embeddings.cols()
        )));
    }
    let mut all: Vec<Neighbor> = index
        .embeddings
        .row_iter()
        .enumerate()
        .map(|(label, row)| Neighbor {
            label,
            similarity: math::dot(row, query),
        })
        .collect();
    all.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.label.cmp(&b.label))
    });
    all.truncate(k);
    Ok(all)
}

/// Fraction of rows whose top-`k` predictions intersect the truth set.
pub fn flat_hit_at_k(predictions: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::Metric(format!(
            "{} prediction lists but {} truth sets",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Metric("no rows to score".into()));
    }
    let mut hits = 0usize;
    for (i, (pred, labels)) in predictions.iter().zip(truth).enumerate() {
        if labels.is_empty() {
            return Err(Error::Metric(format!("row {i} has an empty truth set")));
        }
        if pred.len() < k {
            return Err(Error::Metric(format!(
                "row {i} has {} predictions, need {k}",
                pred.len()
            )));
        }
        if pred[..k].iter().any(|p| labels.contains(p)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}

/// Expected flat hit@k when `k` labels are drawn uniformly without replacement.
pub fn random_hit_rate(truth: &[Vec<usize>], num_labels: usize, k: usize) -> f64 {
    let c = num_labels as f64;
    let total: f64 = truth
        .iter()
        .map(|labels| {
            let m = labels.len() as f64;
            let miss: f64 = (0..k).map(|j| ((c - m - j as f64) / (c - j as f64)).max(0.0)).product();
            1.0 - miss
        })
        .sum();
    total / truth.len() as f64
}

fn keyed<S: Serializer>(map: &BTreeMap<usize, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_map(map.iter().map(|(k, v)| (k.to_string(), v)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    /// k → flat hit@k.
    #[serde(rename = "fh", serialize_with = "keyed")]
    pub hit_rates: BTreeMap<usize, f64>,
    pub n: usize,
    /// k → expected flat hit@k of uniform random guessing.
    #[serde(serialize_with = "keyed")]
    pub baseline: BTreeMap<usize, f64>,
    pub num_labels: usize,
    #[serde(skip)]
    pub predictions: Vec<Vec<usize>>,
    #[serde(skip)]
    pub truth: Vec<Vec<usize>>,
}

impl EvalResult {
    pub fn hit_at(&self, k: usize) -> Option<f64> {
        self.hit_rates.get(&k).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("EvalResult serializes")
    }
}

/// Embeds `images` with the model's image tower, retrieves labels from an index
/// built with its text tower, and scores flat hit@k for each `k` in `ks`.
pub fn evaluate(
    model: &TwoTowerModel,
    images: &Matrix,
    truth: &[Vec<usize>],
    labels: &LabelFeatures,
    ks: &[usize],
) -> Result<EvalResult> {
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Query(format!("ks must be non-empty and strictly ascending, got {ks:?}")));
    }
    let index = build_label_index(&labels.features, &labels.names, &model.text)?;
    let k_max = *ks.last().unwrap();
    if ks[0] == 0 || k_max > index.len() {
        return Err(Error::Query(format!(
            "k values {ks:?} must lie in [1, {}] (number of labels)",
            index.len()
        )));
    }
    if images.rows() != truth.len() {
        return Err(Error::Shape(format!(
            "{} images but {} truth sets",
            images.rows(),
            truth.len()
        )));
    }
    let (embeddings, _) = model::forward(&model.image, images)?;
    let predictions = embeddings
        .row_iter()
        .map(|q| {
            knn_predict(&index, q, k_max).map(|ns| ns.into_iter().map(|n| n.label).collect())
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    let mut hit_rates = BTreeMap::new();
    let mut baseline = BTreeMap::new();
    for &k in ks {
        hit_rates.insert(k, flat_hit_at_k(&predictions, truth, k)?);
        baseline.insert(k, random_hit_rate(truth, index.len(), k));
    }
    Ok(EvalResult {
        hit_rates,
        n: truth.len(),
        baseline,
        num_labels: index.len(),
        predictions,
        truth: truth.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn prompt_examples() {
        let t = PromptTemplate::default();
        assert_eq!(t.apply("crane (machine)").unwrap(), "a photo of crane (machine)");
        let id = PromptTemplate::new("{label}").unwrap();
        assert_eq!(apply_prompt(&id, "dog").unwrap(), "dog");
        assert!(PromptTemplate::new("a photo").is_err());
        assert!(PromptTemplate::new("{label} and {label}").is_err());
        assert!(matches!(t.apply(""), Err(Error::Input(_))));
    }

    #[test]
    fn index_rejects_duplicates() {
        let m = Matrix::identity(2);
        assert!(matches!(
            LabelIndex::new(vec!["a".into(), "a".into()], &m),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn built_index_is_unit_and_deterministic() {
        let model = init_model(3, &ModelConfig::new(4, 5, vec![6], 3)).unwrap();
        let feats = Matrix::new(4, 5, (0..20).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let names: Vec<String> = (0..4).map(|i| format!("l{i}")).collect();
        let a = build_label_index(&feats, &names, &model.text).unwrap();
        let b = build_label_index(&feats, &names, &model.text).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.embeddings().shape(), (4, 3));
        for row in a.embeddings().row_iter() {
            assert!((math::norm(row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_features_tie_to_lower_index() {
        let model = init_model(3, &ModelConfig::new(4, 2, vec![], 3)).unwrap();
        let feats = Matrix::from_rows(&[vec![1.0, 0.5], vec![1.0, 0.5], vec![-1.0, 0.2]]).unwrap();
        let names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let idx = build_label_index(&feats, &names, &model.text).unwrap();
        assert_eq!(idx.embeddings().row(0), idx.embeddings().row(1));
        let q = idx.embeddings().row(1).to_vec();
        let top = knn_predict(&idx, &q, 2).unwrap();
        assert_eq!(top[0].label, 0);
        assert_eq!(top[1].label, 1);
    }

    #[test]
    fn knn_examples() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]).unwrap();
        let idx = LabelIndex::new(vec!["a".into(), "b".into(), "c".into()], &m).unwrap();
        let top = knn_predict(&idx, &[0.0, 1.0], 1).unwrap();
        assert_eq!(top[0].label, 1);
        assert_eq!(top[0].similarity, 1.0);
        let all = knn_predict(&idx, &[0.0, 1.0], 3).unwrap();
        let mut labels: Vec<usize> = all.iter().map(|n| n.label).collect();
        assert_eq!(labels, vec![1, 2, 0]);
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2]);
        assert!(matches!(knn_predict(&idx, &[0.0, 1.0], 0), Err(Error::Query(_))));
        assert!(matches!(knn_predict(&idx, &[0.0, 1.0], 4), Err(Error::Query(_))));
    }

    #[test]
    fn hit_examples() {
        let (a, b) = (0usize, 1usize);
        assert_eq!(flat_hit_at_k(&[vec![a, b]], &[vec![a]], 1).unwrap(), 1.0);
        assert_eq!(flat_hit_at_k(&[vec![b, a]], &[vec![a]], 1).unwrap(), 0.0);
        assert_eq!(flat_hit_at_k(&[vec![b, a]], &[vec![a]], 2).unwrap(), 1.0);
        // multi-label: either true label counts
        assert_eq!(flat_hit_at_k(&[vec![b, a]], &[vec![a, b]], 1).unwrap(), 1.0);
        assert!(matches!(flat_hit_at_k(&[vec![a]], &[vec![]], 1), Err(Error::Metric(_))));
        assert!(matches!(flat_hit_at_k(&[vec![a]], &[vec![a]], 2), Err(Error::Metric(_))));
    }

    #[test]
    fn random_baseline_single_label() {
        let truth = vec![vec![3]; 10];
        for k in [1, 2, 5, 10] {
            assert!((random_hit_rate(&truth, 50, k) - k as f64 / 50.0).abs() < 1e-12);
        }
        assert!((random_hit_rate(&[vec![0, 1]], 4, 1) - 0.5).abs() < 1e-12);
        assert!((random_hit_rate(&[vec![0, 1]], 4, 3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_json_shape() {
        let r = EvalResult {
            hit_rates: [(1, 0.5), (2, 0.75)].into_iter().collect(),
            n: 4,
            baseline: [(1, 0.1), (2, 0.2)].into_iter().collect(),
            num_labels: 10,
            predictions: vec![],
            truth: vec![],
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["fh"]["1"], 0.5);
        assert_eq!(v["fh"]["2"], 0.75);
        assert_eq!(v["n"], 4);
        assert_eq!(v["baseline"]["2"], 0.2);
    }
}
