//! Central finite-difference check of the analytic loss gradients.
//!
//! The reference loss is recomputed from scratch in double-double precision,
//! so the finite-difference quotient is limited by truncation (`O(h²)`) rather
//! than by f64 rounding of a loss value near 1, which at `h = 1e-5` would
//! swamp gradient coordinates smaller than about `1e-5`.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddouble::Dd;
use crate::error::{Error, Result};
use crate::losses::{combined_loss_with, KlDirection, LossOptions};
use crate::math::Matrix;
use crate::model::{init_model, Activation, Gradients, ModelConfig, TowerParams, TwoTowerModel};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_batch_sizes")]
    pub batch_sizes: Vec<usize>,
    /// Embedding (and hidden) widths.
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_temperatures")]
    pub temperatures: Vec<f64>,
    #[serde(default = "default_input_dims")]
    pub input_dims: [usize; 2],
    /// Also check `d/d ln τ`.
    #[serde(default)]
    pub learnable_temperature: bool,
}

fn default_trials() -> usize {
    100
}
fn default_step() -> f64 {
    1e-5
}
fn default_tolerance() -> f64 {
    1e-6
}
fn default_batch_sizes() -> Vec<usize> {
    vec![2, 4, 8]
}
fn default_dims() -> Vec<usize> {
    vec![4, 8, 16]
}
fn default_alphas() -> Vec<f64> {
    vec![0.0, 0.5, 1.0]
}
fn default_temperatures() -> Vec<f64> {
    vec![0.07, 1.0]
}
fn default_input_dims() -> [usize; 2] {
    [6, 5]
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: default_trials(),
            step: default_step(),
            tolerance: default_tolerance(),
            batch_sizes: default_batch_sizes(),
            dims: default_dims(),
            alphas: default_alphas(),
            temperatures: default_temperatures(),
            input_dims: default_input_dims(),
            learnable_temperature: false,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if !(self.step > 0.0) {
            return Err(Error::Config(format!("step must be positive, got {}", self.step)));
        }
        if self.batch_sizes.is_empty()
            || self.dims.is_empty()
            || self.alphas.is_empty()
            || self.temperatures.is_empty()
        {
            return Err(Error::Config("grid lists must be non-empty".into()));
        }
        Ok(())
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
/// Seed used by the CLI and the acceptance suite.
pub const DEFAULT_SEED: u64 = 2024;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coordinate {
    pub trial: usize,
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst: Coordinate,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// One randomly drawn problem: student, distinct teacher, aligned batch.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: TwoTowerModel,
    pub teacher: TwoTowerModel,
    pub images: Matrix,
    pub texts: Matrix,
    pub options: LossOptions,
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::new(rows, cols, data).expect("finite normal samples")
}

pub fn sample_instance(config: &GradCheckConfig, seed: u64, trial: usize) -> Result<Instance> {
    let mut rng = rng_for(seed, &format!("gradcheck/{trial}"));
    let n = *config.batch_sizes.choose(&mut rng).unwrap();
    let d = *config.dims.choose(&mut rng).unwrap();
    let alpha = *config.alphas.choose(&mut rng).unwrap();
    let tau = *config.temperatures.choose(&mut rng).unwrap();
    let [di, dt] = config.input_dims;
    let mut mc = ModelConfig::new(di, dt, vec![d], d);
    mc.temperature = tau;
    mc.learnable_temperature = config.learnable_temperature;
    let model = init_model(rng.random(), &mc)?;
    let teacher = init_model(rng.random(), &mc)?;
    Ok(Instance {
        model,
        teacher,
        images: normal_matrix(&mut rng, n, di),
        texts: normal_matrix(&mut rng, n, dt),
        options: LossOptions::with_alpha(alpha),
    })
}

fn tower_embeddings(tower: &TowerParams, x: &Matrix) -> Vec<Vec<Dd>> {
    let last = tower.layers().len() - 1;
    x.row_iter()
        .map(|row| {
            let mut h: Vec<Dd> = row.iter().map(|&v| Dd::from(v)).collect();
            for (k, layer) in tower.layers().iter().enumerate() {
                h = (0..layer.weight.cols())
                    .map(|j| {
                        let acc = h
                            .iter()
                            .enumerate()
                            .fold(Dd::from(layer.bias.get(0, j)), |acc, (i, &v)| {
                                acc + v * layer.weight.get(i, j)
                            });
                        match (k < last, tower.activation()) {
                            (false, _) => acc,
                            (true, Activation::Tanh) => acc.tanh(),
                            (true, Activation::Relu) if acc.hi > 0.0 => acc,
                            (true, Activation::Relu) => Dd::ZERO,
                        }
                    })
                    .collect();
            }
            let norm = h.iter().fold(Dd::ZERO, |a, &v| a + v * v).sqrt();
            h.into_iter().map(|v| v / norm).collect()
        })
        .collect()
}

fn log_softmax(row: Vec<Dd>) -> Vec<Dd> {
    let max = row.iter().copied().fold(row[0], |m, v| if v.hi > m.hi { v } else { m });
    let lse = max + row.iter().fold(Dd::ZERO, |a, &v| a + (v - max).exp()).ln();
    row.into_iter().map(|v| v - lse).collect()
}

/// Row log-softmax of `S` and of `Sᵀ`.
fn log_match_probabilities(model: &TwoTowerModel, x: &Matrix, y: &Matrix) -> [Vec<Vec<Dd>>; 2] {
    let zi = tower_embeddings(&model.image, x);
    let zt = tower_embeddings(&model.text, y);
    let tau = Dd::from(model.temperature());
    let sim = |a: &[Dd], b: &[Dd]| a.iter().zip(b).fold(Dd::ZERO, |acc, (&p, &q)| acc + p * q) / tau;
    let by_image = zi.iter().map(|a| log_softmax(zt.iter().map(|b| sim(a, b)).collect())).collect();
    let by_text = zt.iter().map(|b| log_softmax(zi.iter().map(|a| sim(a, b)).collect())).collect();
    [by_image, by_text]
}

fn mean_kl(log_target: &[Vec<Dd>], log_other: &[Vec<Dd>]) -> Dd {
    let total = log_target.iter().zip(log_other).fold(Dd::ZERO, |acc, (t, o)| {
        t.iter().zip(o).fold(acc, |acc, (&lt, &lo)| acc + lt.exp() * (lt - lo))
    });
    total / log_target.len() as f64
}

/// Total loss recomputed independently in double-double precision.
pub fn reference_loss(
    model: &TwoTowerModel,
    teacher: Option<&TwoTowerModel>,
    images: &Matrix,
    texts: &Matrix,
    options: LossOptions,
) -> f64 {
    reference_loss_dd(model, teacher, images, texts, options).to_f64()
}

fn reference_loss_dd(
    model: &TwoTowerModel,
    teacher: Option<&TwoTowerModel>,
    images: &Matrix,
    texts: &Matrix,
    options: LossOptions,
) -> Dd {
    let n = images.rows();
    let student = log_match_probabilities(model, images, texts);
    let diag = student
        .iter()
        .flat_map(|m| (0..n).map(move |i| m[i][i]))
        .fold(Dd::ZERO, |a, v| a + v);
    let infonce = -diag / (2 * n) as f64;
    let Some(teacher) = teacher else {
        return infonce;
    };
    let teacher = log_match_probabilities(teacher, images, texts);
    let kl = student
        .iter()
        .zip(&teacher)
        .fold(Dd::ZERO, |acc, (s, t)| {
            acc + match options.kl_direction {
                KlDirection::TeacherTarget => mean_kl(t, s),
                KlDirection::StudentTarget => mean_kl(s, t),
            }
        })
        * 0.5;
    infonce + kl * options.alpha
}

/// Checks every parameter coordinate of `trials` random instances.
/// `fault` lets tests corrupt the analytic gradients before comparison.
pub fn run_grad_check(
    config: &GradCheckConfig,
    seed: u64,
    fault: Option<fn(&mut Gradients)>,
) -> Result<GradCheckReport> {
    config.validate()?;
    let per_trial = (0..config.trials)
        .into_par_iter()
        .map(|trial| check_trial(config, seed, trial, fault))
        .collect::<Result<Vec<_>>>()?;
    let mut worst: Option<Coordinate> = None;
    let mut coordinates = 0;
    // trial order keeps the reported worst coordinate independent of scheduling
    for (count, w) in per_trial {
        coordinates += count;
        if worst.as_ref().is_none_or(|cur| w.rel_error > cur.rel_error) {
            worst = Some(w);
        }
    }
    let worst = worst.ok_or_else(|| Error::Internal("no coordinates checked".into()))?;
    Ok(GradCheckReport {
        trials: config.trials,
        coordinates,
        max_rel_error: worst.rel_error,
        worst,
        tolerance: config.tolerance,
    })
}

/// Number of coordinates checked in one trial and the worst of them.
fn check_trial(
    config: &GradCheckConfig,
    seed: u64,
    trial: usize,
    fault: Option<fn(&mut Gradients)>,
) -> Result<(usize, Coordinate)> {
    let inst = sample_instance(config, seed, trial)?;
    let mut grads = combined_loss_with(
        &inst.model,
        Some(&inst.teacher),
        &inst.images,
        &inst.texts,
        inst.options,
    )?
    .grads;
    if let Some(f) = fault {
        f(&mut grads);
    }
    let loss = |m: &TwoTowerModel| {
        reference_loss_dd(m, Some(&inst.teacher), &inst.images, &inst.texts, inst.options)
    };
    let h = config.step;
    let mut coordinates = 0;
    let mut worst: Option<Coordinate> = None;
    let mut record = |tensor: &str, row: usize, col: usize, analytic: f64, numeric: f64| {
        coordinates += 1;
        let rel_error = relative_error(analytic, numeric);
        if worst.as_ref().is_none_or(|w| rel_error > w.rel_error) {
            worst = Some(Coordinate {
                trial,
                tensor: tensor.into(),
                row,
                col,
                analytic,
                numeric,
                rel_error,
            });
        }
    };
    let mut probe = inst.model.clone();
    for (t, name) in inst.model.tensor_names().iter().enumerate() {
        let g = grads.tensors()[t];
        for idx in 0..g.data().len() {
            let original = probe.tensors()[t].data()[idx];
            let (up, down) = (original + h, original - h);
            probe.tensors_mut()[t].data_mut()[idx] = up;
            let plus = loss(&probe);
            probe.tensors_mut()[t].data_mut()[idx] = down;
            let minus = loss(&probe);
            probe.tensors_mut()[t].data_mut()[idx] = original;
            let numeric = ((plus - minus) / (up - down)).to_f64();
            record(name, idx / g.cols(), idx % g.cols(), g.data()[idx], numeric);
        }
    }
    if let Some(analytic) = grads.log_temperature {
        let tau = inst.model.temperature();
        let (up, down) = ((tau.ln() + h).exp(), (tau.ln() - h).exp());
        probe.set_temperature(up)?;
        let plus = loss(&probe);
        probe.set_temperature(down)?;
        let minus = loss(&probe);
        let numeric = ((plus - minus) / (Dd::from(up).ln() - Dd::from(down).ln())).to_f64();
        record("log_temperature", 0, 0, analytic, numeric);
    }
    let worst = worst.ok_or_else(|| Error::Internal("model has no parameters".into()))?;
    Ok((coordinates, worst))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(trials: usize) -> GradCheckConfig {
        GradCheckConfig {
            trials,
            ..GradCheckConfig::default()
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn misses_at_default_step_are_truncation() {
        // seed 2 trial 78 exceeds 1e-6 at h = 1e-5; the error must fall as h^2
        let coarse = small(1);
        let fine = GradCheckConfig {
            step: coarse.step / 4.0,
            ..small(1)
        };
        let (_, a) = check_trial(&coarse, 2, 78, None).unwrap();
        let (_, b) = check_trial(&fine, 2, 78, None).unwrap();
        assert!(a.rel_error > 1e-6, "{a:?}");
        let ratio = a.rel_error / b.rel_error;
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn reference_loss_agrees_with_f64_loss() {
        let cfg = small(1);
        for trial in 0..12 {
            let inst = sample_instance(&cfg, 4, trial).unwrap();
            let fast = crate::losses::combined_loss_value(
                &inst.model,
                Some(&inst.teacher),
                &inst.images,
                &inst.texts,
                inst.options,
            )
            .unwrap();
            let precise = reference_loss(&inst.model, Some(&inst.teacher), &inst.images, &inst.texts, inst.options);
            assert!((fast - precise).abs() <= 1e-13 * precise.abs().max(1.0), "{fast} vs {precise}");
        }
    }

    #[test]
    fn passes_on_correct_gradients() {
        let report = run_grad_check(&small(6), 11, None).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn learnable_temperature_gradient() {
        let mut cfg = small(6);
        cfg.learnable_temperature = true;
        let report = run_grad_check(&cfg, 5, None).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn injected_bug_is_caught() {
        fn negate_first(g: &mut Gradients) {
            let w = &mut g.image[0].weight;
            let v = w.get(0, 0);
            w.set(0, 0, -v);
        }
        let report = run_grad_check(&small(2), 11, Some(negate_first)).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst.tensor, "image.layer0.weight");
        assert_eq!((report.worst.row, report.worst.col), (0, 0));
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(matches!(run_grad_check(&small(0), 0, None), Err(Error::Config(_))));
    }
}
