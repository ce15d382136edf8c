//! Symmetric InfoNCE with EMA self-distillation.
//!
//! For a batch of `N` aligned pairs with unit embeddings `zI`, `zT`:
//!
//! * logits `S = zI zTᵀ / τ`
//! * `P^I = softmax_rows(S)` (image over texts), `P^T = softmax_rows(Sᵀ)`
//! * `L_I = -(1/N) Σ_i log P^I_ii`, `L_T` likewise, `L_InfoNCE = (L_I + L_T) / 2`
//! * `L_KL = ½ [KL(Q^I ‖ P^I) + KL(Q^T ‖ P^T)]` with teacher probabilities `Q`,
//!   each KL averaged over rows
//! * `L = L_InfoNCE + α L_KL`
//!
//! Log-probabilities always come from logsumexp over logits. The teacher is a
//! constant target; no gradient flows into it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::model::{self, EmaTeacher, ForwardCache, Gradients, TwoTowerModel};

/// Distillation weight used throughout the reference experiments.
pub const DEFAULT_ALPHA: f64 = 1.0;

/// `N × N` similarity logits, entry `(i, j) = zI_i · zT_j / τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    values: Matrix,
}

impl LogitMatrix {
    /// Wraps an arbitrary square matrix of logits.
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::Shape(format!(
                "logits must be square, got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Shape("logits must be finite".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn batch_size(&self) -> usize {
        self.values.rows()
    }
}

pub fn similarity_logits(
    image_embeddings: &Matrix,
    text_embeddings: &Matrix,
    tau: f64,
) -> Result<LogitMatrix> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if image_embeddings.shape() != text_embeddings.shape() {
        return Err(Error::Shape(format!(
            "image embeddings {:?} vs text embeddings {:?}",
            image_embeddings.shape(),
            text_embeddings.shape()
        )));
    }
    let values = math::matmul_bt(image_embeddings, text_embeddings)?.scale(1.0 / tau);
    LogitMatrix::new(values)
}

/// Row-stochastic match probabilities in both directions, with their logs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityPair {
    pub image_over_text: Matrix,
    pub text_over_image: Matrix,
    log_image_over_text: Matrix,
    log_text_over_image: Matrix,
}

impl ProbabilityPair {
    /// Builds a pair from explicit probability matrices. Rows must be
    /// nonnegative and sum to 1 within 1e-9.
    pub fn new(image_over_text: Matrix, text_over_image: Matrix) -> Result<Self> {
        if image_over_text.shape() != text_over_image.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                image_over_text.shape(),
                text_over_image.shape()
            )));
        }
        for m in [&image_over_text, &text_over_image] {
            for (r, row) in m.row_iter().enumerate() {
                let s: f64 = row.iter().sum();
                if row.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Input(format!(
                        "row {r} is not a probability distribution (sum {s})"
                    )));
                }
            }
        }
        let ln = |m: &Matrix| {
            Matrix::from_raw(
                m.rows(),
                m.cols(),
                m.data().iter().map(|p| p.ln()).collect(),
            )
        };
        Ok(Self {
            log_image_over_text: ln(&image_over_text),
            log_text_over_image: ln(&text_over_image),
            image_over_text,
            text_over_image,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.image_over_text.rows()
    }
}

pub fn match_probabilities(logits: &LogitMatrix) -> ProbabilityPair {
    let s = &logits.values;
    let st = s.transpose();
    ProbabilityPair {
        image_over_text: math::stable_softmax_rows(s),
        text_over_image: math::stable_softmax_rows(&st),
        log_image_over_text: math::log_softmax_rows(s),
        log_text_over_image: math::log_softmax_rows(&st),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveLoss {
    pub l_image: f64,
    pub l_text: f64,
    pub l_infonce: f64,
}

pub fn infonce_loss(logits: &LogitMatrix) -> ContrastiveLoss {
    let s = &logits.values;
    let n = s.rows();
    let log_i = math::log_softmax_rows(s);
    let log_t = math::log_softmax_rows(&s.transpose());
    let l_image = -(0..n).map(|i| log_i.get(i, i)).sum::<f64>() / n as f64;
    let l_text = -(0..n).map(|i| log_t.get(i, i)).sum::<f64>() / n as f64;
    ContrastiveLoss {
        l_image,
        l_text,
        l_infonce: 0.5 * (l_image + l_text),
    }
}

/// Which distribution plays the target in the distillation KL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `Σ Q log(Q / P)`: teacher soft labels are the target.
    #[default]
    TeacherTarget,
    /// `Σ P log(P / Q)`.
    StudentTarget,
}

fn row_kl(target: &[f64], log_target: &[f64], log_other: &[f64]) -> f64 {
    target
        .iter()
        .zip(log_target)
        .zip(log_other)
        .map(|((&p, &lp), &lq)| if p > 0.0 { p * (lp - lq) } else { 0.0 })
        .sum()
}

fn mean_kl(target: &Matrix, log_target: &Matrix, log_other: &Matrix) -> f64 {
    let n = target.rows();
    (0..n)
        .map(|r| row_kl(target.row(r), log_target.row(r), log_other.row(r)))
        .sum::<f64>()
        / n as f64
}

/// `½ [KL(Q^I ‖ P^I) + KL(Q^T ‖ P^T)]`, rows averaged; teacher is the target.
pub fn kl_distillation_loss(student: &ProbabilityPair, teacher: &ProbabilityPair) -> Result<f64> {
    kl_distillation_loss_with(student, teacher, KlDirection::TeacherTarget)
}

pub fn kl_distillation_loss_with(
    student: &ProbabilityPair,
    teacher: &ProbabilityPair,
    direction: KlDirection,
) -> Result<f64> {
    if student.image_over_text.shape() != teacher.image_over_text.shape() {
        return Err(Error::Shape(format!(
            "student batch {} vs teacher batch {}",
            student.batch_size(),
            teacher.batch_size()
        )));
    }
    let (target, other) = match direction {
        KlDirection::TeacherTarget => (teacher, student),
        KlDirection::StudentTarget => (student, teacher),
    };
    let ki = mean_kl(
        &target.image_over_text,
        &target.log_image_over_text,
        &other.log_image_over_text,
    );
    let kt = mean_kl(
        &target.text_over_image,
        &target.log_text_over_image,
        &other.log_text_over_image,
    );
    Ok(0.5 * (ki + kt))
}

/// Loss hyperparameters for [`combined_loss_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub alpha: f64,
    pub kl_direction: KlDirection,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            kl_direction: KlDirection::TeacherTarget,
        }
    }
}

impl LossOptions {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Loss values and gradients with respect to the embeddings, before the towers.
#[derive(Debug, Clone)]
pub struct EmbeddingLoss {
    pub l_image: f64,
    pub l_text: f64,
    pub l_infonce: f64,
    pub l_kl: f64,
    pub total: f64,
    pub grad_image: Matrix,
    pub grad_text: Matrix,
    /// d total / d ln τ.
    pub grad_log_temperature: f64,
}

/// Loss and embedding gradients for a (possibly gathered) batch.
///
/// `teacher` holds the teacher's match probabilities on the same batch; with
/// `None` the distillation term is zero.
pub fn embedding_loss(
    image_embeddings: &Matrix,
    text_embeddings: &Matrix,
    tau: f64,
    teacher: Option<&ProbabilityPair>,
    options: LossOptions,
) -> Result<EmbeddingLoss> {
    options.validate()?;
    let logits = similarity_logits(image_embeddings, text_embeddings, tau)?;
    let n = logits.batch_size();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let student = match_probabilities(&logits);
    let contrastive = infonce_loss(&logits);
    let inv_n = 1.0 / n as f64;

    // dL/dS = (1/2N) [A + Bᵀ] with A = (P^I - I) + α G^I and B = (P^T - I) + α G^T,
    // G being the per-direction KL gradient
    let mut a = student.image_over_text.clone();
    let mut b = student.text_over_image.clone();
    let mut l_kl = 0.0;
    if let Some(teacher) = teacher {
        l_kl = kl_distillation_loss_with(&student, teacher, options.kl_direction)?;
        if options.alpha > 0.0 {
            let gi = kl_logit_grad(
                &student.image_over_text,
                &student.log_image_over_text,
                &teacher.image_over_text,
                &teacher.log_image_over_text,
                options.kl_direction,
            );
            let gt = kl_logit_grad(
                &student.text_over_image,
                &student.log_text_over_image,
                &teacher.text_over_image,
                &teacher.log_text_over_image,
                options.kl_direction,
            );
            a.axpy(options.alpha, &gi)?;
            b.axpy(options.alpha, &gt)?;
        }
    }
    zero_row_sum_diagonal(&mut a);
    zero_row_sum_diagonal(&mut b);
    let mut grad_logits = a;
    grad_logits.add_assign(&b.transpose())?;
    let grad_logits = grad_logits.scale(0.5 * inv_n);

    // S = zI zTᵀ / τ
    let grad_image = math::matmul(&grad_logits, text_embeddings)?.scale(1.0 / tau);
    let grad_text = math::matmul_at(&grad_logits, image_embeddings)?.scale(1.0 / tau);
    // dS/d ln τ = -S
    let grad_log_temperature = -grad_logits
        .data()
        .iter()
        .zip(logits.values.data())
        .map(|(g, s)| g * s)
        .sum::<f64>();

    Ok(EmbeddingLoss {
        l_image: contrastive.l_image,
        l_text: contrastive.l_text,
        l_infonce: contrastive.l_infonce,
        l_kl,
        total: contrastive.l_infonce + options.alpha * l_kl,
        grad_image,
        grad_text,
        grad_log_temperature,
    })
}

/// Every row of `A` sums to zero, so each diagonal entry is rewritten as minus
/// its row's off-diagonal sum. When the softmax saturates this avoids the
/// cancellation in `p_ii - 1`.
fn zero_row_sum_diagonal(m: &mut Matrix) {
    for i in 0..m.rows() {
        let off: f64 = m
            .row(i)
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, v)| v)
            .sum();
        m.set(i, i, -off);
    }
}

/// Per-row gradient of `KL` with respect to the student logits (unscaled by 1/N).
fn kl_logit_grad(
    p: &Matrix,
    log_p: &Matrix,
    q: &Matrix,
    log_q: &Matrix,
    direction: KlDirection,
) -> Matrix {
    match direction {
        // Σ q log(q/p): d/ds = p - q
        KlDirection::TeacherTarget => {
            let mut g = p.clone();
            for (a, b) in g.data_mut().iter_mut().zip(q.data()) {
                *a -= b;
            }
            g
        }
        // Σ p log(p/q): d/ds_k = p_k (log p_k - log q_k - KL)
        KlDirection::StudentTarget => {
            let mut g = Matrix::zeros(p.rows(), p.cols());
            for r in 0..p.rows() {
                let kl = row_kl(p.row(r), log_p.row(r), log_q.row(r));
                for c in 0..p.cols() {
                    let pk = p.get(r, c);
                    let v = if pk > 0.0 {
                        pk * (log_p.get(r, c) - log_q.get(r, c) - kl)
                    } else {
                        0.0
                    };
                    g.set(r, c, v);
                }
            }
            g
        }
    }
}

/// Scalar losses plus gradients for every student parameter.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub l_image: f64,
    pub l_text: f64,
    pub l_infonce: f64,
    pub l_kl: f64,
    pub total: f64,
    pub alpha: f64,
    pub grads: Gradients,
}

/// Teacher match probabilities on an aligned batch, using the teacher's own τ.
pub fn teacher_probabilities(
    teacher: &TwoTowerModel,
    image_batch: &Matrix,
    text_batch: &Matrix,
) -> Result<ProbabilityPair> {
    let (zi, _) = model::forward(&teacher.image, image_batch)?;
    let (zt, _) = model::forward(&teacher.text, text_batch)?;
    Ok(match_probabilities(&similarity_logits(
        &zi,
        &zt,
        teacher.temperature(),
    )?))
}

fn check_aligned(image_batch: &Matrix, text_batch: &Matrix) -> Result<()> {
    if image_batch.rows() != text_batch.rows() {
        return Err(Error::Shape(format!(
            "{} image rows but {} text rows",
            image_batch.rows(),
            text_batch.rows()
        )));
    }
    Ok(())
}

/// `L = L_InfoNCE + α L_KL` with gradients, teacher as the soft-label target.
pub fn combined_loss(
    model: &TwoTowerModel,
    teacher: &EmaTeacher,
    image_batch: &Matrix,
    text_batch: &Matrix,
    alpha: f64,
) -> Result<LossReport> {
    combined_loss_with(
        model,
        Some(teacher.params()),
        image_batch,
        text_batch,
        LossOptions::with_alpha(alpha),
    )
}

pub fn combined_loss_with(
    model: &TwoTowerModel,
    teacher: Option<&TwoTowerModel>,
    image_batch: &Matrix,
    text_batch: &Matrix,
    options: LossOptions,
) -> Result<LossReport> {
    check_aligned(image_batch, text_batch)?;
    let (zi, cache_i) = model::forward(&model.image, image_batch)?;
    let (zt, cache_t) = model::forward(&model.text, text_batch)?;
    let teacher_probs = teacher
        .map(|t| teacher_probabilities(t, image_batch, text_batch))
        .transpose()?;
    let loss = embedding_loss(
        &zi,
        &zt,
        model.temperature(),
        teacher_probs.as_ref(),
        options,
    )?;
    let grads = backward(model, &cache_i, &cache_t, &loss)?;
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

/// Pushes embedding gradients through both towers.
pub fn backward(
    model: &TwoTowerModel,
    image_cache: &ForwardCache,
    text_cache: &ForwardCache,
    loss: &EmbeddingLoss,
) -> Result<Gradients> {
    Ok(Gradients {
        image: model::tower_backward(&model.image, image_cache, &loss.grad_image)?,
        text: model::tower_backward(&model.text, text_cache, &loss.grad_text)?,
        log_temperature: model
            .learnable_temperature()
            .then_some(loss.grad_log_temperature),
    })
}

/// Loss values only (no gradients). Used by finite-difference checks.
pub fn combined_loss_value(
    model: &TwoTowerModel,
    teacher: Option<&TwoTowerModel>,
    image_batch: &Matrix,
    text_batch: &Matrix,
    options: LossOptions,
) -> Result<f64> {
    check_aligned(image_batch, text_batch)?;
    options.validate()?;
    let (zi, _) = model::forward(&model.image, image_batch)?;
    let (zt, _) = model::forward(&model.text, text_batch)?;
    let logits = similarity_logits(&zi, &zt, model.temperature())?;
    let mut total = infonce_loss(&logits).l_infonce;
    if let Some(t) = teacher {
        let tp = teacher_probabilities(t, image_batch, text_batch)?;
        let sp = match_probabilities(&logits);
        total += options.alpha * kl_distillation_loss_with(&sp, &tp, options.kl_direction)?;
    }
    Ok(total)
}
