//! Two-tower MLP encoder, its analytic backward pass, and the EMA teacher.
//!
//! Each tower is `x -> act(x W0 + b0) -> ... -> x WL + bL -> normalize`. The
//! final layer is linear and its output is L2-normalized, so the dot product
//! of two embeddings is their cosine similarity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Matrix, NORM_EPS};
use crate::seed::rng_for;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_EMA_DECAY: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative given the pre-activation `x` and the output `y = act(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One affine layer. `weight` is `in × out`, `bias` is `1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.rows(), self.weight.cols())
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    layers: Vec<Layer>,
    activation: Activation,
}

impl TowerParams {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Model("tower needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.shape() != (1, layer.output_dim()) {
                return Err(Error::Model(format!(
                    "layer {k}: bias shape {:?} does not match output dim {}",
                    layer.bias.shape(),
                    layer.output_dim()
                )));
            }
            if !layer.weight.is_finite() || !layer.bias.is_finite() {
                return Err(Error::Model(format!("layer {k}: non-finite parameter")));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Model(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    k + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    fn same_shape(&self, other: &TowerParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape()
            })
    }

    /// A tower of zero-valued layers with this tower's shapes.
    pub fn zeros_like(&self) -> Vec<Layer> {
        self.layers.iter().map(Layer::zeros_like).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_dim: usize,
    pub text_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Train `ln τ` alongside the towers.
    #[serde(default)]
    pub learnable_temperature: bool,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

impl ModelConfig {
    pub fn new(image_dim: usize, text_dim: usize, hidden: Vec<usize>, embed_dim: usize) -> Self {
        Self {
            image_dim,
            text_dim,
            hidden,
            embed_dim,
            activation: Activation::Tanh,
            temperature: DEFAULT_TEMPERATURE,
            learnable_temperature: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_dim == 0 || self.text_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config(format!(
                "dims must be positive (image_dim={}, text_dim={}, embed_dim={})",
                self.image_dim, self.text_dim, self.embed_dim
            )));
        }
        if let Some(i) = self.hidden.iter().position(|&h| h == 0) {
            return Err(Error::Config(format!("hidden[{i}] must be positive")));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerModel {
    pub image: TowerParams,
    pub text: TowerParams,
    temperature: f64,
    learnable_temperature: bool,
}

impl TwoTowerModel {
    pub fn new(
        image: TowerParams,
        text: TowerParams,
        temperature: f64,
        learnable_temperature: bool,
    ) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if image.output_dim() != text.output_dim() {
            return Err(Error::Model(format!(
                "image tower embeds to {} but text tower to {}",
                image.output_dim(),
                text.output_dim()
            )));
        }
        Ok(Self {
            image,
            text,
            temperature,
            learnable_temperature,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn learnable_temperature(&self) -> bool {
        self.learnable_temperature
    }

    pub fn embed_dim(&self) -> usize {
        self.image.output_dim()
    }

    pub(crate) fn set_temperature(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Model(format!("temperature left (0, inf): {tau}")));
        }
        self.temperature = tau;
        Ok(())
    }

    pub fn same_shape(&self, other: &TwoTowerModel) -> bool {
        self.image.same_shape(&other.image) && self.text.same_shape(&other.text)
    }

    /// All weight and bias tensors: image layers first, then text, each as (weight, bias).
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.image
            .layers
            .iter()
            .chain(&self.text.layers)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.image
            .layers
            .iter_mut()
            .chain(self.text.layers.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Names aligned with [`TwoTowerModel::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (tower, t) in [("image", &self.image), ("text", &self.text)] {
            for k in 0..t.layers.len() {
                names.push(format!("{tower}.layer{k}.weight"));
                names.push(format!("{tower}.layer{k}.bias"));
            }
        }
        names
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|m| m.data().len()).sum()
    }
}

/// Deterministic initialization: weights `U(-b, b)` with `b = sqrt(6 / (in + out))`,
/// zero biases. The image tower draws from tag `"init/image"`, the text tower
/// from `"init/text"`.
pub fn init_model(seed: u64, config: &ModelConfig) -> Result<TwoTowerModel> {
    config.validate()?;
    let build = |input: usize, tag: &str| -> Result<TowerParams> {
        let mut rng = rng_for(seed, tag);
        let mut dims = vec![input];
        dims.extend(&config.hidden);
        dims.push(config.embed_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let bound = (6.0 / (i + o) as f64).sqrt();
                let data = (0..i * o).map(|_| rng.random_range(-bound..bound)).collect();
                Layer {
                    weight: Matrix::from_raw(i, o, data),
                    bias: Matrix::zeros(1, o),
                }
            })
            .collect();
        TowerParams::new(layers, config.activation)
    };
    TwoTowerModel::new(
        build(config.image_dim, "init/image")?,
        build(config.text_dim, "init/text")?,
        config.temperature,
        config.learnable_temperature,
    )
}

/// Everything [`tower_backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[k]` is the input to layer `k` (so `inputs[0]` is the batch).
    inputs: Vec<Matrix>,
    /// Pre-activation of every hidden layer.
    pre_activations: Vec<Matrix>,
    unnormalized: Matrix,
    norms: Vec<f64>,
    embeddings: Matrix,
}

impl ForwardCache {
    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn unnormalized(&self) -> &Matrix {
        &self.unnormalized
    }

    pub fn batch_size(&self) -> usize {
        self.embeddings.rows()
    }
}

/// Embeds a batch; returns unit-norm rows and the cache for backprop.
pub fn forward(tower: &TowerParams, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if batch.cols() != tower.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} features, tower expects {}",
            batch.cols(),
            tower.input_dim()
        )));
    }
    let last = tower.layers.len() - 1;
    let mut inputs = Vec::with_capacity(tower.layers.len());
    let mut pre_activations = Vec::with_capacity(last);
    let mut current = batch.clone();
    for (k, layer) in tower.layers.iter().enumerate() {
        let mut h = math::matmul(&current, &layer.weight)?;
        let bias = layer.bias.row(0);
        for r in 0..h.rows() {
            for (v, b) in h.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        inputs.push(current);
        if k == last {
            current = h;
        } else {
            let act = tower.activation;
            let a = Matrix::from_raw(
                h.rows(),
                h.cols(),
                h.data().iter().map(|&x| act.apply(x)).collect(),
            );
            pre_activations.push(h);
            current = a;
        }
    }
    if !current.is_finite() {
        return Err(Error::Model("forward produced non-finite values".into()));
    }
    let embeddings = math::l2_normalize_rows(&current, NORM_EPS)?;
    let norms = current.row_iter().map(math::norm).collect();
    let cache = ForwardCache {
        inputs,
        pre_activations,
        unnormalized: current,
        norms,
        embeddings: embeddings.clone(),
    };
    Ok((embeddings, cache))
}

/// Backpropagates `d loss / d embeddings` through normalization and the MLP.
/// Returns one gradient [`Layer`] per tower layer.
pub fn tower_backward(
    tower: &TowerParams,
    cache: &ForwardCache,
    grad_embeddings: &Matrix,
) -> Result<Vec<Layer>> {
    if grad_embeddings.shape() != cache.embeddings.shape() {
        return Err(Error::Shape(format!(
            "embedding gradient {:?} vs cache {:?}",
            grad_embeddings.shape(),
            cache.embeddings.shape()
        )));
    }
    if cache.inputs.len() != tower.layers.len() {
        return Err(Error::Internal(
            "forward cache does not belong to this tower".into(),
        ));
    }
    // d z / d u for z = u / |u| is (I - z zᵀ) / |u|.
    let mut delta = grad_embeddings.clone();
    for r in 0..delta.rows() {
        let z = cache.embeddings.row(r);
        let proj = math::dot(z, grad_embeddings.row(r));
        let inv = 1.0 / cache.norms[r];
        for (d, zi) in delta.row_mut(r).iter_mut().zip(z) {
            *d = (*d - zi * proj) * inv;
        }
    }

    let mut grads: Vec<Layer> = Vec::with_capacity(tower.layers.len());
    for k in (0..tower.layers.len()).rev() {
        let weight = math::matmul_at(&cache.inputs[k], &delta)?;
        let mut bias = Matrix::zeros(1, delta.cols());
        for row in delta.row_iter() {
            for (b, d) in bias.row_mut(0).iter_mut().zip(row) {
                *b += d;
            }
        }
        grads.push(Layer { weight, bias });
        if k > 0 {
            let mut upstream = math::matmul_bt(&delta, &tower.layers[k].weight)?;
            let pre = &cache.pre_activations[k - 1];
            let post = &cache.inputs[k];
            for ((u, &x), &y) in upstream
                .data_mut()
                .iter_mut()
                .zip(pre.data())
                .zip(post.data())
            {
                *u *= tower.activation.derivative(x, y);
            }
            delta = upstream;
        }
    }
    grads.reverse();
    Ok(grads)
}

/// Gradient set shaped like a [`TwoTowerModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub image: Vec<Layer>,
    pub text: Vec<Layer>,
    /// d loss / d ln τ, present only when the temperature is learnable.
    pub log_temperature: Option<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &TwoTowerModel) -> Self {
        Self {
            image: model.image.zeros_like(),
            text: model.text.zeros_like(),
            log_temperature: model.learnable_temperature.then_some(0.0),
        }
    }

    /// Aligned with [`TwoTowerModel::tensors`].
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.image
            .iter()
            .chain(&self.text)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.image
            .iter_mut()
            .chain(self.text.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        if let (Some(a), Some(b)) = (self.log_temperature.as_mut(), other.log_temperature) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Gradients) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (a, b) in self.tensors().into_iter().zip(other.tensors()) {
            worst = worst.max(a.max_abs_diff(b)?);
        }
        if let (Some(a), Some(b)) = (self.log_temperature, other.log_temperature) {
            worst = worst.max((a - b).abs());
        }
        Ok(worst)
    }
}

/// Exponential moving average of a student model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaTeacher {
    params: TwoTowerModel,
    decay: f64,
}

impl EmaTeacher {
    /// Rebuilds a teacher from stored parameters (checkpoint loading).
    pub fn from_parts(params: TwoTowerModel, decay: f64) -> Result<Self> {
        check_decay(decay)?;
        Ok(Self { params, decay })
    }

    pub fn params(&self) -> &TwoTowerModel {
        &self.params
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// `p_t <- decay * p_t + (1 - decay) * p_s` for every parameter and for τ,
    /// evaluated as `p_t + (1 - decay) (p_s - p_t)` so `p_t == p_s` is an exact fixed point.
    pub fn update(&mut self, student: &TwoTowerModel) -> Result<()> {
        if !self.params.same_shape(student) {
            return Err(Error::Model(
                "EMA teacher and student have different shapes".into(),
            ));
        }
        let d = self.decay;
        for (t, s) in self.params.tensors_mut().into_iter().zip(student.tensors()) {
            for (pt, ps) in t.data_mut().iter_mut().zip(s.data()) {
                *pt += (1.0 - d) * (ps - *pt);
            }
        }
        let tau = self.params.temperature + (1.0 - d) * (student.temperature - self.params.temperature);
        self.params.set_temperature(tau)
    }
}

fn check_decay(decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!(
            "EMA decay must be in [0, 1), got {decay}"
        )));
    }
    Ok(())
}

/// Teacher starting as an exact copy of `student`.
pub fn ema_init(student: &TwoTowerModel, decay: f64) -> Result<EmaTeacher> {
    check_decay(decay)?;
    Ok(EmaTeacher {
        params: student.clone(),
        decay,
    })
}

pub fn ema_update(teacher: &mut EmaTeacher, student: &TwoTowerModel) -> Result<()> {
    teacher.update(student)
}
