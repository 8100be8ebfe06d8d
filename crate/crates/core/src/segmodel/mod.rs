//! Dropout-equipped convolutional pixel classifier.
//!
//! Two 2x downsampling stages with skip connections and a two-class
//! softmax head. Dropout sits after the two decoder blocks only. All
//! randomness (initialisation, mini-batch sampling, dropout masks) is drawn
//! from streams keyed by the model seed and the global step or pass index,
//! so results do not depend on thread scheduling and a training run can
//! be resumed from any checkpoint.

mod checkpoint;
mod layers;
mod net;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{GrayImage, LabelGrid};
use crate::par;
use crate::rng::{self, tag};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
use layers::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("channel widths must be positive, got {0:?}")]
    InvalidWidths([usize; 3]),
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidDropout(f64),
    #[error("invalid training hyper-parameters: {0}")]
    InvalidHyper(String),
    #[error("no training samples")]
    EmptyBatch,
    #[error("sample {index}: {what}")]
    BadSample { index: usize, what: String },
    #[error("non-finite loss {loss} at step {step}; lr {lr}, gradient norm {grad_norm}")]
    NonFiniteLoss {
        step: u64,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    widths: [usize; 3],
    dropout_rate: f64,
    seed: u64,
    step_count: u64,
    params: Vec<Vec<f64>>,
}

impl SegModel {
    pub fn widths(&self) -> [usize; 3] {
        self.widths
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Total optimiser steps taken since initialisation.
    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// `(name, shape, values)` for each parameter tensor in fixed order.
    pub fn tensors(&self) -> impl Iterator<Item = (&'static str, Vec<usize>, &[f64])> {
        let shapes = net::layout(self.widths);
        net::NAMES
            .iter()
            .zip(shapes)
            .zip(&self.params)
            .map(|((n, s), p)| (*n, s, p.as_slice()))
    }

    /// All parameters flattened in tensor order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.concat()
    }

    /// Overwrites parameters from a flat vector in tensor order.
    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.parameter_count(), "parameter count");
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Same parameters with a different dropout rate.
    pub fn with_dropout_rate(&self, rate: f64) -> Result<SegModel, ModelError> {
        check_dropout(rate)?;
        Ok(SegModel {
            dropout_rate: rate,
            ..self.clone()
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|v| v.is_finite())
    }
}

fn check_dropout(rate: f64) -> Result<(), ModelError> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(ModelError::InvalidDropout(rate))
    }
}

pub const DEFAULT_WIDTHS: [usize; 3] = [8, 16, 32];
pub const DEFAULT_DROPOUT: f64 = 0.2;

/// He-normal initialisation by fan-in; zero biases. The head is scaled
/// down so a fresh model predicts close to 0.5 everywhere.
pub fn init_model(seed: u64, dropout_rate: f64, widths: [usize; 3]) -> Result<SegModel, ModelError> {
    if widths.contains(&0) {
        return Err(ModelError::InvalidWidths(widths));
    }
    check_dropout(dropout_rate)?;
    let mut r = rng::stream(seed, &[tag::INIT]);
    let params = net::layout(widths)
        .into_iter()
        .enumerate()
        .map(|(i, shape)| {
            let n: usize = shape.iter().product();
            if shape.len() == 1 {
                return vec![0.0; n];
            }
            let fan_in: usize = shape[1..].iter().product();
            let mut std = (2.0 / fan_in as f64).sqrt();
            if i == net::HEAD_W {
                std *= 0.1;
            }
            (0..n).map(|_| std * rng::normal(&mut r)).collect()
        })
        .collect();
    Ok(SegModel {
        widths,
        dropout_rate,
        seed,
        step_count: 0,
        params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr0: f64,
    pub momentum: f64,
    pub batch: usize,
    pub max_steps: usize,
    pub lr_power: f64,
    pub lambda: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            batch: 16,
            max_steps: 5000,
            lr_power: 0.9,
            lambda: 1e-4,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidHyper(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(self.lr_power > 0.0 && self.lr_power.is_finite()) {
            return bad("lr_power must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        Ok(())
    }

    /// Learning rate at local step `t` of `max_steps`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let frac = 1.0 - t as f64 / self.max_steps.max(1) as f64;
        self.lr0 * frac.max(0.0).powf(self.lr_power)
    }
}

/// One training image with its labels and per-pixel weights.
#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    pub image: &'a GrayImage,
    pub labels: &'a LabelGrid,
    pub weights: &'a [f64],
}

impl TrainSample<'_> {
    fn check(&self, index: usize) -> Result<(), ModelError> {
        let bad = |what: String| Err(ModelError::BadSample { index, what });
        if self.labels.dims() != self.image.dims() {
            return bad(format!(
                "label grid {:?} does not match image {:?}",
                self.labels.dims(),
                self.image.dims()
            ));
        }
        if self.weights.len() != self.image.len() {
            return bad(format!("{} weights for {} pixels", self.weights.len(), self.image.len()));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return bad(format!("weight {w} is not a finite non-negative value"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SegModel,
    /// Weighted data loss of each mini-batch, before the update.
    pub losses: Vec<f64>,
}

/// Gradient of the training objective, in parameter-tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradient {
    fn zeros_like(model: &SegModel) -> Self {
        Self {
            tensors: model.params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    fn add(&mut self, other: &Gradient) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.concat()
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Loss value and gradient of one evaluation of the objective.
#[derive(Debug, Clone)]
pub struct Objective {
    /// Mean over images of the per-image mean of `v · CE`.
    pub data_loss: f64,
    /// `λ/2 · ‖W‖²`.
    pub regulariser: f64,
    pub gradient: Gradient,
}

impl Objective {
    pub fn total(&self) -> f64 {
        self.data_loss + self.regulariser
    }
}

/// Reflect-pads an image to dimensions divisible by 4.
fn pad_input(image: &GrayImage) -> Tensor {
    let (w, h) = image.dims();
    let (pw, ph) = (w.div_ceil(4) * 4, h.div_ceil(4) * 4);
    let mut data = Vec::with_capacity(pw * ph);
    for y in 0..ph {
        let sy = reflect(y, h);
        for x in 0..pw {
            data.push(image.get(reflect(x, w), sy));
        }
    }
    Tensor::from_vec(1, ph, pw, data)
}

/// Mirror index without repeating the edge sample: `n, n+1` map to `n-2, n-3`.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Per-sample loss and gradient. Pixels outside the original image (padding)
/// carry zero weight. `scale` multiplies every pixel term.
fn sample_objective(
    model: &SegModel,
    sample: &TrainSample<'_>,
    scale: f64,
    dropout: Option<&mut rng::Stream>,
) -> (f64, Gradient) {
    let (w, h) = sample.image.dims();
    let input = pad_input(sample.image);
    let pw = input.w;
    let dropout = dropout.map(|r| (model.dropout_rate, r as &mut dyn rand::RngCore));
    let (logits, cache) = net::forward(&model.params, input, dropout);
    let plane = logits.h * logits.w;
    let mut grad = Tensor::zeros(2, logits.h, logits.w);
    let mut loss = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = sample.weights[i];
            if v == 0.0 {
                continue;
            }
            let p = y * pw + x;
            let (z0, z1) = (logits.data[p], logits.data[plane + p]);
            let label = sample.labels.get(i);
            loss += v * net::pixel_ce(z0, z1, label);
            let p1 = net::foreground_prob(z0, z1);
            let d1 = v * scale * (p1 - f64::from(label));
            grad.data[plane + p] = d1;
            grad.data[p] = -d1;
        }
    }
    let mut g = Gradient::zeros_like(model);
    net::backward(&model.params, &cache, &grad, &mut g.tensors);
    (loss * scale, g)
}

fn batch_objective(
    model: &SegModel,
    samples: &[TrainSample<'_>],
    indices: &[usize],
    lambda: f64,
    dropout_step: Option<u64>,
) -> Objective {
    let n = indices.len() as f64;
    let parts = par::map(indices, |&i| {
        let s = &samples[i];
        let scale = 1.0 / (n * s.image.len() as f64);
        let mut stream = dropout_step.map(|step| rng::stream(model.seed, &[tag::DROPOUT, step, i as u64]));
        sample_objective(model, s, scale, stream.as_mut())
    });
    let mut gradient = Gradient::zeros_like(model);
    let mut data_loss = 0.0;
    for (l, g) in &parts {
        data_loss += l;
        gradient.add(g);
    }
    let mut regulariser = 0.0;
    if lambda > 0.0 {
        for (g, p) in gradient.tensors.iter_mut().zip(&model.params) {
            for (gv, pv) in g.iter_mut().zip(p) {
                *gv += lambda * pv;
                regulariser += 0.5 * lambda * pv * pv;
            }
        }
    }
    Objective {
        data_loss,
        regulariser,
        gradient,
    }
}

fn check_samples(samples: &[TrainSample<'_>]) -> Result<(), ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    samples.iter().enumerate().try_for_each(|(i, s)| s.check(i))
}

/// Deterministic objective over all samples with dropout disabled.
pub fn objective(model: &SegModel, samples: &[TrainSample<'_>], lambda: f64) -> Result<Objective, ModelError> {
    check_samples(samples)?;
    let all: Vec<usize> = (0..samples.len()).collect();
    Ok(batch_objective(model, samples, &all, lambda, None))
}

fn batch_indices(model: &SegModel, n: usize, batch: usize, step: u64) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut r = rng::stream(model.seed, &[tag::BATCH, step]);
    let mut idx = rand::seq::index::sample(&mut r, n, batch).into_vec();
    idx.sort_unstable();
    idx
}

/// SGD with momentum on the weighted cross-entropy plus `λ/2 · ‖W‖²`.
///
/// The velocity buffer starts at zero on every call. The learning rate
/// decays polynomially over the `max_steps` of this call. Mini-batches and
/// dropout masks are keyed by the model's global step count.
pub fn train_weighted(
    model: &SegModel,
    samples: &[TrainSample<'_>],
    hyper: &TrainHyper,
) -> Result<TrainOutcome, ModelError> {
    hyper.validate()?;
    check_samples(samples)?;
    let mut model = model.clone();
    let mut velocity = Gradient::zeros_like(&model);
    let mut losses = Vec::with_capacity(hyper.max_steps);
    for t in 0..hyper.max_steps {
        let step = model.step_count;
        let idx = batch_indices(&model, samples.len(), hyper.batch, step);
        let obj = batch_objective(&model, samples, &idx, hyper.lambda, Some(step));
        let lr = hyper.lr_at(t);
        let grad_norm = obj.gradient.norm();
        if !obj.data_loss.is_finite() || !grad_norm.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                step,
                loss: obj.data_loss,
                lr,
                grad_norm,
            });
        }
        losses.push(obj.data_loss);
        for ((p, v), g) in model.params.iter_mut().zip(&mut velocity.tensors).zip(&obj.gradient.tensors) {
            for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = hyper.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        model.step_count += 1;
    }
    log::debug!(
        "trained {} steps, loss {:.4} -> {:.4}",
        hyper.max_steps,
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(TrainOutcome { model, losses })
}

/// Per-pixel foreground probability; background is `1 - p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ProbMap {
    /// Panics if the buffer size is wrong or a value lies outside `[0, 1]`.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "probability buffer size");
        assert!(values.iter().all(|v| (0.0..=1.0).contains(v)), "probability outside [0, 1]");
        Self { width, height, values }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn background(&self, index: usize) -> f64 {
        1.0 - self.values[index]
    }

    /// Label 1 iff foreground probability ≥ 0.5.
    pub fn binarize(&self) -> LabelGrid {
        LabelGrid::from_fn(self.width, self.height, |i| binarize_prob(self.values[i]) == 1)
    }
}

/// The per-pixel cross-entropy minimiser over `y ∈ {0, 1}`; ties go to 1.
#[inline]
pub fn binarize_prob(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

/// Inference-mode logits cropped to the image: `(z0, z1)` per pixel.
fn logits(model: &SegModel, image: &GrayImage, dropout: Option<&mut rng::Stream>) -> Vec<(f64, f64)> {
    let (w, h) = image.dims();
    let input = pad_input(image);
    let pw = input.w;
    let dropout = dropout.map(|r| (model.dropout_rate, r as &mut dyn rand::RngCore));
    let (z, _) = net::forward(&model.params, input, dropout);
    let plane = z.h * z.w;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let p = y * pw + x;
            out.push((z.data[p], z.data[plane + p]));
        }
    }
    out
}

pub fn predict_proba(model: &SegModel, image: &GrayImage) -> ProbMap {
    let (w, h) = image.dims();
    let values = logits(model, image, None)
        .into_iter()
        .map(|(z0, z1)| net::foreground_prob(z0, z1))
        .collect();
    ProbMap::new(w, h, values)
}

pub fn predict_binary(model: &SegModel, image: &GrayImage) -> LabelGrid {
    predict_proba(model, image).binarize()
}

/// Inference-mode cross-entropy of each pixel under `labels`.
pub fn pixel_losses(model: &SegModel, image: &GrayImage, labels: &LabelGrid) -> Vec<f64> {
    assert_eq!(image.dims(), labels.dims(), "label grid size");
    logits(model, image, None)
        .into_iter()
        .enumerate()
        .map(|(i, (z0, z1))| net::pixel_ce(z0, z1, labels.get(i)))
        .collect()
}

/// Mean of `passes` binarised stochastic predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationMap {
    width: usize,
    height: usize,
    passes: u32,
    votes: Vec<u32>,
}

impl ExpectationMap {
    pub fn from_votes(width: usize, height: usize, passes: u32, votes: Vec<u32>) -> Self {
        assert!(passes >= 1, "at least one pass");
        assert_eq!(votes.len(), width * height, "vote buffer size");
        assert!(votes.iter().all(|&v| v <= passes), "more votes than passes");
        Self {
            width,
            height,
            passes,
            votes,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn passes(&self) -> u32 {
        self.passes
    }

    pub fn votes(&self) -> &[u32] {
        &self.votes
    }

    pub fn get(&self, index: usize) -> f64 {
        f64::from(self.votes[index]) / f64::from(self.passes)
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.votes.len()).map(|i| self.get(i)).collect()
    }
}

/// Monte Carlo dropout: `passes` forward passes with dropout active, each
/// thresholded at 0.5. Pass `d` draws its masks from `(seed, d)`.
pub fn mcdo_expectation(model: &SegModel, image: &GrayImage, passes: u32, seed: u64) -> ExpectationMap {
    assert!(passes >= 1, "at least one pass");
    let (w, h) = image.dims();
    let runs = par::map_range(passes as usize, |d| {
        let mut r = rng::stream(seed, &[tag::MCDO, d as u64]);
        logits(model, image, Some(&mut r))
            .into_iter()
            .map(|(z0, z1)| binarize_prob(net::foreground_prob(z0, z1)))
            .collect::<Vec<u8>>()
    });
    let mut votes = vec![0u32; w * h];
    for run in &runs {
        for (v, &b) in votes.iter_mut().zip(run) {
            *v += u32::from(b);
        }
    }
    ExpectationMap::from_votes(w, h, passes, votes)
}
