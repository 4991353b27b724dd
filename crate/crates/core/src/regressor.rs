//! Two-layer MMSE regression head over text embeddings.
//!
//! `f(h) = W2 · relu(W1 h + b1) + b2` with a 64-unit hidden layer, trained on
//! mean-squared error of normalized scores. Every subject contributes one
//! example per available task; at inference the per-task predictions are
//! aggregated, denormalized and clamped to the MMSE scale.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EMBEDDING_DIM;
use crate::error::{Error, Result};
use crate::features::StandardizationParams;
use crate::manifest::{denormalize_score, NormalizationParams, TaskKind, MMSE_MAX, MMSE_MIN};
use crate::rng;

pub const HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionHead {
    input_dim: usize,
    /// Row-major `HIDDEN x input_dim`.
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

/// Gradients share the head's layout.
pub type Gradients = RegressionHead;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    GlorotUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub init: Init,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 300,
            batch_size: 16,
            seed: 42,
            optimizer: Optimizer::Adam,
            init: Init::GlorotUniform,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub input: Vec<f64>,
    /// Normalized target score.
    pub target: f64,
    pub subject_id: String,
    pub task: TaskKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub dev_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: RegressionHead,
    pub history: Vec<EpochStats>,
    /// 1-based epoch whose parameters were returned.
    pub selected_epoch: usize,
}

/// Input as (index, value) pairs of its non-zero entries. Skipping zeros
/// leaves every sum bit-identical to the dense evaluation.
struct SparseInput(Vec<(usize, f64)>);

impl SparseInput {
    fn new(x: &[f64]) -> Self {
        SparseInput(x.iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect())
    }
}

impl RegressionHead {
    pub fn zeros(input_dim: usize) -> Self {
        Self {
            input_dim,
            w1: vec![0.0; HIDDEN * input_dim],
            b1: vec![0.0; HIDDEN],
            w2: vec![0.0; HIDDEN],
            b2: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn w1(&self) -> &[f64] {
        &self.w1
    }

    pub fn w1_row(&self, j: usize) -> &[f64] {
        &self.w1[j * self.input_dim..(j + 1) * self.input_dim]
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &[f64] {
        &self.w2
    }

    pub fn b2(&self) -> f64 {
        self.b2
    }

    pub fn set_b2(&mut self, v: f64) {
        self.b2 = v;
    }

    /// Flat mutable view over all parameters in the order W1, b1, W2, b2.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(std::iter::once(&mut self.b2))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(std::iter::once(&self.b2))
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + HIDDEN + HIDDEN + 1
    }

    pub fn from_parts(w1_rows: Vec<Vec<f64>>, b1: Vec<f64>, w2: Vec<f64>, b2: f64) -> Result<Self> {
        if w1_rows.len() != HIDDEN || b1.len() != HIDDEN || w2.len() != HIDDEN {
            return Err(Error::Dimension {
                expected: HIDDEN,
                got: if w1_rows.len() != HIDDEN { w1_rows.len() } else if b1.len() != HIDDEN { b1.len() } else { w2.len() },
            });
        }
        let input_dim = w1_rows[0].len();
        if let Some(bad) = w1_rows.iter().find(|r| r.len() != input_dim) {
            return Err(Error::Dimension {
                expected: input_dim,
                got: bad.len(),
            });
        }
        let head = Self {
            input_dim,
            w1: w1_rows.into_iter().flatten().collect(),
            b1,
            w2,
            b2,
        };
        if head.params().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter in head".into()));
        }
        Ok(head)
    }

    fn check_input(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: h.len(),
            });
        }
        if let Some(i) = h.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("input entry {i} is {}", h[i])));
        }
        Ok(())
    }

    /// Pre-activations `W1 h + b1`.
    fn hidden_pre(&self, x: &SparseInput) -> [f64; HIDDEN] {
        let mut z = [0.0; HIDDEN];
        for (j, zj) in z.iter_mut().enumerate() {
            let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
            let mut acc = self.b1[j];
            for &(k, v) in &x.0 {
                acc += row[k] * v;
            }
            *zj = acc;
        }
        z
    }

    fn output(&self, z: &[f64; HIDDEN]) -> f64 {
        let mut out = self.b2;
        for (w, &zj) in self.w2.iter().zip(z) {
            out += w * zj.max(0.0);
        }
        out
    }

    fn forward_sparse(&self, x: &SparseInput) -> f64 {
        self.output(&self.hidden_pre(x))
    }

    /// Adds the gradient of `scale * f(x)` to `grads`.
    fn accumulate(&self, x: &SparseInput, scale: f64, grads: &mut Gradients) {
        let z = self.hidden_pre(x);
        grads.b2 += scale;
        for j in 0..HIDDEN {
            if z[j] <= 0.0 {
                continue;
            }
            grads.w2[j] += scale * z[j];
            let d = scale * self.w2[j];
            grads.b1[j] += d;
            let row = &mut grads.w1[j * self.input_dim..(j + 1) * self.input_dim];
            for &(k, v) in &x.0 {
                row[k] += d * v;
            }
        }
    }
}

/// Glorot-uniform W1 and W2, zero biases, drawn from the seeded generator in
/// [`crate::rng`].
pub fn init_head(seed: u64) -> RegressionHead {
    init_head_with_dim(seed, EMBEDDING_DIM)
}

pub fn init_head_with_dim(seed: u64, input_dim: usize) -> RegressionHead {
    let mut rng = rng::seeded(seed);
    let mut head = RegressionHead::zeros(input_dim);
    let bound1 = (6.0 / (input_dim + HIDDEN) as f64).sqrt();
    head.w1.iter_mut().for_each(|w| *w = rng::symmetric(&mut rng, bound1));
    let bound2 = (6.0 / (HIDDEN + 1) as f64).sqrt();
    head.w2.iter_mut().for_each(|w| *w = rng::symmetric(&mut rng, bound2));
    head
}

pub fn forward(head: &RegressionHead, h: &[f64]) -> Result<f64> {
    head.check_input(h)?;
    Ok(head.forward_sparse(&SparseInput::new(h)))
}

pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::arg(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::arg("mse of an empty batch"));
    }
    let sum: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / predictions.len() as f64)
}

/// Analytic gradient of the mean-batch MSE. The ReLU derivative at 0 is 0.
pub fn backward(head: &RegressionHead, batch: &[TrainingExample]) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let mut grads = RegressionHead::zeros(head.input_dim);
    let n = batch.len() as f64;
    for ex in batch {
        head.check_input(&ex.input)?;
        let x = SparseInput::new(&ex.input);
        let residual = head.forward_sparse(&x) - ex.target;
        head.accumulate(&x, 2.0 * residual / n, &mut grads);
    }
    Ok(grads)
}

fn batch_gradients(head: &RegressionHead, batch: &[(&SparseInput, f64)]) -> Gradients {
    let mut grads = RegressionHead::zeros(head.input_dim);
    let n = batch.len() as f64;
    for (x, target) in batch {
        let residual = head.forward_sparse(x) - target;
        head.accumulate(x, 2.0 * residual / n, &mut grads);
    }
    grads
}

fn dataset_mse(head: &RegressionHead, data: &[(SparseInput, f64)]) -> f64 {
    let sum: f64 = data
        .iter()
        .map(|(x, t)| {
            let r = head.forward_sparse(x) - t;
            r * r
        })
        .sum();
    sum / data.len() as f64
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

fn apply_update(head: &mut RegressionHead, grads: &Gradients, cfg: &TrainConfig, adam: &mut Option<AdamState>) {
    match (cfg.optimizer, adam) {
        (Optimizer::Sgd, _) | (Optimizer::Adam, None) => {
            for (p, g) in head.params_mut().zip(grads.params()) {
                *p -= cfg.learning_rate * g;
            }
        }
        (Optimizer::Adam, Some(state)) => {
            state.step += 1;
            let c1 = 1.0 - cfg.beta1.powi(state.step);
            let c2 = 1.0 - cfg.beta2.powi(state.step);
            let params = head.params_mut();
            for (((p, g), m), v) in params.zip(grads.params()).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
                // untouched coordinates with zero moments stay put
                if *g == 0.0 && *m == 0.0 && *v == 0.0 {
                    continue;
                }
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Mini-batch training with a seeded reshuffle each epoch. Returns the
/// parameters of the epoch with the lowest dev MSE (the final epoch when there
/// is no dev data).
pub fn train(
    head: &RegressionHead,
    train_examples: &[TrainingExample],
    dev_examples: &[TrainingExample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_examples.is_empty() {
        return Err(Error::arg("no training examples"));
    }
    let prepare = |examples: &[TrainingExample]| -> Result<Vec<(SparseInput, f64)>> {
        examples
            .iter()
            .map(|ex| {
                head.check_input(&ex.input)?;
                if !ex.target.is_finite() {
                    return Err(Error::Numeric(format!("target for {} {} is {}", ex.subject_id, ex.task, ex.target)));
                }
                Ok((SparseInput::new(&ex.input), ex.target))
            })
            .collect()
    };
    let train_data = prepare(train_examples)?;
    let dev_data = prepare(dev_examples)?;

    let mut current = head.clone();
    let mut adam = (config.optimizer == Optimizer::Adam).then(|| AdamState {
        m: vec![0.0; head.n_params()],
        v: vec![0.0; head.n_params()],
        step: 0,
    });
    let mut shuffle_rng = rng::seeded(config.seed ^ 0x5348_5546_464c_4521);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, RegressionHead)> = None;

    for epoch in 1..=config.epochs {
        rng::shuffle(&mut shuffle_rng, &mut order);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&SparseInput, f64)> = chunk.iter().map(|&i| (&train_data[i].0, train_data[i].1)).collect();
            let grads = batch_gradients(&current, &batch);
            apply_update(&mut current, &grads, config, &mut adam);
        }
        let train_mse = dataset_mse(&current, &train_data);
        let dev_mse = (!dev_data.is_empty()).then(|| dataset_mse(&current, &dev_data));
        if !train_mse.is_finite() || dev_mse.is_some_and(|d| !d.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        history.push(EpochStats {
            epoch,
            train_mse,
            dev_mse,
        });
        if let Some(d) = dev_mse {
            if best.as_ref().is_none_or(|(b, _, _)| d < *b) {
                best = Some((d, epoch, current.clone()));
            }
        }
    }
    let (head, selected_epoch) = match best {
        Some((_, epoch, h)) => (h, epoch),
        None => (current, config.epochs),
    };
    Ok(TrainOutcome {
        head,
        history,
        selected_epoch,
    })
}

/// Aggregated per-task prediction on the normalized scale.
pub fn predict_normalized(
    head: &RegressionHead,
    inputs: &BTreeMap<TaskKind, Vec<f64>>,
    aggregation: Aggregation,
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::arg("no task inputs for subject"));
    }
    let mut per_task = inputs.values().map(|h| forward(head, h)).collect::<Result<Vec<_>>>()?;
    Ok(match aggregation {
        Aggregation::Mean => per_task.iter().sum::<f64>() / per_task.len() as f64,
        Aggregation::Median => {
            per_task.sort_by(f64::total_cmp);
            let n = per_task.len();
            if n % 2 == 1 {
                per_task[n / 2]
            } else {
                0.5 * (per_task[n / 2 - 1] + per_task[n / 2])
            }
        }
    })
}

pub fn clamp_mmse(score: f64) -> f64 {
    score.clamp(MMSE_MIN as f64, MMSE_MAX as f64)
}

/// Subject-level MMSE: aggregate, denormalize, clamp to [0, 30].
pub fn predict_subject(
    head: &RegressionHead,
    inputs: &BTreeMap<TaskKind, Vec<f64>>,
    params: &NormalizationParams,
    aggregation: Aggregation,
) -> Result<f64> {
    let p_hat = predict_normalized(head, inputs, aggregation)?;
    Ok(clamp_mmse(denormalize_score(p_hat, params)))
}

/// On-disk head checkpoint (`head.ckpt.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCheckpoint {
    pub version: u32,
    pub norm: NormalizationParams,
    #[serde(rename = "W1")]
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    #[serde(rename = "W2")]
    pub w2: Vec<Vec<f64>>,
    pub b2: f64,
    pub config: TrainConfig,
    pub seed: u64,
    pub aggregation: Aggregation,
    /// Present when acoustic features are appended to the embedding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acoustic_standardizer: Option<StandardizationParams>,
}

impl HeadCheckpoint {
    pub fn new(head: &RegressionHead, norm: NormalizationParams, config: &TrainConfig, aggregation: Aggregation) -> Self {
        Self {
            version: 1,
            norm,
            w1: (0..HIDDEN).map(|j| head.w1_row(j).to_vec()).collect(),
            b1: head.b1.clone(),
            w2: vec![head.w2.clone()],
            b2: head.b2,
            config: config.clone(),
            seed: config.seed,
            aggregation,
            acoustic_standardizer: None,
        }
    }

    pub fn head(&self) -> Result<RegressionHead> {
        let [w2] = self.w2.as_slice() else {
            return Err(Error::Dimension {
                expected: 1,
                got: self.w2.len(),
            });
        };
        RegressionHead::from_parts(self.w1.clone(), self.b1.clone(), w2.clone(), self.b2)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        crate::cache::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        if ckpt.version != 1 {
            return Err(Error::Config(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        NormalizationParams::new(ckpt.norm.y_min, ckpt.norm.y_max)?;
        Ok(ckpt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub parameter: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub max_relative_error: f64,
    pub probes: Vec<ProbeResult>,
}

/// `|a - n| / max(|a|, |n|)`, falling back to the absolute difference when
/// both are negligible.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-12 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn flat_param(head: &mut RegressionHead, index: usize) -> &mut f64 {
    head.params_mut().nth(index).expect("parameter index in range")
}

/// Compares [`backward`] with central differences of the batch MSE at
/// `probes` random (head, batch, parameter) draws. Draws whose perturbation
/// would move a hidden unit across its ReLU kink, or whose pre-activations sit
/// within 1e-6 of one, are redrawn; so are parameters with vanishing gradient.
pub fn gradient_check(seed: u64, probes: usize, step: f64) -> Result<GradCheckReport> {
    const BATCH: usize = 4;
    let mut rng = rng::seeded(seed);
    let mut results = Vec::with_capacity(probes);
    let mut attempts = 0usize;
    while results.len() < probes {
        attempts += 1;
        if attempts > probes * 1000 {
            return Err(Error::Numeric("could not draw kink-free gradient probes".into()));
        }
        let mut head = init_head(rng::next_seed(&mut rng));
        head.b1.iter_mut().for_each(|b| *b = rng::symmetric(&mut rng, 0.1));
        head.b2 = rng::symmetric(&mut rng, 0.1);
        let batch: Vec<TrainingExample> = (0..BATCH)
            .map(|_| TrainingExample {
                input: (0..EMBEDDING_DIM).map(|_| rng::normal(&mut rng) / (EMBEDDING_DIM as f64).sqrt()).collect(),
                target: rng::unit(&mut rng),
                subject_id: String::new(),
                task: TaskKind::Ctd,
            })
            .collect();
        let parameter = rng::index_below(&mut rng, head.n_params());

        let loss = |h: &RegressionHead| -> Result<f64> {
            let preds = batch.iter().map(|ex| forward(h, &ex.input)).collect::<Result<Vec<_>>>()?;
            let targets: Vec<f64> = batch.iter().map(|ex| ex.target).collect();
            mse_loss(&preds, &targets)
        };
        let pattern = |h: &RegressionHead| -> Vec<Vec<bool>> {
            batch
                .iter()
                .map(|ex| h.hidden_pre(&SparseInput::new(&ex.input)).iter().map(|&z| z > 0.0).collect())
                .collect()
        };
        let near_kink = batch
            .iter()
            .any(|ex| head.hidden_pre(&SparseInput::new(&ex.input)).iter().any(|z| z.abs() < 1e-6));
        if near_kink {
            continue;
        }
        let mut plus = head.clone();
        *flat_param(&mut plus, parameter) += step;
        let mut minus = head.clone();
        *flat_param(&mut minus, parameter) -= step;
        let base_pattern = pattern(&head);
        if pattern(&plus) != base_pattern || pattern(&minus) != base_pattern {
            continue;
        }
        let analytic = *backward(&head, &batch)?.params().nth(parameter).expect("in range");
        if analytic.abs() < 1e-8 {
            continue;
        }
        let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * step);
        results.push(ProbeResult {
            parameter,
            analytic,
            numeric,
            relative_error: relative_error(analytic, numeric),
        });
    }
    let max_relative_error = results.iter().map(|p| p.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        step,
        max_relative_error,
        probes: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Straight-line evaluation of W2 relu(W1 h + b1) + b2, independent of the
    /// sparse path.
    fn reference_forward(head: &RegressionHead, h: &[f64]) -> f64 {
        let mut out = head.b2();
        for j in 0..HIDDEN {
            let mut z = head.b1()[j];
            for k in 0..head.input_dim() {
                z += head.w1()[j * head.input_dim() + k] * h[k];
            }
            if z > 0.0 {
                out += head.w2()[j] * z;
            }
        }
        out
    }

    fn reference_loss(head: &RegressionHead, batch: &[TrainingExample]) -> f64 {
        let n = batch.len() as f64;
        batch
            .iter()
            .map(|ex| {
                let r = reference_forward(head, &ex.input) - ex.target;
                r * r
            })
            .sum::<f64>()
            / n
    }

    fn random_input(rng: &mut rng::Rng) -> Vec<f64> {
        (0..EMBEDDING_DIM).map(|_| rng::normal(rng) / 27.7).collect()
    }

    fn example(input: Vec<f64>, target: f64) -> TrainingExample {
        TrainingExample {
            input,
            target,
            subject_id: "s".into(),
            task: TaskKind::Ctd,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_head(1);
        assert_eq!(a, init_head(1));
        assert_ne!(a.w1(), init_head(2).w1());
        let bound = (6.0f64 / 832.0).sqrt();
        assert!((bound - 0.0849).abs() < 1e-4);
        assert!(a.w1().iter().all(|w| w.abs() <= bound));
        assert!(a.w2().iter().all(|w| w.abs() <= (6.0f64 / 65.0).sqrt()));
        assert!(a.b1().iter().all(|&b| b == 0.0));
        assert_eq!(a.b2(), 0.0);
    }

    #[test]
    fn zero_weights_return_bias() {
        let mut head = RegressionHead::zeros(EMBEDDING_DIM);
        head.set_b2(0.37);
        let mut rng = rng::seeded(1);
        assert_eq!(forward(&head, &random_input(&mut rng)).unwrap(), 0.37);
        let mut head = init_head(5);
        head.set_b2(-1.5);
        assert_eq!(forward(&head, &vec![0.0; EMBEDDING_DIM]).unwrap(), -1.5);
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = rng::seeded(77);
        for s in 0..5 {
            let mut head = init_head(s);
            head.b1.iter_mut().for_each(|b| *b = rng::symmetric(&mut rng, 0.2));
            head.b2 = 0.3;
            let h = random_input(&mut rng);
            let got = forward(&head, &h).unwrap();
            assert!((got - reference_forward(&head, &h)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_bad_shapes_and_values() {
        let head = init_head(0);
        assert!(matches!(forward(&head, &[0.0; 767]), Err(Error::Dimension { expected: 768, got: 767 })));
        let mut h = vec![0.0; 768];
        h[3] = f64::NAN;
        assert!(matches!(forward(&head, &h), Err(Error::Numeric(_))));
        assert!(backward(&head, &[example(vec![0.0; 769], 0.0)]).is_err());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[1.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(mse_loss(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert!(matches!(mse_loss(&[1.0], &[0.0, 1.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_error_gives_zero_gradient() {
        let head = init_head(3);
        let mut rng = rng::seeded(3);
        let batch: Vec<_> = (0..5)
            .map(|_| {
                let h = random_input(&mut rng);
                let t = forward(&head, &h).unwrap();
                example(h, t)
            })
            .collect();
        let g = backward(&head, &batch).unwrap();
        assert!(g.params().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_scale_with_residuals() {
        let head = init_head(4);
        let mut rng = rng::seeded(4);
        let inputs: Vec<_> = (0..6).map(|_| random_input(&mut rng)).collect();
        let preds: Vec<f64> = inputs.iter().map(|h| forward(&head, h).unwrap()).collect();
        let offsets: Vec<f64> = (0..6).map(|i| 0.1 * (i as f64 - 2.5)).collect();
        let batch = |k: f64| -> Vec<_> {
            inputs.iter().zip(&preds).zip(&offsets).map(|((h, p), o)| example(h.clone(), p - k * o)).collect()
        };
        let g1 = backward(&head, &batch(1.0)).unwrap();
        let g2 = backward(&head, &batch(2.0)).unwrap();
        for (a, b) in g1.params().zip(g2.params()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Oracle: central differences of the loop-based reference loss.
        let mut rng = rng::seeded(2024);
        let step = 1e-5;
        let mut worst = 0.0f64;
        let mut checked = 0;
        while checked < 20 {
            let mut head = init_head(rng::next_seed(&mut rng));
            head.b1.iter_mut().for_each(|b| *b = rng::symmetric(&mut rng, 0.1));
            let batch: Vec<_> = (0..3).map(|_| example(random_input(&mut rng), rng::unit(&mut rng))).collect();
            let idx = rng::index_below(&mut rng, head.n_params());
            let analytic = *backward(&head, &batch).unwrap().params().nth(idx).unwrap();
            let mut plus = head.clone();
            *flat_param(&mut plus, idx) += step;
            let mut minus = head.clone();
            *flat_param(&mut minus, idx) -= step;
            let numeric = (reference_loss(&plus, &batch) - reference_loss(&minus, &batch)) / (2.0 * step);
            if analytic.abs() < 1e-8 {
                continue;
            }
            worst = worst.max(relative_error(analytic, numeric));
            checked += 1;
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn library_gradcheck_passes() {
        let report = gradient_check(42, 20, 1e-5).unwrap();
        assert_eq!(report.probes.len(), 20);
        assert!(report.max_relative_error <= 1e-4, "{}", report.max_relative_error);
    }

    #[test]
    fn single_example_is_memorized() {
        let ex = vec![example(crate::encoder::mock_encode("the boy takes a cookie").into_values(), 0.7)];
        let cfg = TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        };
        let out = train(&init_head(1), &ex, &[], &cfg).unwrap();
        assert_eq!(out.history.len(), 200);
        assert!(out.history.last().unwrap().train_mse < 1e-4);
    }

    #[test]
    fn sgd_loss_is_monotone_on_one_example() {
        let ex = vec![example(crate::encoder::mock_encode("stool tips over").into_values(), 0.9)];
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 1e-2,
            epochs: 100,
            ..TrainConfig::default()
        };
        let out = train(&init_head(6), &ex, &[], &cfg).unwrap();
        for w in out.history.windows(2) {
            assert!(w[1].train_mse <= w[0].train_mse);
        }
    }

    #[test]
    fn planted_sigmoid_task_is_learned() {
        let mut rng = rng::seeded(99);
        let w_star: Vec<f64> = (0..EMBEDDING_DIM).map(|_| rng::normal(&mut rng) * 3.0).collect();
        let vocab: Vec<String> = (0..60).map(|i| format!("word{i}")).collect();
        let examples: Vec<_> = (0..200)
            .map(|_| {
                let n = 5 + rng::index_below(&mut rng, 10);
                let text: Vec<&str> = (0..n).map(|_| vocab[rng::index_below(&mut rng, vocab.len())].as_str()).collect();
                let h = crate::encoder::mock_encode(&text.join(" ")).into_values();
                let s: f64 = h.iter().zip(&w_star).map(|(a, b)| a * b).sum();
                example(h, 1.0 / (1.0 + (-s).exp()))
            })
            .collect();
        let out = train(&init_head(0), &examples, &[], &TrainConfig::default()).unwrap();
        let final_mse = out.history.last().unwrap().train_mse;
        assert!(final_mse < 0.01, "train mse {final_mse}");
    }

    #[test]
    fn training_is_deterministic_and_selects_best_dev_epoch() {
        let mut rng = rng::seeded(5);
        let data: Vec<_> = (0..40).map(|_| example(random_input(&mut rng), rng::unit(&mut rng))).collect();
        let (tr, dev) = data.split_at(30);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let a = train(&init_head(2), tr, dev, &cfg).unwrap();
        let b = train(&init_head(2), tr, dev, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.head, b.head);
        let best = a
            .history
            .iter()
            .min_by(|x, y| x.dev_mse.unwrap().total_cmp(&y.dev_mse.unwrap()))
            .unwrap();
        assert_eq!(a.selected_epoch, best.epoch);
        let dev_pred: Vec<f64> = dev.iter().map(|e| forward(&a.head, &e.input).unwrap()).collect();
        let dev_t: Vec<f64> = dev.iter().map(|e| e.target).collect();
        assert!((mse_loss(&dev_pred, &dev_t).unwrap() - best.dev_mse.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = rng::seeded(5);
        let data: Vec<_> = (0..10).map(|_| example(random_input(&mut rng).iter().map(|v| v * 1e3).collect(), 1e3)).collect();
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 1e3,
            epochs: 50,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&init_head(1), &data, &[], &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn subject_prediction_examples() {
        let params = NormalizationParams::new(0.0, 30.0).unwrap();
        let mut head = RegressionHead::zeros(EMBEDDING_DIM);
        // hidden unit 0 passes h[0] through, so f(h) = h[0]
        head.w1[0] = 1.0;
        head.w2[0] = 1.0;
        let input = |v: f64| {
            let mut h = vec![0.0; EMBEDDING_DIM];
            h[0] = v;
            h
        };
        let three: BTreeMap<_, _> =
            [(TaskKind::Ctd, input(0.4)), (TaskKind::Pft, input(0.5)), (TaskKind::Sft, input(0.6))].into();
        assert!((predict_subject(&head, &three, &params, Aggregation::Mean).unwrap() - 15.0).abs() < 1e-12);
        let one: BTreeMap<_, _> = [(TaskKind::Ctd, input(1.2))].into();
        assert_eq!(predict_subject(&head, &one, &params, Aggregation::Mean).unwrap(), 30.0);
        let skew: BTreeMap<_, _> =
            [(TaskKind::Ctd, input(0.1)), (TaskKind::Pft, input(0.5)), (TaskKind::Sft, input(0.6))].into();
        assert!((predict_subject(&head, &skew, &params, Aggregation::Median).unwrap() - 15.0).abs() < 1e-12);
        assert!(predict_subject(&head, &BTreeMap::new(), &params, Aggregation::Mean).is_err());
    }

    #[test]
    fn identical_task_embeddings_match_single_task() {
        let head = init_head(8);
        let params = NormalizationParams::new(5.0, 29.0).unwrap();
        let h = crate::encoder::mock_encode("mother washing dishes").into_values();
        let all: BTreeMap<_, _> = TaskKind::ALL.iter().map(|&t| (t, h.clone())).collect();
        let single: BTreeMap<_, _> = [(TaskKind::Sft, h.clone())].into();
        let a = predict_subject(&head, &all, &params, Aggregation::Mean).unwrap();
        let b = predict_subject(&head, &single, &params, Aggregation::Mean).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.ckpt.json");
        let mut head = init_head(12);
        head.b1[3] = 0.1 + 0.2;
        head.b2 = -1.0 / 3.0;
        let norm = NormalizationParams::new(3.0, 30.0).unwrap();
        let ckpt = HeadCheckpoint::new(&head, norm, &TrainConfig::default(), Aggregation::Mean);
        ckpt.save(&path).unwrap();
        let loaded = HeadCheckpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.head().unwrap(), head);
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(json["version"], 1);
        assert_eq!(json["W1"].as_array().unwrap().len(), 64);
        assert_eq!(json["W1"][0].as_array().unwrap().len(), 768);
        assert_eq!(json["W2"].as_array().unwrap().len(), 1);
        assert_eq!(json["norm"]["y_min"], 3.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn predictions_stay_on_mmse_scale(seed in any::<u64>(), scale in 0.0f64..50.0, lo in 0.0f64..20.0) {
            let mut head = init_head(seed);
            head.b2 = scale - 25.0;
            let params = NormalizationParams::new(lo, lo + 10.0).unwrap();
            let mut rng = rng::seeded(seed);
            let inputs: BTreeMap<_, _> = TaskKind::ALL.iter().map(|&t| (t, random_input(&mut rng).iter().map(|v| v * scale).collect())).collect();
            let p = predict_subject(&head, &inputs, &params, Aggregation::Mean).unwrap();
            prop_assert!((0.0..=30.0).contains(&p));
        }
    }
}
