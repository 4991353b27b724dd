//! Diagnostic-group classification: a one-vs-rest linear SVM over standardized
//! acoustic + readability features, a multinomial logistic model over text
//! embeddings, and a weighted soft-voting ensemble of the two.
//!
//! Labels are indices into a fixed class order (normally HC, MCI, Dementia).
//! Wherever an argmax is taken, ties go to the class listed first.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::StandardizationParams;
use crate::manifest::ClassLabel;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            epochs: 200,
            seed: 42,
        }
    }
}

/// One weight vector and bias per class, in class order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvmModel {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub config: SvmConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedClfConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for EmbedClfConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 300,
            seed: 42,
        }
    }
}

/// Multinomial logistic regression: `softmax(W h + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedClassifierModel {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub config: EmbedClfConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub w_svm: f64,
    pub w_text: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { w_svm: 0.6, w_text: 0.4 }
    }
}

impl EnsembleConfig {
    pub fn new(w_svm: f64, w_text: f64) -> Result<Self> {
        let cfg = Self { w_svm, w_text };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_svm >= 0.0 && self.w_text >= 0.0) || (self.w_svm + self.w_text - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "ensemble weights must be non-negative and sum to 1, got {} + {}",
                self.w_svm, self.w_text
            )));
        }
        Ok(())
    }
}

/// Index of the largest entry; the first wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_training_set(n_rows: usize, labels: &[usize], n_classes: usize) -> Result<()> {
    if n_rows != labels.len() {
        return Err(Error::arg(format!("{n_rows} rows vs {} labels", labels.len())));
    }
    if n_rows == 0 {
        return Err(Error::arg("empty training set"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::arg(format!("label index {bad} outside {n_classes} classes")));
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::DegenerateLabels(format!("all {n_rows} training labels are class {first}")));
    }
    Ok(())
}

fn check_dims(rows: &[Vec<f64>]) -> Result<usize> {
    let dim = rows.first().map_or(0, Vec::len);
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            got: r.len(),
        });
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature value".into()));
    }
    Ok(dim)
}

/// L2-regularized hinge objective of one binary problem, with the bias
/// treated as the weight of a constant feature:
/// `λ/2 (|w|² + b²) + mean(max(0, 1 - y (w·x + b)))`.
pub fn pegasos_objective(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[f64], lambda: f64) -> f64 {
    let reg = 0.5 * lambda * (dot(w, w) + b * b);
    let hinge: f64 = xs.iter().zip(ys).map(|(x, y)| (1.0 - y * (dot(w, x) + b)).max(0.0)).sum();
    reg + hinge / xs.len() as f64
}

/// Pegasos over one binary problem (`ys` in {-1, +1}). Every class's problem
/// uses the same visiting order, so relabeling classes only permutes models.
fn pegasos_binary(xs: &[Vec<f64>], ys: &[f64], cfg: &SvmConfig) -> (Vec<f64>, f64) {
    let dim = xs[0].len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let radius = 1.0 / cfg.lambda.sqrt();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut shuffle_rng = rng::seeded(cfg.seed);
    let mut t = 0u64;
    for _ in 0..cfg.epochs {
        rng::shuffle(&mut shuffle_rng, &mut order);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (cfg.lambda * t as f64);
            let margin = ys[i] * (dot(&w, &xs[i]) + b);
            let decay = 1.0 - eta * cfg.lambda;
            w.iter_mut().for_each(|v| *v *= decay);
            b *= decay;
            if margin < 1.0 {
                for (wv, xv) in w.iter_mut().zip(&xs[i]) {
                    *wv += eta * ys[i] * xv;
                }
                b += eta * ys[i];
            }
            let norm = (dot(&w, &w) + b * b).sqrt();
            if norm > radius {
                let s = radius / norm;
                w.iter_mut().for_each(|v| *v *= s);
                b *= s;
            }
        }
    }
    (w, b)
}

/// One-vs-rest Pegasos. `labels[i]` indexes the class order; `n_classes` is
/// its length.
pub fn train_svm(features: &[Vec<f64>], labels: &[usize], n_classes: usize, cfg: &SvmConfig) -> Result<LinearSvmModel> {
    check_training_set(features.len(), labels, n_classes)?;
    check_dims(features)?;
    if !(cfg.lambda > 0.0) || cfg.epochs == 0 {
        return Err(Error::Config("svm lambda and epochs must be positive".into()));
    }
    let mut weights = Vec::with_capacity(n_classes);
    let mut biases = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let ys: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
        let (w, b) = pegasos_binary(features, &ys, cfg);
        weights.push(w);
        biases.push(b);
    }
    Ok(LinearSvmModel {
        weights,
        biases,
        config: *cfg,
    })
}

impl LinearSvmModel {
    pub fn n_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn margins(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::arg(format!("svm expects {} features, got {}", self.dim(), x.len())));
        }
        Ok(self.weights.iter().zip(&self.biases).map(|(w, b)| dot(w, x) + b).collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.margins(x)?))
    }

    /// Objective of each one-vs-rest problem at the current weights.
    pub fn objectives(&self, features: &[Vec<f64>], labels: &[usize]) -> Vec<f64> {
        (0..self.n_classes())
            .map(|c| {
                let ys: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
                pegasos_objective(&self.weights[c], self.biases[c], features, &ys, self.config.lambda)
            })
            .collect()
    }
}

/// Softmax over the per-class margins.
pub fn svm_probs(model: &LinearSvmModel, x: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax(&model.margins(x)?))
}

/// Mean cross-entropy of the logistic model and its gradient.
pub fn cross_entropy_and_grad(
    weights: &[Vec<f64>],
    biases: &[f64],
    xs: &[Vec<f64>],
    labels: &[usize],
) -> (f64, Vec<Vec<f64>>, Vec<f64>) {
    let k = weights.len();
    let n = xs.len() as f64;
    let mut gw = vec![vec![0.0; weights[0].len()]; k];
    let mut gb = vec![0.0; k];
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(labels) {
        let logits: Vec<f64> = weights.iter().zip(biases).map(|(w, b)| dot(w, x) + b).collect();
        let p = softmax(&logits);
        loss -= p[y].max(f64::MIN_POSITIVE).ln() / n;
        for c in 0..k {
            let d = (p[c] - if c == y { 1.0 } else { 0.0 }) / n;
            gb[c] += d;
            if d != 0.0 {
                for (g, xv) in gw[c].iter_mut().zip(x) {
                    *g += d * xv;
                }
            }
        }
    }
    (loss, gw, gb)
}

/// Full-batch gradient descent from zero weights.
pub fn train_embed_clf(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    cfg: &EmbedClfConfig,
) -> Result<EmbedClassifierModel> {
    check_training_set(embeddings.len(), labels, n_classes)?;
    let dim = check_dims(embeddings)?;
    if !(cfg.learning_rate > 0.0) || cfg.epochs == 0 {
        return Err(Error::Config("classifier learning rate and epochs must be positive".into()));
    }
    let mut weights = vec![vec![0.0; dim]; n_classes];
    let mut biases = vec![0.0; n_classes];
    for epoch in 1..=cfg.epochs {
        let (loss, gw, gb) = cross_entropy_and_grad(&weights, &biases, embeddings, labels);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        for (w, g) in weights.iter_mut().zip(&gw) {
            for (wv, gv) in w.iter_mut().zip(g) {
                *wv -= cfg.learning_rate * gv;
            }
        }
        for (b, g) in biases.iter_mut().zip(&gb) {
            *b -= cfg.learning_rate * g;
        }
    }
    Ok(EmbedClassifierModel {
        weights,
        biases,
        config: *cfg,
    })
}

pub fn embed_probs(model: &EmbedClassifierModel, h: &[f64]) -> Result<Vec<f64>> {
    let dim = model.weights.first().map_or(0, Vec::len);
    if h.len() != dim {
        return Err(Error::arg(format!("classifier expects {dim}-d embeddings, got {}", h.len())));
    }
    let logits: Vec<f64> = model.weights.iter().zip(&model.biases).map(|(w, b)| dot(w, h) + b).collect();
    Ok(softmax(&logits))
}

fn check_probability_vector(name: &str, p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::arg(format!("{name} is not a probability vector: {p:?}")));
    }
    Ok(())
}

/// Soft vote: `w_svm · p_svm + w_text · p_text`, then argmax.
pub fn ensemble_predict(p_svm: &[f64], p_text: &[f64], cfg: &EnsembleConfig) -> Result<(usize, Vec<f64>)> {
    cfg.validate()?;
    if p_svm.len() != p_text.len() {
        return Err(Error::arg(format!("{} vs {} class probabilities", p_svm.len(), p_text.len())));
    }
    check_probability_vector("svm probabilities", p_svm)?;
    check_probability_vector("text probabilities", p_text)?;
    let combined: Vec<f64> = p_svm.iter().zip(p_text).map(|(a, b)| cfg.w_svm * a + cfg.w_text * b).collect();
    Ok((argmax(&combined), combined))
}

/// Class order in use: the three diagnostic groups, or HC vs impaired when
/// `binary` is set (MCI folds into Dementia).
pub fn class_order(binary: bool) -> Vec<ClassLabel> {
    if binary {
        vec![ClassLabel::Hc, ClassLabel::Dementia]
    } else {
        ClassLabel::DIAGNOSTIC.to_vec()
    }
}

pub fn label_index(label: ClassLabel, order: &[ClassLabel]) -> Result<usize> {
    let label = if order.len() == 2 && label == ClassLabel::Mci {
        ClassLabel::Dementia
    } else {
        label
    };
    order
        .iter()
        .position(|&c| c == label)
        .ok_or_else(|| Error::arg(format!("label {} is not in the class order", label.as_str())))
}

/// On-disk classifier checkpoint (`clf.ckpt.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierCheckpoint {
    pub version: u32,
    pub svm: LinearSvmModel,
    pub embed_clf: EmbedClassifierModel,
    pub standardizer: StandardizationParams,
    pub ensemble: EnsembleConfig,
    pub class_order: Vec<ClassLabel>,
}

impl ClassifierCheckpoint {
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
        ckpt.ensemble.validate()?;
        Ok(ckpt)
    }
}
