//! Binary classifier contract and the logistic-regression reference model.
//!
//! Anything that maps an image to a sigmoid score in `[0, 1]` implements
//! [`Scorer`]. Models that can also be (re)trained implement [`Trainer`].
//! [`ExternalScorer`] lets a separate process provide scores: it is invoked
//! with the path of a JSONL manifest as its last argument and must print one
//! `{"id": ..., "score": ...}` object per line on stdout.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{save_manifest, Dataset, Label};
use crate::error::{Error, Result};
use crate::seed::rng_for;

pub trait Scorer {
    /// Expected pixels per image.
    fn dim(&self) -> usize;

    fn predict(&self, pixels: &[f64]) -> Result<f64>;

    /// Scores for every record, in dataset order.
    fn predict_dataset(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        dataset.iter().map(|r| self.predict(&r.pixels)).collect()
    }
}

pub trait Trainer {
    type Model: Scorer + Clone;

    fn train(&self, dataset: &Dataset, hyper: &TrainHyper) -> Result<Self::Model>;

    /// Continues optimisation from `model`'s parameters.
    fn fine_tune(
        &self,
        model: &Self::Model,
        dataset: &Dataset,
        hyper: &TrainHyper,
    ) -> Result<Self::Model>;

    fn save(&self, model: &Self::Model, path: &Path) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    pub seed: u64,
    /// Share of the training data held out as the early-stopping split.
    pub val_fraction: f64,
    /// One gradient step per epoch over the whole fit split.
    pub full_batch: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 1e-4,
            max_epochs: 50,
            batch_size: 8,
            l2: 0.0,
            early_stop_patience: 10,
            early_stop_min_delta: 0.0,
            seed: 0,
            val_fraction: 0.1,
            full_batch: false,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 && !self.full_batch {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 {} must be finite and >= 0", self.l2));
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be >= 1".into());
        }
        if !(self.early_stop_min_delta >= 0.0 && self.early_stop_min_delta.is_finite()) {
            return bad("early_stop_min_delta must be finite and >= 0".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub stop_accuracy: f64,
}

/// Logistic regression on raw pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Epochs of optimisation behind the current parameters.
    pub trained_epochs: usize,
    pub history: Vec<EpochRecord>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean binary cross-entropy plus `l2 * |w|^2 / 2`, with its gradient.
///
/// Returns `(loss, grad_weights, grad_bias)`.
pub fn loss_and_gradient(
    weights: &[f64],
    bias: f64,
    rows: &[&[f64]],
    labels: &[f64],
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = rows.len().max(1) as f64;
    let mut grad = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    let mut loss = 0.0;
    for (x, &y) in rows.iter().zip(labels) {
        let z = dot(weights, x) + bias;
        loss += softplus(z) - y * z;
        let r = sigmoid(z) - y;
        grad_b += r;
        for (g, xi) in grad.iter_mut().zip(x.iter()) {
            *g += r * xi;
        }
    }
    let norm2: f64 = weights.iter().map(|w| w * w).sum();
    for (g, w) in grad.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    (loss / n + 0.5 * l2 * norm2, grad, grad_b / n)
}

impl RefModel {
    pub fn zeros(dim: usize) -> Self {
        RefModel {
            weights: vec![0.0; dim],
            bias: 0.0,
            trained_epochs: 0,
            history: Vec::new(),
        }
    }

    fn initial(dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "init");
        RefModel {
            weights: (0..dim).map(|_| rng.random_range(-1e-3..=1e-3)).collect(),
            ..RefModel::zeros(dim)
        }
    }

    pub fn logit(&self, pixels: &[f64]) -> f64 {
        dot(&self.weights, pixels) + self.bias
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile {
            format: MODEL_TAG.into(),
            version: MODEL_VERSION,
            dim: self.weights.len(),
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text)?;
        if f.format != MODEL_TAG || f.version != MODEL_VERSION {
            return Err(Error::Serde(format!(
                "unsupported model file {} v{}",
                f.format, f.version
            )));
        }
        if f.dim != f.model.weights.len() {
            return Err(Error::Serde(format!(
                "model declares {} weights but stores {}",
                f.dim,
                f.model.weights.len()
            )));
        }
        if f.model.weights.iter().any(|w| !w.is_finite()) || !f.model.bias.is_finite() {
            return Err(Error::Serde("non-finite model parameters".into()));
        }
        Ok(f.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

const MODEL_TAG: &str = "popbias-logistic";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    dim: usize,
    #[serde(flatten)]
    model: RefModel,
}

impl Scorer for RefModel {
    fn dim(&self) -> usize {
        self.weights.len()
    }

    fn predict(&self, pixels: &[f64]) -> Result<f64> {
        if pixels.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                got: pixels.len(),
            });
        }
        Ok(sigmoid(self.logit(pixels)))
    }
}

/// Fraction of records whose thresholded score matches the label.
pub fn accuracy(scores: &[f64], dataset: &Dataset) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter()
        .zip(dataset)
        .filter(|(&s, r)| Label::from_score(s) == r.label)
        .count();
    hits as f64 / dataset.len() as f64
}

pub fn train(dataset: &Dataset, hyper: &TrainHyper) -> Result<RefModel> {
    hyper.validate()?;
    optimise(
        RefModel::initial(dataset.pixel_count(), hyper.seed),
        dataset,
        hyper,
    )
}

pub fn fine_tune(model: &RefModel, dataset: &Dataset, hyper: &TrainHyper) -> Result<RefModel> {
    hyper.validate()?;
    if model.weights.len() != dataset.pixel_count() {
        return Err(Error::DimensionMismatch {
            expected: model.weights.len(),
            got: dataset.pixel_count(),
        });
    }
    optimise(model.clone(), dataset, hyper)
}

/// Record indices of the early-stopping split and the fitting split for a
/// dataset of `n` records. With a single record both splits hold it.
pub fn stop_split(n: usize, hyper: &TrainHyper) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(hyper.seed, "stop-split"));
    if n <= 1 {
        return (order.clone(), order);
    }
    let n_stop = ((hyper.val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (s, f) = order.split_at(n_stop);
    (s.to_vec(), f.to_vec())
}

/// Mini-batch gradient descent with early stopping on a held-out split.
/// Returns the snapshot with the best stop-split accuracy, the latest one
/// on ties; the starting parameters count as a candidate.
fn optimise(start: RefModel, dataset: &Dataset, hyper: &TrainHyper) -> Result<RefModel> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if !dataset.has_both_labels() {
        return Err(Error::SingleClass);
    }
    if hyper.max_epochs == 0 {
        return Ok(start);
    }

    let (stop_idx, fit_idx) = stop_split(dataset.len(), hyper);

    let records = dataset.records();
    let stop_acc = |m: &RefModel| {
        let hits = stop_idx
            .iter()
            .filter(|&&i| {
                Label::from_score(sigmoid(m.logit(&records[i].pixels))) == records[i].label
            })
            .count();
        hits as f64 / stop_idx.len() as f64
    };
    let fit_rows: Vec<&[f64]> = fit_idx
        .iter()
        .map(|&i| records[i].pixels.as_slice())
        .collect();
    let fit_labels: Vec<f64> = fit_idx.iter().map(|&i| records[i].label.as_f64()).collect();

    let mut model = start;
    let mut best_acc = stop_acc(&model);
    let mut best = model.clone();
    let mut stale = 0;
    let mut history = Vec::new();
    let epoch0 = model.history.last().map_or(0, |h| h.epoch);
    let batch = if hyper.full_batch {
        fit_idx.len()
    } else {
        hyper.batch_size.min(fit_idx.len())
    };
    let mut rng = rng_for(hyper.seed, "batches");
    let mut perm: Vec<usize> = (0..fit_idx.len()).collect();
    let mut grad = vec![0.0; model.weights.len()];

    for epoch in 1..=hyper.max_epochs {
        if !hyper.full_batch {
            perm.shuffle(&mut rng);
        }
        for chunk in perm.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for &k in chunk {
                let x = fit_rows[k];
                let r = sigmoid(model.logit(x)) - fit_labels[k];
                grad_b += r;
                for (g, xi) in grad.iter_mut().zip(x) {
                    *g += r * xi;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let lr = hyper.learning_rate;
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= lr * (g * inv + hyper.l2 * *w);
            }
            model.bias -= lr * grad_b * inv;
        }
        model.trained_epochs += 1;

        let (train_loss, _, _) =
            loss_and_gradient(&model.weights, model.bias, &fit_rows, &fit_labels, hyper.l2);
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                learning_rate: hyper.learning_rate,
            });
        }
        let acc = stop_acc(&model);
        history.push(EpochRecord {
            epoch: epoch0 + epoch,
            train_loss,
            stop_accuracy: acc,
        });
        // ties go to the later snapshot; only a real gain resets patience
        if acc >= best_acc {
            best = model.clone();
        }
        if acc > best_acc + hyper.early_stop_min_delta {
            best_acc = acc;
            stale = 0;
        } else {
            best_acc = best_acc.max(acc);
            stale += 1;
            if stale >= hyper.early_stop_patience {
                break;
            }
        }
    }

    best.history = model.history;
    best.history.extend(history);
    Ok(best)
}

/// Reference trainer backed by [`train`] and [`fine_tune`].
#[derive(Debug, Clone, Copy, Default)]
pub struct LogisticTrainer;

impl Trainer for LogisticTrainer {
    type Model = RefModel;

    fn train(&self, dataset: &Dataset, hyper: &TrainHyper) -> Result<RefModel> {
        train(dataset, hyper)
    }

    fn fine_tune(
        &self,
        model: &RefModel,
        dataset: &Dataset,
        hyper: &TrainHyper,
    ) -> Result<RefModel> {
        fine_tune(model, dataset, hyper)
    }

    fn save(&self, model: &RefModel, path: &Path) -> Result<()> {
        model.save(path)
    }
}

/// Scores produced by an external command.
#[derive(Debug, Clone)]
pub struct ExternalScorer {
    program: String,
    args: Vec<String>,
    dim: usize,
    height: usize,
    width: usize,
}

#[derive(Deserialize)]
struct ScoreLine {
    id: String,
    score: f64,
}

impl ExternalScorer {
    /// `command` is split on whitespace; the manifest path is appended.
    pub fn new(command: &str, height: usize, width: usize) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_owned);
        let program = parts
            .next()
            .ok_or_else(|| Error::InvalidParameter("empty scorer command".into()))?;
        Ok(ExternalScorer {
            program,
            args: parts.collect(),
            dim: height * width,
            height,
            width,
        })
    }

    fn run(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        if dataset.pixel_count() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: dataset.pixel_count(),
            });
        }
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let manifest = save_manifest(dataset, dir.path(), "request")?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(&manifest)
            .output()
            .map_err(|e| Error::External(format!("cannot run `{}`: {e}", self.program)))?;
        if !out.status.success() {
            return Err(Error::External(format!(
                "`{}` exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let text = String::from_utf8(out.stdout)
            .map_err(|_| Error::External("scorer output is not UTF-8".into()))?;
        let mut scores = HashMap::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let s: ScoreLine = serde_json::from_str(line)
                .map_err(|e| Error::External(format!("output line {}: {e}", i + 1)))?;
            if !(0.0..=1.0).contains(&s.score) {
                return Err(Error::External(format!(
                    "score {} for `{}` outside [0, 1]",
                    s.score, s.id
                )));
            }
            scores.insert(s.id, s.score);
        }
        dataset
            .iter()
            .map(|r| {
                scores
                    .get(&r.id)
                    .copied()
                    .ok_or_else(|| Error::External(format!("no score returned for `{}`", r.id)))
            })
            .collect()
    }
}

impl Scorer for ExternalScorer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, pixels: &[f64]) -> Result<f64> {
        let ds = Dataset::new(
            self.height,
            self.width,
            vec![crate::dataset::ImageRecord {
                id: "query".into(),
                pixels: pixels.to_vec(),
                label: Label::Awake,
                group: None,
            }],
        )?;
        Ok(self.run(&ds)?[0])
    }

    fn predict_dataset(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        self.run(dataset)
    }
}
