//! Training loop, AdamW, the warmup-cosine schedule and evaluation.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{flip_horizontal, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::{Binder, ParamStore};
use crate::tensor::{Precision, Tensor};

pub const METRICS_HEADER: &str = "epoch,loss,acc,lr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Warmup length in epochs.
    pub warmup: usize,
    pub seed: u64,
    pub precision: Precision,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Random horizontal flips.
    pub flip: bool,
    /// Stop after the first epoch whose accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch: 16,
            lr: 5e-3,
            warmup: 5,
            seed: 0,
            precision: Precision::Double,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            flip: false,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("train config", m));
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be positive".into());
        }
        if self.warmup > self.epochs {
            return bad(format!("warmup {} exceeds epochs {}", self.warmup, self.epochs));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative".into());
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    /// Learning rate of optimizer step `step` (zero-based).
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 || step >= self.total_steps {
            return 0.0;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Decoupled weight decay Adam. Decay applies to parameters of rank ≥ 2.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        AdamW {
            betas,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        precision: Precision,
    ) -> Result<()> {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let p = params.get(&name)?;
            let g = grads.get(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if g.numel() != p.numel() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            let mut data = p.to_vec();
            for (i, w) in data.iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= lr * decay * *w;
                *w = precision.round(*w - lr * mhat / (vhat.sqrt() + self.eps));
            }
            let shape = p.shape().to_vec();
            params.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Accuracy on the training set with end-of-epoch weights.
    pub acc: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

impl EpochMetrics {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.loss, self.acc, self.lr)
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(',').collect();
        let bad = || Error::invalid("metrics", format!("malformed line `{line}`"));
        if parts.len() != 4 {
            return Err(bad());
        }
        Ok(EpochMetrics {
            epoch: parts[0].parse().map_err(|_| bad())?,
            loss: parts[1].parse().map_err(|_| bad())?,
            acc: parts[2].parse().map_err(|_| bad())?,
            lr: parts[3].parse().map_err(|_| bad())?,
        })
    }
}

/// Append-only CSV metrics log, flushed after every row.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    /// Creates (truncating) `path` and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        file.flush()?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(MetricsLog { file })
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.file, "{}", m.csv_line())?;
        self.file.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<EpochMetrics>> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        match lines.next() {
            Some(Ok(h)) if h == METRICS_HEADER => {}
            _ => return Err(Error::invalid("metrics", format!("missing header `{METRICS_HEADER}`"))),
        }
        lines.map(|l| EpochMetrics::parse_csv_line(&l?)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy, mean cross-entropy and confusion counts over `data`.
pub fn evaluate(model: &Model, data: &Dataset, precision: Precision) -> Result<EvalReport> {
    let k = model.spec().num_classes;
    if data.num_classes > k {
        return Err(Error::Dataset(format!(
            "dataset has {} classes but the model predicts {k}",
            data.num_classes
        )));
    }
    let per_sample = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let g = Graph::inference(precision);
            let binder = Binder::frozen(&g, model.params());
            let x = g.constant(data.image(i)?);
            let out = model.forward_sample(&binder, &x)?;
            let loss = g.cross_entropy(&out.logits, data.labels[i])?;
            Ok((argmax(out.logits.data()), loss.data()[0]))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = vec![vec![0; k]; k];
    let mut correct = 0;
    let mut loss = 0.0;
    for (i, (pred, l)) in per_sample.into_iter().enumerate() {
        let truth = data.labels[i];
        confusion[truth][pred] += 1;
        correct += usize::from(truth == pred);
        loss += l;
    }
    Ok(EvalReport {
        correct,
        total: data.len(),
        mean_loss: loss / data.len().max(1) as f64,
        confusion,
    })
}

struct SampleResult {
    loss: f64,
    grads: BTreeMap<String, Tensor>,
}

fn sample_gradients(model: &Model, image: Tensor, label: usize, precision: Precision) -> Result<SampleResult> {
    let g = Graph::new(precision);
    let binder = Binder::trainable(&g, model.params());
    let x = g.constant(image);
    let out = model.forward_sample(&binder, &x)?;
    let loss = g.cross_entropy(&out.logits, label)?;
    let grads = g.backward(&loss)?;
    Ok(SampleResult {
        loss: loss.data()[0],
        grads: binder.collect_gradients(&grads)?,
    })
}

/// Trains `model` in place, calling `on_epoch` after every epoch.
///
/// Per-sample gradients are computed in parallel and summed in sample
/// order, so a fixed seed gives bit-identical runs. The logged accuracy
/// is measured with parameters rounded to `f32`, exactly as a saved
/// checkpoint would reload them.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    if data.num_classes > model.spec().num_classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes but the model predicts {}",
            data.num_classes,
            model.spec().num_classes
        )));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch);
    let schedule = Schedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(cfg.betas, cfg.eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.params().clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch) {
            let flips: Vec<bool> = batch.iter().map(|_| cfg.flip && rng.gen_bool(0.5)).collect();
            let results = batch
                .par_iter()
                .zip(flips.par_iter())
                .map(|(&i, &flip)| {
                    let image = data.image(i)?;
                    let image = if flip { flip_horizontal(&image)? } else { image };
                    sample_gradients(model, image, data.labels[i], cfg.precision)
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let batch_loss = results.iter().map(|r| r.loss).sum::<f64>() * scale;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let mut summed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in &results {
                for (name, g) in &r.grads {
                    let acc = summed.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
                    for (a, v) in acc.iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            let grads = summed
                .into_iter()
                .map(|(name, v)| {
                    let shape = params.get(&name)?.shape().to_vec();
                    Ok((name, Tensor::new(&shape, v.into_iter().map(|x| x * scale).collect())?))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            lr = schedule.lr(step);
            opt.update(&mut params, &grads, lr, cfg.precision)?;
            model.set_params(params.clone())?;
            epoch_loss += batch_loss * batch.len() as f64;
            step += 1;
        }
        let snapshot = Model::with_params(model.spec().clone(), model.params().quantized_f32())?;
        let acc = evaluate(&snapshot, data, cfg.precision)?.accuracy();
        let metrics = EpochMetrics {
            epoch,
            loss: epoch_loss / data.len() as f64,
            acc,
            lr,
        };
        on_epoch(&metrics)?;
        history.push(metrics);
        if cfg.target_accuracy.is_some_and(|t| acc >= t) {
            break;
        }
    }
    Ok(history)
}
