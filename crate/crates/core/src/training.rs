//! Vanilla and PGD adversarial training.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::model::{argmax, Model, ModelError};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::tensor::{Graph, Tensor, TensorError};

/// Slack allowed when re-checking the ball constraint after projection.
pub const CONSTRAINT_SLACK: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f32,
    },
    #[error("non-finite input gradient during PGD step {step}")]
    NonFiniteGradient { step: usize },
    #[error("sample {sample}: perturbation norm {norm} exceeds epsilon {epsilon}")]
    ConstraintViolation {
        sample: usize,
        norm: f64,
        epsilon: f64,
    },
    #[error("writing history to {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    Linf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ATConfig {
    pub norm: Norm,
    /// Radius in pixel units, images in `[0, 1]`.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

pub const DEFAULT_PGD_STEPS: usize = 10;

impl ATConfig {
    /// `steps = 10`, `step_size = 2.5 * epsilon / steps`, random start.
    pub fn new(norm: Norm, epsilon: f64) -> Self {
        Self {
            norm,
            epsilon,
            steps: DEFAULT_PGD_STEPS,
            step_size: 2.5 * epsilon / DEFAULT_PGD_STEPS as f64,
            random_start: true,
        }
    }

    pub fn l2(epsilon: f64) -> Self {
        Self::new(Norm::L2, epsilon)
    }

    pub fn linf(epsilon: f64) -> Self {
        Self::new(Norm::Linf, epsilon)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "epsilon {} must be finite and >= 0",
                self.epsilon
            )));
        }
        if self.steps > 0 && self.epsilon > 0.0 && !(self.step_size > 0.0) {
            return Err(TrainError::InvalidConfig(
                "pgd step size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mean-loss gradient with respect to the input batch.
pub fn input_gradient(
    model: &Model<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
) -> Result<(f32, Vec<f32>), TrainError> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let xi = g.leaf(x.clone().with_grad());
    let a = model.logits(&mut g, &p, xi)?;
    let loss = g.softmax_cross_entropy(a, labels)?;
    let grads = g.gradients(loss, &[xi], false)?;
    Ok((g.item(loss), g.data(grads[0]).to_vec()))
}

fn project(delta: &mut [f32], norm: Norm, eps: f64) {
    match norm {
        Norm::L2 => {
            let n = delta
                .iter()
                .map(|&d| (d as f64) * (d as f64))
                .sum::<f64>()
                .sqrt();
            if n > eps {
                let s = eps / n;
                delta.iter_mut().for_each(|d| *d = (*d as f64 * s) as f32);
            }
        }
        Norm::Linf => {
            let e = eps as f32;
            delta.iter_mut().for_each(|d| *d = d.clamp(-e, e));
        }
    }
}

fn random_start<R: Rng>(delta: &mut [f32], norm: Norm, eps: f64, rng: &mut R) {
    match norm {
        Norm::L2 => {
            let dir: Vec<f64> = (0..delta.len())
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let len = dir
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            let radius = eps * rng.gen::<f64>().powf(1.0 / delta.len() as f64);
            for (d, v) in delta.iter_mut().zip(dir) {
                *d = (v / len * radius) as f32;
            }
        }
        Norm::Linf => delta
            .iter_mut()
            .for_each(|d| *d = rng.gen_range(-eps..=eps) as f32),
    }
}

/// Per-sample distance between `adv` and `clean` in the configured norm.
pub fn perturbation_norms(clean: &[f32], adv: &[f32], per_sample: usize, norm: Norm) -> Vec<f64> {
    clean
        .chunks(per_sample)
        .zip(adv.chunks(per_sample))
        .map(|(c, a)| {
            let diffs = c.iter().zip(a).map(|(&c, &a)| (a as f64 - c as f64).abs());
            match norm {
                Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
                Norm::Linf => diffs.fold(0.0, f64::max),
            }
        })
        .collect()
}

/// Projected gradient ascent on the cross-entropy. Each step moves along the
/// per-sample normalized gradient (sign for `Linf`), projects onto the
/// epsilon-ball and clips to `[0, 1]`.
pub fn pgd_attack<R: Rng>(
    model: &Model<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    cfg: &ATConfig,
    rng: &mut R,
) -> Result<Tensor<f32>, TrainError> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(images.clone());
    }
    let clean = images.data();
    let per = clean.len() / images.shape()[0].max(1);
    let mut delta = vec![0f32; clean.len()];
    if cfg.random_start {
        for d in delta.chunks_mut(per) {
            random_start(d, cfg.norm, cfg.epsilon, rng);
        }
    }
    let apply = |delta: &[f32]| -> Vec<f32> {
        clean
            .iter()
            .zip(delta)
            .map(|(&x, &d)| (x + d).clamp(0.0, 1.0))
            .collect()
    };
    let mut adv = apply(&delta);
    for step in 0..cfg.steps {
        let x = Tensor::new(images.shape().to_vec(), adv.clone())?;
        let (_, grad) = input_gradient(model, &x, labels)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { step });
        }
        for ((d, g), (c, a)) in delta
            .chunks_mut(per)
            .zip(grad.chunks(per))
            .zip(clean.chunks(per).zip(adv.chunks(per)))
        {
            // Continue from the clipped point.
            for ((d, &c), &a) in d.iter_mut().zip(c).zip(a) {
                *d = a - c;
            }
            match cfg.norm {
                Norm::L2 => {
                    let n = g
                        .iter()
                        .map(|&v| (v as f64) * (v as f64))
                        .sum::<f64>()
                        .sqrt();
                    if n > 0.0 {
                        let s = cfg.step_size / n;
                        for (d, &v) in d.iter_mut().zip(g) {
                            *d += (v as f64 * s) as f32;
                        }
                    }
                }
                Norm::Linf => {
                    let s = cfg.step_size as f32;
                    for (d, &v) in d.iter_mut().zip(g) {
                        if v != 0.0 {
                            *d += s * v.signum();
                        }
                    }
                }
            }
            project(d, cfg.norm, cfg.epsilon);
        }
        adv = apply(&delta);
    }
    for (sample, norm) in perturbation_norms(clean, &adv, per, cfg.norm)
        .into_iter()
        .enumerate()
    {
        if norm > cfg.epsilon + CONSTRAINT_SLACK {
            return Err(TrainError::ConstraintViolation {
                sample,
                norm,
                epsilon: cfg.epsilon,
            });
        }
    }
    Ok(Tensor::new(images.shape().to_vec(), adv)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub at: Option<ATConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(1e-3),
            at: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub robust_acc: Option<f64>,
}

pub type History = Vec<EpochRecord>;

/// One optimizer step on the mean cross-entropy of `(x, labels)`. Returns
/// the loss and the number of correct predictions.
fn train_step(
    model: &mut Model<f32>,
    opt: &mut OptimizerState<f32>,
    x: Tensor<f32>,
    labels: &[usize],
) -> Result<(f32, usize), TrainError> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let xi = g.leaf(x);
    let a = model.logits(&mut g, &p, xi)?;
    if g.data(a).iter().any(|v| !v.is_finite()) {
        return Ok((f32::NAN, 0));
    }
    let loss = g.softmax_cross_entropy(a, labels)?;
    let k = model.num_classes();
    let correct = g
        .data(a)
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    let value = g.item(loss);
    if !value.is_finite() {
        return Ok((value, correct));
    }
    g.backward(loss)?;
    let ids = p.ids().to_vec();
    let mut params = model.params_mut();
    for (t, id) in params.iter_mut().zip(ids) {
        t.grad = g.grad(id).map(<[f32]>::to_vec);
    }
    opt.step(&mut params)?;
    Ok((value, correct))
}

/// Trains in place. With `cfg.at` set, every step is taken on PGD outputs.
/// `test` enables per-epoch test (and, with AT, robust) accuracy.
pub fn train(
    model: &mut Model<f32>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<History, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::InvalidConfig(
            "batch size must be positive".into(),
        ));
    }
    if let Some(at) = &cfg.at {
        at.validate()?;
    }
    if train.shape != model.spec().input_shape {
        return Err(TrainError::InvalidConfig(format!(
            "dataset shape {:?} does not match model input {:?}",
            train.shape,
            model.spec().input_shape
        )));
    }
    if train.num_classes > model.num_classes() {
        return Err(TrainError::InvalidConfig(format!(
            "dataset has {} classes, model has {}",
            train.num_classes,
            model.num_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = train.gather(idx);
            let x = match &cfg.at {
                Some(at) => pgd_attack(model, &x, &labels, at, &mut rng)?,
                None => x,
            };
            let (loss, c) = train_step(model, &mut opt, x, &labels)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, batch, loss });
            }
            loss_sum += loss as f64 * idx.len() as f64;
            correct += c;
        }
        let m = train.len().max(1) as f64;
        let test_acc = test
            .map(|t| evaluate(model, t, None, cfg.seed))
            .transpose()?;
        let robust_acc = match (test, &cfg.at) {
            (Some(t), Some(at)) => Some(evaluate(model, t, Some(at), cfg.seed)?),
            _ => None,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train_acc {:.4} test_acc {:?} robust_acc {:?}",
            loss_sum / m,
            correct as f64 / m,
            test_acc,
            robust_acc
        );
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / m,
            train_acc: correct as f64 / m,
            test_acc,
            robust_acc,
        });
    }
    Ok(history)
}

pub const EVAL_CHUNK: usize = 256;

/// Fraction of correct argmax predictions, under PGD when `at` is given.
pub fn evaluate(
    model: &Model<f32>,
    ds: &Dataset,
    at: Option<&ATConfig>,
    seed: u64,
) -> Result<f64, TrainError> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, labels) = ds.gather(chunk);
        let x = match at {
            Some(at) => pgd_attack(model, &x, &labels, at, &mut rng)?,
            None => x,
        };
        let pred = model.predict(&x)?;
        correct += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub fn write_history_csv(history: &History, path: &Path) -> Result<(), TrainError> {
    let wrap = |source| TrainError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    for rec in history {
        w.serialize(rec).map_err(wrap)?;
    }
    w.flush().map_err(|e| wrap(e.into()))?;
    Ok(())
}
