//! Optimization: gradient clipping, Adam, mini-batch steps and the epoch
//! loop with validation-based early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, TensorError};
use crate::data::SearchTask;
use crate::error::{Error, Result};
use crate::eval::{evaluate_ranking, evaluate_suggestion, Background};
use crate::model::{encode_task, CarsModel, EncodedTask, LossConfig};
use crate::ranker::{NormMode, RunningStats};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 50,
            patience: 5,
            clip_norm: 5.0,
            seed: 13,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.loss;
        let ok = self.lr > 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && self.patience >= 1
            && self.clip_norm > 0.0
            && l.shared_l2 >= 0.0
            && l.private_l2 >= 0.0
            && l.entropy >= 0.0
            && (0.0..1.0).contains(&l.dropout);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

/// Scales every gradient by `threshold / norm` when the global L2 norm
/// exceeds `threshold`. Returns the scale applied.
pub fn clip_gradients(params: &mut ParamStore, threshold: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > threshold && norm > 0.0 {
        let scale = threshold / norm;
        for p in params.iter_mut() {
            p.grad.scale_assign(scale);
        }
        scale
    } else {
        1.0
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update from the gradients stored in `params`.
    pub fn update(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                *w -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Loss values of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub total: f64,
    pub ranker: f64,
    pub recom: f64,
    pub l2: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

fn diverged(e: TensorError, step: u64) -> Error {
    match e {
        TensorError::NonFinite { op } => Error::Diverged(format!("non-finite value from `{op}` at step {step}")),
        other => other.into(),
    }
}

/// Owns the model and optimizer for step-by-step training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: CarsModel,
    pub optimizer: Adam,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: CarsModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(&model.params, config.lr);
        Ok(Self {
            model,
            optimizer,
            config,
        })
    }

    /// One forward/backward pass over `batch` and one Adam update.
    pub fn step(&mut self, batch: &[&EncodedTask]) -> Result<StepStats> {
        let seed = self.config.seed ^ self.optimizer.step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let (stats, grads, moments) = {
            let mut tape = Tape::training(&self.model.params, seed);
            let step = self.optimizer.step + 1;
            let loss = self
                .model
                .batch_loss(&mut tape, batch, &self.config.loss, NormMode::Batch)
                .map_err(|e| diverged(e, step))?;
            let stats = StepStats {
                total: tape.scalar(loss.total),
                ranker: tape.scalar(loss.ranker),
                recom: tape.scalar(loss.recom),
                l2: tape.scalar(loss.l2),
                entropy: tape.scalar(loss.entropy),
                grad_norm: 0.0,
                clip_scale: 1.0,
            };
            if !stats.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {} at step {} (ranker {}, suggestion {}, l2 {}, entropy {})",
                    stats.total,
                    self.optimizer.step + 1,
                    stats.ranker,
                    stats.recom,
                    stats.l2,
                    stats.entropy
                )));
            }
            let grads = tape.backward(loss.total).map_err(|e| diverged(e, step))?;
            (stats, grads, loss.moments)
        };
        let params = &mut self.model.params;
        params.zero_grad();
        params.accumulate(&grads);
        let grad_norm = params.grad_norm();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite gradient norm at step {}",
                self.optimizer.step + 1
            )));
        }
        let clip_scale = clip_gradients(params, self.config.clip_norm);
        self.optimizer.update(params);
        self.model.update_norm_stats(&moments);
        Ok(StepStats {
            grad_norm,
            clip_scale,
            ..stats
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub mean_ranker: f64,
    pub mean_recom: f64,
    pub val_map: f64,
    pub val_candidate_mrr: f64,
    pub val_metric: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
    pub skipped_tasks: usize,
}

/// Mean of validation MAP and candidate-MRR.
pub fn validation_metric(
    model: &CarsModel,
    vocab: &Vocabulary,
    val: &[SearchTask],
    val_encoded: &[EncodedTask],
    background: &Background,
) -> Result<(f64, f64, f64)> {
    let map = evaluate_ranking(model, val_encoded)?.overall.map;
    let mrr = evaluate_suggestion(model, vocab, val, background)?.overall.candidate_mrr;
    Ok((map, mrr, 0.5 * (map + mrr)))
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub history: TrainHistory,
}

/// Shuffled mini-batch epochs; after each epoch the validation metric is
/// computed, the best parameters kept, and training stops after `patience`
/// epochs without improvement. The returned trainer holds the best model.
pub fn train(
    model: CarsModel,
    vocab: &Vocabulary,
    train_tasks: &[SearchTask],
    val_tasks: &[SearchTask],
    config: TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_tasks.is_empty() || val_tasks.is_empty() {
        return Err(Error::Data("training and validation splits must be nonempty".into()));
    }
    let encoded: Vec<EncodedTask> = train_tasks
        .iter()
        .map(|t| encode_task(t, vocab))
        .filter(|t| t.queries.len() >= 2)
        .collect();
    let skipped = train_tasks.len() - encoded.len();
    if encoded.is_empty() {
        return Err(Error::Data("no training task has two or more queries".into()));
    }
    let val_encoded: Vec<EncodedTask> = val_tasks.iter().map(|t| encode_task(t, vocab)).collect();
    let background = Background::build(train_tasks);
    let mut trainer = Trainer::new(model, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(trainer.config.seed);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut best: Option<(f64, ParamStore, Vec<RunningStats>, usize)> = None;
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_metric: f64::NEG_INFINITY,
        stopped_early: false,
        skipped_tasks: skipped,
    };
    let mut stale = 0;
    for epoch in 1..=trainer.config.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut ranker, mut recom, mut steps) = (0.0, 0.0, 0.0, 0u64);
        for chunk in order.chunks(trainer.config.batch_size) {
            let batch: Vec<&EncodedTask> = chunk.iter().map(|&i| &encoded[i]).collect();
            let s = trainer.step(&batch)?;
            loss += s.total;
            ranker += s.ranker;
            recom += s.recom;
            steps += 1;
        }
        let (val_map, val_mrr, metric) =
            validation_metric(&trainer.model, vocab, val_tasks, &val_encoded, &background)?;
        let improved = best.as_ref().map_or(true, |b| metric > b.0);
        if improved {
            best = Some((metric, trainer.model.params.clone(), trainer.model.bn_stats.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
        }
        let n = steps as f64;
        let record = EpochRecord {
            epoch,
            steps: trainer.optimizer.step,
            mean_loss: loss / n,
            mean_ranker: ranker / n,
            mean_recom: recom / n,
            val_map,
            val_candidate_mrr: val_mrr,
            val_metric: metric,
            improved,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val MAP {val_map:.4} cand-MRR {val_mrr:.4}",
            record.mean_loss
        );
        on_epoch(&record);
        history.epochs.push(record);
        if stale >= trainer.config.patience {
            history.stopped_early = epoch < trainer.config.epochs;
            break;
        }
    }
    if let Some((metric, params, stats, epoch)) = best {
        trainer.model.params = params;
        trainer.model.bn_stats = stats;
        history.best_metric = metric;
        history.best_epoch = epoch;
    }
    Ok(TrainOutcome { trainer, history })
}
