//! Pointwise click prediction: intent composition, matching features and a
//! batch-normalized maxout network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchMoments, NormStats, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

pub const PROB_CLAMP: f64 = 1e-7;
pub const BN_MOMENTUM: f64 = 0.9;

/// Running batch-norm statistics for one maxout layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &BatchMoments, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

/// Statistics used by the batch-norm layers.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    Batch,
    Running(&'a [RunningStats]),
}

#[derive(Clone, Debug)]
pub struct MaxoutLayer {
    /// `(width * pool) x input`; no bias since batch norm follows.
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
    pub pool: usize,
}

#[derive(Clone, Debug)]
pub struct RankerHead {
    pub shared: ParamId,
    pub private: ParamId,
    pub query_proj: ParamId,
    pub bias: ParamId,
    pub layers: Vec<MaxoutLayer>,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
    pub hidden: usize,
}

impl RankerHead {
    /// `shared` is the `l_h x context_dim` matrix common to both heads.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        shared: ParamId,
        context_dim: usize,
        hidden: usize,
        pool: usize,
        rng: &mut R,
    ) -> Self {
        let private = store.add_uniform("ranker.private", hidden, context_dim, rng);
        let query_proj = store.add_uniform("ranker.query_proj", hidden, 2 * hidden, rng);
        let bias = store.add("ranker.bias", Tensor::zeros(hidden, 1));
        let widths = maxout_widths(hidden);
        let mut input = feature_dim(hidden);
        let mut layers = Vec::with_capacity(widths.len());
        for (k, &width) in widths.iter().enumerate() {
            let rows = width * pool;
            layers.push(MaxoutLayer {
                weight: store.add_uniform(format!("ranker.maxout{k}.w"), rows, input, rng),
                gamma: store.add(format!("ranker.maxout{k}.gamma"), Tensor::filled(rows, 1, 1.0)),
                beta: store.add(format!("ranker.maxout{k}.beta"), Tensor::zeros(rows, 1)),
                width,
                pool,
            });
            input = width;
        }
        Self {
            shared,
            private,
            query_proj,
            bias,
            layers,
            out_weight: store.add_uniform("ranker.out.w", 1, input, rng),
            out_bias: store.add("ranker.out.b", Tensor::zeros(1, 1)),
            hidden,
        }
    }

    pub fn fresh_stats(&self) -> Vec<RunningStats> {
        self.layers.iter().map(|l| RunningStats::new(l.width * l.pool)).collect()
    }

    /// `u = (W_share + W_rank) s_att + W_q q + b`.
    pub fn compose_intent(&self, tape: &mut Tape<'_>, context: Var, query_rep: Var) -> Result<Var> {
        let shared = tape.param(self.shared);
        let private = tape.param(self.private);
        let w1 = tape.add(shared, private)?;
        let a = tape.matmul(w1, context)?;
        let w2 = tape.param(self.query_proj);
        let b = tape.matmul(w2, query_rep)?;
        let ab = tape.add(a, b)?;
        let bias = tape.param(self.bias);
        tape.add(ab, bias)
    }

    /// Scores the columns of `features` (`7 l_h x B`), returning `1 x B`
    /// probabilities and the batch moments of each layer in batch mode.
    pub fn click_probability(
        &self,
        tape: &mut Tape<'_>,
        features: Var,
        mode: NormMode<'_>,
    ) -> Result<(Var, Vec<BatchMoments>)> {
        let mut x = features;
        let mut moments = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weight);
            let z = tape.matmul(w, x)?;
            let gamma = tape.param(layer.gamma);
            let beta = tape.param(layer.beta);
            let stats = match mode {
                NormMode::Batch => NormStats::Batch,
                NormMode::Running(all) => {
                    let s = all.get(k).ok_or_else(|| TensorError::Invalid {
                        op: "click_probability",
                        msg: format!("missing running statistics for layer {k}"),
                    })?;
                    NormStats::Running {
                        mean: &s.mean,
                        var: &s.var,
                    }
                }
            };
            let (z, m) = tape.batch_norm(z, gamma, beta, stats)?;
            moments.extend(m);
            x = tape.max_pool(z, layer.pool)?;
        }
        let w = tape.param(self.out_weight);
        let b = tape.param(self.out_bias);
        let logit = tape.matmul(w, x)?;
        let logit = tape.add(logit, b)?;
        Ok((tape.sigmoid(logit)?, moments))
    }
}

pub fn maxout_widths(hidden: usize) -> [usize; 3] {
    [2 * hidden, hidden, (hidden / 2).max(1)]
}

pub fn feature_dim(hidden: usize) -> usize {
    7 * hidden
}

/// `[d; u; d - q; d * q]`.
pub fn match_features(tape: &mut Tape<'_>, doc_rep: Var, intent: Var, query_rep: Var) -> Result<Var> {
    let diff = tape.sub(doc_rep, query_rep)?;
    let prod = tape.mul(doc_rep, query_rep)?;
    tape.concat(&[doc_rep, intent, diff, prod], 0)
}

/// Cross-entropy with per-candidate weights:
/// `-sum_k w_k [c_k log o_k + (1 - c_k) log(1 - o_k)]`, with `o` clamped.
pub fn weighted_click_loss(tape: &mut Tape<'_>, probs: Var, labels: &[bool], weights: &[f64]) -> Result<Var> {
    let n = tape.shape(probs)[1];
    if labels.len() != n || weights.len() != n || tape.shape(probs)[0] != 1 {
        return Err(TensorError::Invalid {
            op: "ranker_loss",
            msg: format!("{n} predictions, {} labels, {} weights", labels.len(), weights.len()),
        });
    }
    let o = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let ones = tape.constant(Tensor::filled(1, n, 1.0))?;
    let not_o = tape.sub(ones, o)?;
    let log_o = tape.log(o)?;
    let log_not_o = tape.log(not_o)?;
    let pos: Vec<f64> = labels.iter().zip(weights).map(|(&c, w)| if c { -w } else { 0.0 }).collect();
    let neg: Vec<f64> = labels.iter().zip(weights).map(|(&c, w)| if c { 0.0 } else { -w }).collect();
    let pos = tape.constant(Tensor::new(1, n, pos))?;
    let neg = tape.constant(Tensor::new(1, n, neg))?;
    let a = tape.mul(log_o, pos)?;
    let b = tape.mul(log_not_o, neg)?;
    let s = tape.add(a, b)?;
    tape.sum(s)
}

/// Mean cross-entropy over the candidates of one query.
pub fn ranker_loss(tape: &mut Tape<'_>, probs: Var, labels: &[bool]) -> Result<Var> {
    if labels.is_empty() {
        return Err(TensorError::Invalid {
            op: "ranker_loss",
            msg: "no candidates".into(),
        });
    }
    let w = vec![1.0 / labels.len() as f64; labels.len()];
    weighted_click_loss(tape, probs, labels, &w)
}

/// Positions of `scores` by descending score, ties by ascending `doc_ids`.
pub fn rank_order<K: Ord>(scores: &[f64], doc_ids: &[K]) -> std::result::Result<Vec<usize>, TensorError> {
    if scores.is_empty() || scores.len() != doc_ids.len() {
        return Err(TensorError::Invalid {
            op: "rank_documents",
            msg: format!("{} scores for {} documents", scores.len(), doc_ids.len()),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| doc_ids[a].cmp(&doc_ids[b]))
    });
    Ok(order)
}
