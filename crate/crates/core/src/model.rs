//! The full model: encoders, session chains, ranking head and query decoder
//! wired together, plus the joint multi-task objective.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{BatchMoments, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::data::SearchTask;
use crate::decoder::{entropy_regularizer, Decoded, QueryDecoder};
use crate::encoder::{EncodedSequence, SequenceEncoder};
use crate::ranker::{match_features, weighted_click_loss, NormMode, RankerHead, RunningStats};
use crate::session::{ContextAttentive, ContextSwitches, Head, SessionEncoders, SessionState};
use crate::vocab::{EmbeddingTable, Vocabulary, UNK};

type TResult<T> = std::result::Result<T, TensorError>;

/// Component switches. `true` keeps the component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub decoder_attention: bool,
    pub session_query: bool,
    pub session_click: bool,
    pub ranker: bool,
    pub recommender: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            decoder_attention: true,
            session_query: true,
            session_click: true,
            ranker: true,
            recommender: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub word_dim: usize,
    /// `l_h`; the session chains use the same width.
    pub hidden: usize,
    pub max_encode_len: usize,
    pub max_decode_len: usize,
    pub maxout_pool: usize,
    pub click_gating: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 5000,
            word_dim: 64,
            hidden: 64,
            max_encode_len: 20,
            max_decode_len: 10,
            maxout_pool: 2,
            click_gating: true,
            ablation: Ablation::default(),
        }
    }
}

/// Weights of the regularizers and the dropout rate used by [`CarsModel::batch_loss`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub shared_l2: f64,
    pub private_l2: f64,
    pub entropy: f64,
    pub dropout: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            shared_l2: 1e-2,
            private_l2: 1e-4,
            entropy: 1e-1,
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedDoc {
    pub doc_id: String,
    pub tokens: Vec<usize>,
    pub clicked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedQuery {
    pub tokens: Vec<usize>,
    pub docs: Vec<EncodedDoc>,
    /// Indices into `docs` in click-time order.
    pub clicks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedTask {
    pub queries: Vec<EncodedQuery>,
}

/// Token ids of `text`, with UNK standing in for an empty string.
pub fn encode_nonempty(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    let ids = vocab.encode(text);
    if ids.is_empty() {
        vec![UNK]
    } else {
        ids
    }
}

pub fn encode_task(task: &SearchTask, vocab: &Vocabulary) -> EncodedTask {
    EncodedTask {
        queries: task
            .queries
            .iter()
            .map(|q| EncodedQuery {
                tokens: encode_nonempty(&q.text, vocab),
                docs: q
                    .candidates
                    .iter()
                    .map(|c| EncodedDoc {
                        doc_id: c.doc_id.clone(),
                        tokens: encode_nonempty(&c.title, vocab),
                        clicked: c.clicked(),
                    })
                    .collect(),
                clicks: q.clicks_in_order(),
            })
            .collect(),
    }
}

/// Loss components of one mini-batch, each already divided by the task count.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub ranker: Var,
    pub recom: Var,
    pub l2: Var,
    pub entropy: Var,
    pub moments: Vec<BatchMoments>,
    pub tasks: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct CarsModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub bn_stats: Vec<RunningStats>,
    pub embedding: ParamId,
    pub shared: ParamId,
    pub query_encoder: SequenceEncoder,
    pub doc_encoder: SequenceEncoder,
    pub session: SessionEncoders,
    pub ranker: RankerHead,
    pub decoder: QueryDecoder,
}

impl CarsModel {
    /// Builds a model with seeded random weights and the given word vectors.
    pub fn new(config: ModelConfig, embeddings: &EmbeddingTable, seed: u64) -> TResult<Self> {
        if embeddings.matrix.rows() != config.vocab_size || embeddings.dim() != config.word_dim {
            return Err(TensorError::ShapeMismatch {
                op: "model_init",
                shapes: vec![
                    [embeddings.matrix.rows(), embeddings.dim()],
                    [config.vocab_size, config.word_dim],
                ],
            });
        }
        if config.hidden == 0 || config.maxout_pool == 0 || config.max_decode_len == 0 {
            return Err(TensorError::Invalid {
                op: "model_init",
                msg: "hidden size, pool size and decode length must be positive".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.hidden;
        let embedding = params.add("embedding", embeddings.matrix.clone());
        let query_encoder =
            SequenceEncoder::new(&mut params, "query_enc", config.word_dim, h, config.max_encode_len, &mut rng);
        let doc_encoder =
            SequenceEncoder::new(&mut params, "doc_enc", config.word_dim, h, config.max_encode_len, &mut rng);
        let session = SessionEncoders::new(&mut params, 2 * h, h, h, &mut rng);
        let ctx = session.context_dim();
        let shared = params.add_uniform("shared", h, ctx, &mut rng);
        let ranker = RankerHead::new(&mut params, shared, ctx, h, config.maxout_pool, &mut rng);
        let mut decoder = QueryDecoder::new(
            &mut params,
            embedding,
            shared,
            config.word_dim,
            ctx,
            h,
            config.vocab_size,
            config.max_decode_len,
            &mut rng,
        );
        decoder.use_attention = config.ablation.decoder_attention;
        let bn_stats = ranker.fresh_stats();
        Ok(Self {
            config,
            params,
            bn_stats,
            embedding,
            shared,
            query_encoder,
            doc_encoder,
            session,
            ranker,
            decoder,
        })
    }

    /// Random word vectors drawn from the same seed.
    pub fn random(config: ModelConfig, seed: u64) -> TResult<Self> {
        let table = EmbeddingTable::random(config.vocab_size, config.word_dim, seed);
        Self::new(config, &table, seed)
    }

    pub fn switches(&self) -> ContextSwitches {
        ContextSwitches {
            query_chain: self.config.ablation.session_query,
            click_chain: self.config.ablation.session_click,
            click_gating: self.config.click_gating,
        }
    }

    /// Running statistics for evaluation-mode batch norm.
    pub fn eval_norm(&self) -> NormMode<'_> {
        NormMode::Running(&self.bn_stats)
    }

    /// SHA-256 over parameter names and values.
    pub fn parameter_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.params.iter() {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        for s in &self.bn_stats {
            for v in s.mean.iter().chain(&s.var) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn encode_query(&self, tape: &mut Tape<'_>, tokens: &[usize], dropout: f64) -> TResult<EncodedSequence> {
        let tokens: &[usize] = if tokens.is_empty() { &[UNK] } else { tokens };
        self.query_encoder.encode(tape, self.embedding, tokens, dropout)
    }

    pub fn encode_doc(&self, tape: &mut Tape<'_>, tokens: &[usize], dropout: f64) -> TResult<EncodedSequence> {
        let tokens: &[usize] = if tokens.is_empty() { &[UNK] } else { tokens };
        self.doc_encoder.encode(tape, self.embedding, tokens, dropout)
    }

    pub fn context(
        &self,
        tape: &mut Tape<'_>,
        state: &SessionState,
        query: &EncodedSequence,
        head: Head,
    ) -> TResult<ContextAttentive> {
        self.session.build_context(tape, state, query.pi, head, self.switches())
    }

    /// Feature columns `[d; u; d - q; d * q]` for each document.
    fn feature_columns(
        &self,
        tape: &mut Tape<'_>,
        ctx: &ContextAttentive,
        query: &EncodedSequence,
        docs: &[EncodedSequence],
    ) -> TResult<Vec<Var>> {
        let u = self.ranker.compose_intent(tape, ctx.joint, query.pi)?;
        docs.iter().map(|d| match_features(tape, d.pi, u, query.pi)).collect()
    }

    /// Click probabilities of `docs` for the current query under `norm`.
    pub fn doc_probabilities(
        &self,
        tape: &mut Tape<'_>,
        state: &SessionState,
        query: &EncodedSequence,
        docs: &[EncodedSequence],
        norm: NormMode<'_>,
    ) -> TResult<(Vec<f64>, ContextAttentive)> {
        let ctx = self.context(tape, state, query, Head::Rank)?;
        if docs.is_empty() {
            return Ok((Vec::new(), ctx));
        }
        let cols = self.feature_columns(tape, &ctx, query, docs)?;
        let f = tape.concat(&cols, 1)?;
        let (o, _) = self.ranker.click_probability(tape, f, norm)?;
        Ok((tape.value(o).data().to_vec(), ctx))
    }

    /// Greedy next-query suggestion for the current query.
    pub fn suggest(
        &self,
        tape: &mut Tape<'_>,
        state: &SessionState,
        query: &EncodedSequence,
    ) -> TResult<(Decoded, ContextAttentive)> {
        let ctx = self.context(tape, state, query, Head::Suggest)?;
        let out = self
            .decoder
            .greedy_decode(tape, ctx.joint, query.states, self.config.max_decode_len)?;
        Ok((out, ctx))
    }

    /// Mean per-token log-likelihood of `words` as the next query.
    pub fn candidate_score(
        &self,
        tape: &mut Tape<'_>,
        suggest_ctx: &ContextAttentive,
        query: &EncodedSequence,
        words: &[usize],
    ) -> TResult<f64> {
        self.decoder.score_candidate(tape, suggest_ctx.joint, query.states, words)
    }

    /// Appends the query and then its clicked documents to the session.
    pub fn observe(
        &self,
        tape: &mut Tape<'_>,
        state: &mut SessionState,
        query: &EncodedSequence,
        clicked: &[EncodedSequence],
    ) -> TResult<()> {
        self.session.query_update(tape, state, query.pi)?;
        for d in clicked {
            self.session.click_update(tape, state, d.pi)?;
        }
        Ok(())
    }

    /// `lambda_1 |W_share| + lambda_2 (|W_rank| + |W_recom|)`, Frobenius norms.
    pub fn l2_regularizer(&self, tape: &mut Tape<'_>, shared_l2: f64, private_l2: f64) -> TResult<Var> {
        let s = tape.param(self.shared);
        let r = tape.param(self.ranker.private);
        let c = tape.param(self.decoder.private);
        let ns = tape.norm(s)?;
        let nr = tape.norm(r)?;
        let nc = tape.norm(c)?;
        let a = tape.scale(ns, shared_l2)?;
        let priv_sum = tape.add(nr, nc)?;
        let b = tape.scale(priv_sum, private_l2)?;
        tape.add(a, b)
    }

    /// Joint objective over a mini-batch: the regularizers plus the ranking
    /// and suggestion likelihood terms averaged over tasks. Tasks with fewer
    /// than two queries are skipped.
    pub fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        tasks: &[&EncodedTask],
        cfg: &LossConfig,
        norm: NormMode<'_>,
    ) -> TResult<BatchLoss> {
        let usable: Vec<&EncodedTask> = tasks.iter().copied().filter(|t| t.queries.len() >= 2).collect();
        let skipped = tasks.len() - usable.len();
        if skipped > 0 {
            log::warn!("skipping {skipped} task(s) with fewer than two queries");
        }
        if usable.is_empty() {
            return Err(TensorError::Invalid {
                op: "total_loss",
                msg: "no task with at least two queries".into(),
            });
        }
        let n = usable.len() as f64;
        let ab = self.config.ablation;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut weights = Vec::new();
        let mut nll_terms = Vec::new();
        let mut log_prob_blocks = Vec::new();

        for task in &usable {
            let mut state = SessionState::new();
            let mut cache: HashMap<&str, EncodedSequence> = HashMap::new();
            for (i, q) in task.queries.iter().enumerate() {
                let qe = self.encode_query(tape, &q.tokens, cfg.dropout)?;
                let mut docs = Vec::with_capacity(q.docs.len());
                for d in &q.docs {
                    let enc = match cache.get(d.doc_id.as_str()) {
                        Some(e) => *e,
                        None => {
                            let e = self.encode_doc(tape, &d.tokens, cfg.dropout)?;
                            cache.insert(&d.doc_id, e);
                            e
                        }
                    };
                    docs.push(enc);
                }
                if ab.ranker && !docs.is_empty() {
                    let ctx = self.context(tape, &state, &qe, Head::Rank)?;
                    features.extend(self.feature_columns(tape, &ctx, &qe, &docs)?);
                    let w = 1.0 / (docs.len() as f64 * n);
                    for d in &q.docs {
                        labels.push(d.clicked);
                        weights.push(w);
                    }
                }
                if ab.recommender {
                    if let Some(next) = task.queries.get(i + 1) {
                        let ctx = self.context(tape, &state, &qe, Head::Suggest)?;
                        let words: &[usize] = if next.tokens.is_empty() { &[UNK] } else { &next.tokens };
                        let target = self.decoder.target_with_eoq(words)?;
                        let tf = self.decoder.teacher_forced(tape, ctx.joint, qe.states, &target, cfg.dropout)?;
                        nll_terms.push(tape.sum(tf.target_log_probs)?);
                        log_prob_blocks.push(tf.log_probs);
                    }
                }
                let clicked: Vec<EncodedSequence> = q.clicks.iter().map(|&c| docs[c]).collect();
                self.observe(tape, &mut state, &qe, &clicked)?;
            }
        }

        let mut moments = Vec::new();
        let ranker = if features.is_empty() {
            tape.constant(Tensor::scalar(0.0))?
        } else {
            let f = tape.concat(&features, 1)?;
            let f = tape.dropout(f, cfg.dropout)?;
            let (o, m) = self.ranker.click_probability(tape, f, norm)?;
            moments = m;
            weighted_click_loss(tape, o, &labels, &weights)?
        };
        let (recom, entropy) = if nll_terms.is_empty() {
            let z = tape.constant(Tensor::scalar(0.0))?;
            (z, z)
        } else {
            let all = tape.concat(&nll_terms, 0)?;
            let s = tape.sum(all)?;
            let recom = tape.scale(s, -1.0 / n)?;
            let lp = tape.concat(&log_prob_blocks, 1)?;
            (recom, entropy_regularizer(tape, lp, cfg.entropy)?)
        };
        let l2 = self.l2_regularizer(tape, cfg.shared_l2, cfg.private_l2)?;
        let data = tape.add(ranker, recom)?;
        let reg = tape.add(l2, entropy)?;
        let total = tape.add(data, reg)?;
        Ok(BatchLoss {
            total,
            ranker,
            recom,
            l2,
            entropy,
            moments,
            tasks: usable.len(),
            skipped,
        })
    }

    /// Folds batch moments into the running statistics.
    pub fn update_norm_stats(&mut self, moments: &[BatchMoments]) {
        for (s, m) in self.bn_stats.iter_mut().zip(moments) {
            s.update(m, crate::ranker::BN_MOMENTUM);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::vocab::EOQ;

    pub(crate) fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            word_dim: 4,
            hidden: 4,
            max_encode_len: 20,
            max_decode_len: 5,
            ..ModelConfig::default()
        }
    }

    fn doc(id: &str, tokens: Vec<usize>, clicked: bool) -> EncodedDoc {
        EncodedDoc {
            doc_id: id.into(),
            tokens,
            clicked,
        }
    }

    pub(crate) fn toy_task(offset: usize) -> EncodedTask {
        let q = |t: Vec<usize>, c: usize| EncodedQuery {
            tokens: t,
            docs: vec![
                doc(&format!("d{}", offset + c), vec![4 + c, 5], true),
                doc(&format!("d{}", offset + c + 1), vec![6, 7 + c], false),
                doc(&format!("d{}", offset + c + 2), vec![8], false),
            ],
            clicks: vec![0],
        };
        EncodedTask {
            queries: vec![q(vec![4, 5], 0), q(vec![5, 6, 7], 1), q(vec![8], 2)],
        }
    }

    #[test]
    fn zero_regularizers_give_pure_likelihood() {
        let model = CarsModel::random(tiny_config(12), 3).unwrap();
        let task = toy_task(0);
        let cfg = LossConfig {
            shared_l2: 0.0,
            private_l2: 0.0,
            entropy: 0.0,
            dropout: 0.0,
        };
        let mut tape = Tape::new(&model.params);
        let l = model.batch_loss(&mut tape, &[&task], &cfg, NormMode::Batch).unwrap();
        let sum = tape.scalar(l.ranker) + tape.scalar(l.recom);
        assert_eq!(tape.scalar(l.l2), 0.0);
        assert_eq!(tape.scalar(l.entropy), 0.0);
        assert!((tape.scalar(l.total) - sum).abs() < 1e-12);
    }

    #[test]
    fn duplicating_tasks_keeps_the_data_average() {
        let model = CarsModel::random(tiny_config(12), 3).unwrap();
        let task = toy_task(0);
        let cfg = LossConfig::default();
        let mut tape = Tape::new(&model.params);
        let one = model.batch_loss(&mut tape, &[&task], &cfg, NormMode::Batch).unwrap();
        let two = model.batch_loss(&mut tape, &[&task, &task], &cfg, NormMode::Batch).unwrap();
        assert!((tape.scalar(one.ranker) - tape.scalar(two.ranker)).abs() < 1e-12);
        assert!((tape.scalar(one.recom) - tape.scalar(two.recom)).abs() < 1e-12);
        assert!((tape.scalar(one.entropy) - tape.scalar(two.entropy)).abs() < 1e-12);
    }

    #[test]
    fn short_tasks_are_skipped() {
        let model = CarsModel::random(tiny_config(12), 3).unwrap();
        let mut short = toy_task(0);
        short.queries.truncate(1);
        let full = toy_task(0);
        let mut tape = Tape::new(&model.params);
        let l = model
            .batch_loss(&mut tape, &[&short, &full], &LossConfig::default(), NormMode::Batch)
            .unwrap();
        assert_eq!((l.tasks, l.skipped), (1, 1));
        assert!(model
            .batch_loss(&mut tape, &[&short], &LossConfig::default(), NormMode::Batch)
            .is_err());
    }

    #[test]
    fn zero_parameters_decompose_in_closed_form() {
        // With every weight at zero all probabilities are 1/2 and the decoder
        // is uniform over the vocabulary.
        let v = 12;
        let mut model = CarsModel::random(tiny_config(v), 3).unwrap();
        for p in model.params.iter_mut() {
            p.value.fill(0.0);
        }
        let task = toy_task(0);
        let cfg = LossConfig::default();
        let mut tape = Tape::new(&model.params);
        let l = model.batch_loss(&mut tape, &[&task], &cfg, NormMode::Batch).unwrap();
        // Three queries, each with mean BCE ln 2.
        assert!((tape.scalar(l.ranker) - 3.0 * 2f64.ln()).abs() < 1e-12);
        // Targets: q2 (3 words + EOQ) and q3 (1 word + EOQ).
        assert!((tape.scalar(l.recom) - 6.0 * (v as f64).ln()).abs() < 1e-12);
        assert!((tape.scalar(l.entropy) + 0.1 * (v as f64).ln()).abs() < 1e-12);
        assert_eq!(tape.scalar(l.l2), 0.0);
        let want = 3.0 * 2f64.ln() + 6.0 * (v as f64).ln() - 0.1 * (v as f64).ln();
        assert!((tape.scalar(l.total) - want).abs() < 1e-12);
    }

    #[test]
    fn l2_regularizer_examples() {
        let mut model = CarsModel::random(tiny_config(12), 3).unwrap();
        for id in [model.shared, model.ranker.private, model.decoder.private] {
            model.params.value_mut(id).fill(0.0);
        }
        {
            let mut tape = Tape::new(&model.params);
            let r = model.l2_regularizer(&mut tape, 0.01, 1e-4).unwrap();
            assert_eq!(tape.scalar(r), 0.0);
        }
        let shared = model.params.value_mut(model.shared);
        shared.set(0, 0, 1.0);
        shared.set(1, 1, 1.0);
        let mut tape = Tape::new(&model.params);
        let r = model.l2_regularizer(&mut tape, 0.01, 1e-4).unwrap();
        assert!((tape.scalar(r) - 0.014142).abs() < 1e-6);
        drop(tape);

        let mut r = ChaCha8Rng::seed_from_u64(1);
        let base = {
            let p = model.params.value_mut(model.ranker.private);
            for x in p.data_mut() {
                *x = rand::Rng::gen_range(&mut r, -1.0..1.0);
            }
            p.squared_norm().sqrt()
        };
        model.params.value_mut(model.ranker.private).scale_assign(3.0);
        let mut tape = Tape::new(&model.params);
        let reg = model.l2_regularizer(&mut tape, 0.0, 1.0).unwrap();
        assert!((tape.scalar(reg) - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn zeroed_private_parts_share_one_matrix() {
        let mut model = CarsModel::random(tiny_config(12), 3).unwrap();
        model.params.value_mut(model.ranker.private).fill(0.0);
        model.params.value_mut(model.decoder.private).fill(0.0);
        let mut tape = Tape::new(&model.params);
        let s = tape.param(model.shared);
        let r = tape.param(model.ranker.private);
        let c = tape.param(model.decoder.private);
        let rank_w = tape.add(s, r).unwrap();
        let recom_w = tape.add(s, c).unwrap();
        assert_eq!(tape.value(rank_w), tape.value(recom_w));
        assert_eq!(tape.value(rank_w), model.params.value(model.shared));
    }

    fn grad_of(model: &CarsModel, pick: impl Fn(&BatchLoss) -> Var) -> crate::autodiff::Gradients {
        let task = toy_task(0);
        let mut tape = Tape::new(&model.params);
        let l = model
            .batch_loss(&mut tape, &[&task], &LossConfig::default(), NormMode::Batch)
            .unwrap();
        tape.backward(pick(&l)).unwrap()
    }

    #[test]
    fn heads_touch_only_their_private_matrix() {
        let model = CarsModel::random(tiny_config(12), 3).unwrap();
        let g = grad_of(&model, |l| l.ranker);
        assert_eq!(g.max_abs(model.decoder.private), 0.0);
        assert!(g.max_abs(model.ranker.private) > 0.0);
        assert!(g.max_abs(model.shared) > 0.0);
        let g = grad_of(&model, |l| l.recom);
        assert_eq!(g.max_abs(model.ranker.private), 0.0);
        assert!(g.max_abs(model.decoder.private) > 0.0);
        assert!(g.max_abs(model.shared) > 0.0);
    }

    #[test]
    fn ablations_remove_terms() {
        let mut cfg = tiny_config(12);
        cfg.ablation.ranker = false;
        let model = CarsModel::random(cfg.clone(), 3).unwrap();
        let task = toy_task(0);
        let mut tape = Tape::new(&model.params);
        let l = model.batch_loss(&mut tape, &[&task], &LossConfig::default(), NormMode::Batch).unwrap();
        assert_eq!(tape.scalar(l.ranker), 0.0);
        assert!(tape.scalar(l.recom) > 0.0);
        drop(tape);

        cfg.ablation = Ablation {
            recommender: false,
            ..Ablation::default()
        };
        let model = CarsModel::random(cfg, 3).unwrap();
        let mut tape = Tape::new(&model.params);
        let l = model.batch_loss(&mut tape, &[&task], &LossConfig::default(), NormMode::Batch).unwrap();
        assert_eq!(tape.scalar(l.recom), 0.0);
        assert_eq!(tape.scalar(l.entropy), 0.0);
        assert!(tape.scalar(l.ranker) > 0.0);
    }

    #[test]
    fn first_query_context_is_zero_and_scores_are_probabilities() {
        let model = CarsModel::random(tiny_config(12), 3).unwrap();
        let mut tape = Tape::new(&model.params);
        let state = SessionState::new();
        let q = model.encode_query(&mut tape, &[4, 5], 0.0).unwrap();
        let docs: Vec<_> = [vec![6], vec![7, 8]]
            .iter()
            .map(|d| model.encode_doc(&mut tape, d, 0.0).unwrap())
            .collect();
        let (p, ctx) = model
            .doc_probabilities(&mut tape, &state, &q, &docs, model.eval_norm())
            .unwrap();
        assert!(tape.value(ctx.joint).data().iter().all(|&x| x == 0.0));
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
        let (out, _) = model.suggest(&mut tape, &state, &q).unwrap();
        assert!(out.tokens.len() <= 5);
        assert!(out.tokens.iter().all(|&t| t != EOQ));
    }

    #[test]
    fn parameter_hash_tracks_values() {
        let mut model = CarsModel::random(tiny_config(12), 3).unwrap();
        let a = model.parameter_hash();
        assert_eq!(a, CarsModel::random(tiny_config(12), 3).unwrap().parameter_hash());
        model.params.value_mut(model.shared).data_mut()[0] += 1.0;
        assert_ne!(a, model.parameter_hash());
    }
}
