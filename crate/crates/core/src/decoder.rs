//! Next-query generation conditioned on the current query and the search
//! context, with teacher-forced likelihoods for training and candidate scoring.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::encoder::{LstmCell, LstmState};
use crate::vocab::{EOQ, PAD, SOS};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug)]
pub struct QueryDecoder {
    pub embedding: ParamId,
    pub init_weight: ParamId,
    pub init_bias: ParamId,
    pub cell: LstmCell,
    /// Bilinear `l_h x 2 l_h` matrix scoring encoder states against the decoder state.
    pub attention: ParamId,
    pub shared: ParamId,
    pub private: ParamId,
    /// `l_h x 3 l_h`, applied to `[h; a]`.
    pub state_proj: ParamId,
    pub gen_weight: ParamId,
    pub gen_bias: ParamId,
    pub hidden: usize,
    pub max_len: usize,
    pub use_attention: bool,
}

/// Teacher-forced pass over one target.
#[derive(Clone, Copy, Debug)]
pub struct TeacherForced {
    /// `|V| x T` log-probabilities, one column per step.
    pub log_probs: Var,
    /// `T x 1` log-probabilities of the target tokens.
    pub target_log_probs: Var,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Generated words without SOS or EOQ.
    pub tokens: Vec<usize>,
    /// Log-probability of every emitted token, including a final EOQ.
    pub step_log_probs: Vec<f64>,
}

impl Decoded {
    /// Mean log-probability per emitted step.
    pub fn score(&self) -> f64 {
        if self.step_log_probs.is_empty() {
            return 0.0;
        }
        self.step_log_probs.iter().sum::<f64>() / self.step_log_probs.len() as f64
    }
}

impl QueryDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        embedding: ParamId,
        shared: ParamId,
        word_dim: usize,
        context_dim: usize,
        hidden: usize,
        vocab_size: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            embedding,
            init_weight: store.add_uniform("decoder.init.w", hidden, context_dim, rng),
            init_bias: store.add("decoder.init.b", Tensor::zeros(hidden, 1)),
            cell: LstmCell::new(store, "decoder.cell", word_dim, hidden, rng),
            attention: store.add_uniform("decoder.attn", hidden, 2 * hidden, rng),
            shared,
            private: store.add_uniform("decoder.private", hidden, context_dim, rng),
            state_proj: store.add_uniform("decoder.state_proj", hidden, 3 * hidden, rng),
            gen_weight: store.add_uniform("decoder.gen.w", vocab_size, hidden, rng),
            gen_bias: store.add("decoder.gen.b", Tensor::zeros(vocab_size, 1)),
            hidden,
            max_len,
            use_attention: true,
        }
    }

    /// `h_0 = tanh(W s_att + b)` with a zero cell state.
    pub fn init(&self, tape: &mut Tape<'_>, context: Var) -> Result<LstmState> {
        let w = tape.param(self.init_weight);
        let b = tape.param(self.init_bias);
        let z = tape.matmul(w, context)?;
        let z = tape.add(z, b)?;
        Ok(LstmState {
            h: tape.tanh(z)?,
            c: tape.constant(Tensor::zeros(self.hidden, 1))?,
        })
    }

    /// `weights_k = softmax_k(h^T W h_k)`, `a = sum_k weights_k h_k`. With
    /// attention switched off `a` is the zero vector.
    pub fn attend(&self, tape: &mut Tape<'_>, h: Var, enc_states: Var) -> Result<(Var, Option<Var>)> {
        let [rows, cols] = tape.shape(enc_states);
        if cols == 0 {
            return Err(TensorError::Invalid {
                op: "decoder_attention",
                msg: "empty encoder states".into(),
            });
        }
        if !self.use_attention {
            return Ok((tape.constant(Tensor::zeros(rows, 1))?, None));
        }
        let w = tape.param(self.attention);
        let ht = tape.transpose(h)?;
        let hw = tape.matmul(ht, w)?;
        let scores = tape.matmul(hw, enc_states)?;
        let weights = tape.softmax(scores, 1)?;
        let col = tape.transpose(weights)?;
        Ok((tape.matmul(enc_states, col)?, Some(weights)))
    }

    /// `(W_share + W_recom) s_att`, constant over decoding steps.
    pub fn context_term(&self, tape: &mut Tape<'_>, context: Var) -> Result<Var> {
        let shared = tape.param(self.shared);
        let private = tape.param(self.private);
        let w = tape.add(shared, private)?;
        tape.matmul(w, context)
    }

    /// Vocabulary logits for the columns of `states` (`l_h x T`) and
    /// `attended` (`2 l_h x T`).
    pub fn logits(&self, tape: &mut Tape<'_>, context_term: Var, states: Var, attended: Var) -> Result<Var> {
        let ha = tape.concat(&[states, attended], 0)?;
        let w2 = tape.param(self.state_proj);
        let nu = tape.matmul(w2, ha)?;
        let nu = tape.add(nu, context_term)?;
        let g = tape.param(self.gen_weight);
        let b = tape.param(self.gen_bias);
        let z = tape.matmul(g, nu)?;
        tape.add(z, b)
    }

    /// `softmax(W_gen nu + b_gen)` for a single step.
    pub fn output_distribution(&self, tape: &mut Tape<'_>, context_term: Var, h: Var, a: Var) -> Result<Var> {
        let z = self.logits(tape, context_term, h, a)?;
        tape.softmax(z, 0)
    }

    /// `words` truncated to `max_len` followed by EOQ.
    pub fn target_with_eoq(&self, words: &[usize]) -> Result<Vec<usize>> {
        if words.is_empty() {
            return Err(TensorError::Invalid {
                op: "recom_loss",
                msg: "empty target query".into(),
            });
        }
        let mut t: Vec<usize> = words.iter().copied().take(self.max_len).collect();
        t.push(EOQ);
        Ok(t)
    }

    /// Feeds SOS and the ground-truth prefix; `target` must already end in EOQ.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape<'_>,
        context: Var,
        enc_states: Var,
        target: &[usize],
        dropout: f64,
    ) -> Result<TeacherForced> {
        let steps = target.len();
        if steps == 0 {
            return Err(TensorError::Invalid {
                op: "recom_loss",
                msg: "empty target query".into(),
            });
        }
        let mut inputs = Vec::with_capacity(steps);
        inputs.push(SOS);
        inputs.extend_from_slice(&target[..steps - 1]);
        let xs = tape.embed(self.embedding, &inputs, Some(PAD))?;
        let xs = tape.dropout(xs, dropout)?;
        let mut state = self.init(tape, context)?;
        let mut hs = Vec::with_capacity(steps);
        let mut atts = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = tape.slice(xs, 1, t, 1)?;
            state = self.cell.step(tape, x, state)?;
            let (a, _) = self.attend(tape, state.h, enc_states)?;
            hs.push(state.h);
            atts.push(a);
        }
        let h = tape.concat(&hs, 1)?;
        let a = tape.concat(&atts, 1)?;
        let ctx = self.context_term(tape, context)?;
        let z = self.logits(tape, ctx, h, a)?;
        let log_probs = tape.log_softmax(z, 0)?;
        let index: Vec<(usize, usize)> = target.iter().enumerate().map(|(t, &w)| (w, t)).collect();
        let target_log_probs = tape.gather(log_probs, &index)?;
        Ok(TeacherForced {
            log_probs,
            target_log_probs,
            steps,
        })
    }

    /// `-sum_t log P(w_t | w_<t)` over `words` plus EOQ.
    pub fn recom_loss(&self, tape: &mut Tape<'_>, context: Var, enc_states: Var, words: &[usize]) -> Result<Var> {
        let target = self.target_with_eoq(words)?;
        let tf = self.teacher_forced(tape, context, enc_states, &target, 0.0)?;
        let s = tape.sum(tf.target_log_probs)?;
        tape.scale(s, -1.0)
    }

    /// Mean log-likelihood per token (EOQ included) of a candidate query.
    pub fn score_candidate(&self, tape: &mut Tape<'_>, context: Var, enc_states: Var, words: &[usize]) -> Result<f64> {
        let target = self.target_with_eoq(words)?;
        let tf = self.teacher_forced(tape, context, enc_states, &target, 0.0)?;
        Ok(tape.value(tf.target_log_probs).sum() / target.len() as f64)
    }

    /// Greedy decoding from SOS, feeding back each argmax token. Ties go to
    /// the smaller id.
    pub fn greedy_decode(&self, tape: &mut Tape<'_>, context: Var, enc_states: Var, max_len: usize) -> Result<Decoded> {
        let ctx = self.context_term(tape, context)?;
        let mut state = self.init(tape, context)?;
        let mut prev = SOS;
        let mut out = Decoded {
            tokens: Vec::new(),
            step_log_probs: Vec::new(),
        };
        for _ in 0..max_len.max(1) {
            let x = tape.embed(self.embedding, &[prev], Some(PAD))?;
            state = self.cell.step(tape, x, state)?;
            let (a, _) = self.attend(tape, state.h, enc_states)?;
            let z = self.logits(tape, ctx, state.h, a)?;
            let lp = tape.log_softmax(z, 0)?;
            let lp = tape.value(lp);
            let best = argmax(lp.data());
            out.step_log_probs.push(lp.data()[best]);
            if best == EOQ {
                break;
            }
            out.tokens.push(best);
            prev = best;
        }
        Ok(out)
    }
}

/// `lambda * mean_t sum_w P_t(w) log P_t(w)` over the columns of `log_probs`.
pub fn entropy_regularizer(tape: &mut Tape<'_>, log_probs: Var, lambda: f64) -> Result<Var> {
    let steps = tape.shape(log_probs)[1].max(1);
    // Softmax of normalized log-probabilities recovers the probabilities.
    let probs = tape.softmax(log_probs, 0)?;
    let plogp = tape.mul(probs, log_probs)?;
    let s = tape.sum(plogp)?;
    tape.scale(s, lambda / steps as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
