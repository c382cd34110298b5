//! Task-level recurrent chains over past queries and clicked documents and
//! the query-conditioned attention that summarizes them.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::encoder::{InnerAttention, LstmCell, LstmState};

type Result<T> = std::result::Result<T, TensorError>;

/// Which head a context vector is built for. Each head has its own
/// attention matrices over both chains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Rank,
    Suggest,
}

/// Switches for the context chains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextSwitches {
    pub query_chain: bool,
    pub click_chain: bool,
    /// Re-weight click states by their inner-attention weights before the
    /// query-conditioned attention.
    pub click_gating: bool,
}

impl Default for ContextSwitches {
    fn default() -> Self {
        Self {
            query_chain: true,
            click_chain: true,
            click_gating: true,
        }
    }
}

/// History accumulated on one tape.
#[derive(Clone, Debug, Default)]
pub struct SessionState {
    pub query_states: Vec<LstmState>,
    pub click_states: Vec<LstmState>,
    pub query_reps: Vec<Var>,
    pub click_reps: Vec<Var>,
}

impl SessionState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.query_states.is_empty() && self.click_states.is_empty()
    }
}

/// Query-chain and click-chain summaries for the current query.
#[derive(Clone, Copy, Debug)]
pub struct ContextAttentive {
    pub query_part: Var,
    pub click_part: Var,
    /// `[query_part; click_part]`.
    pub joint: Var,
    /// `1 x (#past queries)`; `None` for an empty or disabled chain.
    pub query_weights: Option<Var>,
    /// `1 x (#past clicks)`; `None` for an empty or disabled chain.
    pub click_weights: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct SessionEncoders {
    pub query_cell: LstmCell,
    pub click_cell: LstmCell,
    pub click_attention: InnerAttention,
    /// Bilinear matrices `rep_dim x state_dim`.
    pub query_rank: ParamId,
    pub query_suggest: ParamId,
    pub click_rank: ParamId,
    pub click_suggest: ParamId,
    pub rep_dim: usize,
}

impl SessionEncoders {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rep_dim: usize,
        query_dim: usize,
        click_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            query_cell: LstmCell::new(store, "session.query_cell", rep_dim, query_dim, rng),
            click_cell: LstmCell::new(store, "session.click_cell", rep_dim, click_dim, rng),
            click_attention: InnerAttention::new(store, "session.click_attn", click_dim, click_dim, rng),
            query_rank: store.add_uniform("session.ctx.query_rank", rep_dim, query_dim, rng),
            query_suggest: store.add_uniform("session.ctx.query_suggest", rep_dim, query_dim, rng),
            click_rank: store.add_uniform("session.ctx.click_rank", rep_dim, click_dim, rng),
            click_suggest: store.add_uniform("session.ctx.click_suggest", rep_dim, click_dim, rng),
            rep_dim,
        }
    }

    pub fn query_dim(&self) -> usize {
        self.query_cell.hidden
    }

    pub fn click_dim(&self) -> usize {
        self.click_cell.hidden
    }

    pub fn context_dim(&self) -> usize {
        self.query_dim() + self.click_dim()
    }

    fn check_rep(&self, tape: &Tape<'_>, rep: Var, op: &'static str) -> Result<()> {
        if tape.shape(rep) != [self.rep_dim, 1] {
            return Err(TensorError::ShapeMismatch {
                op,
                shapes: vec![tape.shape(rep), [self.rep_dim, 1]],
            });
        }
        Ok(())
    }

    /// Advances the query chain with the pooled representation of a query.
    pub fn query_update(&self, tape: &mut Tape<'_>, state: &mut SessionState, query_rep: Var) -> Result<()> {
        self.check_rep(tape, query_rep, "session_query_update")?;
        let prev = match state.query_states.last() {
            Some(&s) => s,
            None => LstmState::zeros(tape, self.query_dim())?,
        };
        let next = self.query_cell.step(tape, query_rep, prev)?;
        state.query_states.push(next);
        state.query_reps.push(query_rep);
        Ok(())
    }

    /// Advances the click chain with the pooled representation of a clicked document.
    pub fn click_update(&self, tape: &mut Tape<'_>, state: &mut SessionState, doc_rep: Var) -> Result<()> {
        self.check_rep(tape, doc_rep, "session_click_update")?;
        let prev = match state.click_states.last() {
            Some(&s) => s,
            None => LstmState::zeros(tape, self.click_dim())?,
        };
        let next = self.click_cell.step(tape, doc_rep, prev)?;
        state.click_states.push(next);
        state.click_reps.push(doc_rep);
        Ok(())
    }

    /// Inner-attention weights over the click states (`1 x N`).
    pub fn click_inner_weights(&self, tape: &mut Tape<'_>, state: &SessionState) -> Result<Option<Var>> {
        if state.click_states.is_empty() {
            return Ok(None);
        }
        let hs: Vec<Var> = state.click_states.iter().map(|s| s.h).collect();
        let m = tape.concat(&hs, 1)?;
        self.click_attention.weights(tape, m).map(Some)
    }

    fn stacked(tape: &mut Tape<'_>, states: &[LstmState]) -> Result<Option<Var>> {
        if states.is_empty() {
            return Ok(None);
        }
        let hs: Vec<Var> = states.iter().map(|s| s.h).collect();
        tape.concat(&hs, 1).map(Some)
    }

    /// Click states scaled column-wise by `N * alpha_n`.
    pub fn gated_clicks(&self, tape: &mut Tape<'_>, state: &SessionState) -> Result<Option<Var>> {
        let Some(m) = Self::stacked(tape, &state.click_states)? else {
            return Ok(None);
        };
        let attn = self.click_attention.weights(tape, m)?;
        let n = state.click_states.len() as f64;
        let gate = tape.scale(attn, n)?;
        tape.mul(m, gate).map(Some)
    }

    pub fn build_context(
        &self,
        tape: &mut Tape<'_>,
        state: &SessionState,
        query_rep: Var,
        head: Head,
        switches: ContextSwitches,
    ) -> Result<ContextAttentive> {
        let (wq, wc) = match head {
            Head::Rank => (self.query_rank, self.click_rank),
            Head::Suggest => (self.query_suggest, self.click_suggest),
        };
        let (query_part, query_weights) = if switches.query_chain {
            let hist = Self::stacked(tape, &state.query_states)?;
            context_attention(tape, hist, query_rep, wq, self.query_dim())?
        } else {
            (tape.constant(Tensor::zeros(self.query_dim(), 1))?, None)
        };
        let (click_part, click_weights) = if switches.click_chain {
            let hist = if switches.click_gating {
                self.gated_clicks(tape, state)?
            } else {
                Self::stacked(tape, &state.click_states)?
            };
            context_attention(tape, hist, query_rep, wc, self.click_dim())?
        } else {
            (tape.constant(Tensor::zeros(self.click_dim(), 1))?, None)
        };
        let joint = tape.concat(&[query_part, click_part], 0)?;
        Ok(ContextAttentive {
            query_part,
            click_part,
            joint,
            query_weights,
            click_weights,
        })
    }
}

/// `alpha_j = softmax_j(q^T W s_j)`, returning `(sum_j alpha_j s_j, alpha)`.
/// An absent history yields the zero vector of `state_dim` and no weights.
pub fn context_attention(
    tape: &mut Tape<'_>,
    history: Option<Var>,
    query_rep: Var,
    bilinear: ParamId,
    state_dim: usize,
) -> Result<(Var, Option<Var>)> {
    let Some(hist) = history else {
        return Ok((tape.constant(Tensor::zeros(state_dim, 1))?, None));
    };
    let w = tape.param(bilinear);
    let qt = tape.transpose(query_rep)?;
    let qw = tape.matmul(qt, w)?;
    let scores = tape.matmul(qw, hist)?;
    let weights = tape.softmax(scores, 1)?;
    let col = tape.transpose(weights)?;
    let summary = tape.matmul(hist, col)?;
    Ok((summary, Some(weights)))
}

/// Stable order of click events by timestamp; equal times keep input order.
pub fn order_by_click_time<T: Clone>(clicks: &[(u64, T)]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..clicks.len()).collect();
    idx.sort_by_key(|&i| clicks[i].0);
    idx.into_iter().map(|i| clicks[i].1.clone()).collect()
}
