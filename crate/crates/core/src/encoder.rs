//! Lower-level sequence encoding: a bidirectional LSTM over word vectors
//! followed by inner attention that pools the hidden states into one vector.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::vocab::PAD;

type Result<T> = std::result::Result<T, TensorError>;

/// Hidden and cell state of an LSTM.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape<'_>, hidden: usize) -> Result<Self> {
        Ok(Self {
            h: tape.constant(Tensor::zeros(hidden, 1))?,
            c: tape.constant(Tensor::zeros(hidden, 1))?,
        })
    }
}

/// One LSTM direction. Gate rows are stacked as `[input, forget, candidate, output]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{prefix}.w"), 4 * hidden, input_dim + hidden, rng);
        let mut b = Tensor::zeros(4 * hidden, 1);
        for r in hidden..2 * hidden {
            b.set(r, 0, 1.0);
        }
        let bias = store.add(format!("{prefix}.b"), b);
        Self {
            weight,
            bias,
            input_dim,
            hidden,
        }
    }

    pub fn step(&self, tape: &mut Tape<'_>, x: Var, prev: LstmState) -> Result<LstmState> {
        let n = self.hidden;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xh = tape.concat(&[x, prev.h], 0)?;
        let z = tape.matmul(w, xh)?;
        let z = tape.add(z, b)?;
        let i = tape.slice(z, 0, 0, n)?;
        let f = tape.slice(z, 0, n, n)?;
        let g = tape.slice(z, 0, 2 * n, n)?;
        let o = tape.slice(z, 0, 3 * n, n)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, prev.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// Runs over the columns of `xs` in order, returning every state.
    pub fn run(&self, tape: &mut Tape<'_>, xs: Var, reverse: bool) -> Result<Vec<LstmState>> {
        let steps = tape.shape(xs)[1];
        let mut state = LstmState::zeros(tape, self.hidden)?;
        let mut out = Vec::with_capacity(steps);
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let x = tape.slice(xs, 1, t, 1)?;
            state = self.step(tape, x, state)?;
            out.push(state);
        }
        if reverse {
            out.reverse();
        }
        Ok(out)
    }
}

/// Two-layer perceptron scoring each column, softmax-normalized over columns.
#[derive(Clone, Debug)]
pub struct InnerAttention {
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub w_score: ParamId,
    pub b_score: ParamId,
}

impl InnerAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w_hidden: store.add_uniform(format!("{prefix}.w2"), attn_dim, input_dim, rng),
            b_hidden: store.add(format!("{prefix}.b1"), Tensor::zeros(attn_dim, 1)),
            w_score: store.add_uniform(format!("{prefix}.w1"), 1, attn_dim, rng),
            b_score: store.add(format!("{prefix}.b2"), Tensor::zeros(1, 1)),
        }
    }

    /// Attention weights (`1 x T`) over the columns of `states`.
    pub fn weights(&self, tape: &mut Tape<'_>, states: Var) -> Result<Var> {
        let w2 = tape.param(self.w_hidden);
        let b1 = tape.param(self.b_hidden);
        let w1 = tape.param(self.w_score);
        let b2 = tape.param(self.b_score);
        let hidden = tape.matmul(w2, states)?;
        let hidden = tape.add(hidden, b1)?;
        let hidden = tape.tanh(hidden)?;
        let scores = tape.matmul(w1, hidden)?;
        let scores = tape.add(scores, b2)?;
        tape.softmax(scores, 1)
    }

    /// Returns `(pi, attn)` with `pi = states . attn^T`.
    pub fn pool(&self, tape: &mut Tape<'_>, states: Var) -> Result<(Var, Var)> {
        let attn = self.weights(tape, states)?;
        let col = tape.transpose(attn)?;
        let pi = tape.matmul(states, col)?;
        Ok((pi, attn))
    }
}

/// Hidden states `H` (`2 l_h x T`), pooled vector `pi` and the word weights.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSequence {
    pub states: Var,
    pub pi: Var,
    pub attn: Var,
}

/// BiLSTM with inner attention. Queries and documents each get their own.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    pub forward: LstmCell,
    pub backward: LstmCell,
    pub attention: InnerAttention,
    pub max_len: usize,
}

impl SequenceEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        word_dim: usize,
        hidden: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            forward: LstmCell::new(store, &format!("{prefix}.fwd"), word_dim, hidden, rng),
            backward: LstmCell::new(store, &format!("{prefix}.bwd"), word_dim, hidden, rng),
            attention: InnerAttention::new(store, &format!("{prefix}.attn"), 2 * hidden, hidden, rng),
            max_len,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    /// Column `t` of the result is `[forward_t; backward_t]`.
    pub fn bidirectional(&self, tape: &mut Tape<'_>, xs: Var) -> Result<Var> {
        if tape.shape(xs)[1] == 0 {
            return Err(TensorError::Invalid {
                op: "bidirectional_encode",
                msg: "empty sequence".into(),
            });
        }
        let fwd = self.forward.run(tape, xs, false)?;
        let bwd = self.backward.run(tape, xs, true)?;
        let fh: Vec<Var> = fwd.iter().map(|s| s.h).collect();
        let bh: Vec<Var> = bwd.iter().map(|s| s.h).collect();
        let f = tape.concat(&fh, 1)?;
        let b = tape.concat(&bh, 1)?;
        tape.concat(&[f, b], 0)
    }

    /// Embeds `ids` (truncated to `max_len`) and encodes them.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        embedding: ParamId,
        ids: &[usize],
        dropout: f64,
    ) -> Result<EncodedSequence> {
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "bidirectional_encode",
                msg: "empty sequence".into(),
            });
        }
        let ids = &ids[..ids.len().min(self.max_len)];
        let xs = tape.embed(embedding, ids, Some(PAD))?;
        let xs = tape.dropout(xs, dropout)?;
        let states = self.bidirectional(tape, xs)?;
        let (pi, attn) = self.attention.pool(tape, states)?;
        Ok(EncodedSequence { states, pi, attn })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::finite_difference_check;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 2, &mut rng());
        assert_eq!(store.value(cell.bias).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_cell_gives_zero_hidden() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 2, &mut rng());
        store.value_mut(cell.weight).fill(0.0);
        store.value_mut(cell.bias).fill(0.0);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::vector(vec![0.0; 3])).unwrap();
        let s0 = LstmState::zeros(&mut tape, 2).unwrap();
        let s1 = cell.step(&mut tape, x, s0).unwrap();
        assert_eq!(tape.value(s1.h).data(), &[0.0, 0.0]);
    }

    #[test]
    fn step_is_deterministic() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 2, &mut rng());
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::vector(vec![0.3, -0.1, 0.8])).unwrap();
        let s0 = LstmState::zeros(&mut tape, 2).unwrap();
        let a = cell.step(&mut tape, x, s0).unwrap();
        let b = cell.step(&mut tape, x, s0).unwrap();
        assert_eq!(tape.value(a.h), tape.value(b.h));
        assert_eq!(tape.value(a.c), tape.value(b.c));
    }

    #[test]
    fn three_chained_steps_pass_gradcheck() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 4, &mut r);
        let xs = store.add_uniform("xs", 3, 3, &mut r);
        let report = finite_difference_check(&mut store, 1e-5, false, |tape| {
            let x = tape.param(xs);
            let states = cell.run(tape, x, false)?;
            let h = states.last().unwrap().h;
            let sq = tape.mul(h, h)?;
            let s = tape.sum(sq)?;
            let c = tape.sum(states[1].c)?;
            tape.add(s, c)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn encoder_and_store(hidden: usize) -> (ParamStore, SequenceEncoder) {
        let mut store = ParamStore::new();
        let enc = SequenceEncoder::new(&mut store, "enc", 3, hidden, 20, &mut rng());
        (store, enc)
    }

    #[test]
    fn single_token_uses_both_directions_once() {
        let (store, enc) = encoder_and_store(2);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::vector(vec![0.5, -0.5, 0.25])).unwrap();
        let h = enc.bidirectional(&mut tape, x).unwrap();
        assert_eq!(tape.shape(h), [4, 1]);
        let s0 = LstmState::zeros(&mut tape, 2).unwrap();
        let f = enc.forward.step(&mut tape, x, s0).unwrap();
        let b = enc.backward.step(&mut tape, x, s0).unwrap();
        let mut expect = tape.value(f.h).data().to_vec();
        expect.extend_from_slice(tape.value(b.h).data());
        assert_eq!(tape.value(h).data(), &expect[..]);
    }

    #[test]
    fn tied_directions_on_palindrome_are_column_symmetric() {
        let (mut store, enc) = encoder_and_store(2);
        let w = store.value(enc.forward.weight).clone();
        *store.value_mut(enc.backward.weight) = w;
        let cols = vec![vec![0.1, 0.2, 0.3], vec![-0.4, 0.5, 0.0], vec![0.1, 0.2, 0.3]];
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_columns(&cols)).unwrap();
        let hv = enc.bidirectional(&mut tape, x).unwrap();
        let h = tape.value(hv).clone();
        // Forward half of column t equals backward half of column T-1-t.
        for t in 0..3 {
            for k in 0..2 {
                assert!((h.get(k, t) - h.get(2 + k, 2 - t)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn reversing_input_reverses_and_swaps_halves() {
        let (store, enc) = encoder_and_store(2);
        let cols = vec![vec![0.1, 0.2, 0.3], vec![-0.4, 0.5, 0.0], vec![0.7, -0.2, 0.9]];
        let rev: Vec<_> = cols.iter().rev().cloned().collect();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_columns(&cols)).unwrap();
        let xr = tape.constant(Tensor::from_columns(&rev)).unwrap();
        // Swap direction weights so the reversed run of one equals the other.
        let hv = enc.bidirectional(&mut tape, x).unwrap();
        let h = tape.value(hv).clone();
        let swapped = SequenceEncoder {
            forward: enc.backward.clone(),
            backward: enc.forward.clone(),
            ..enc.clone()
        };
        let hrv = swapped.bidirectional(&mut tape, xr).unwrap();
        let hr = tape.value(hrv).clone();
        for t in 0..3 {
            for k in 0..2 {
                assert!((h.get(k, t) - hr.get(2 + k, 2 - t)).abs() < 1e-15);
                assert!((h.get(2 + k, t) - hr.get(k, 2 - t)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let (store, enc) = encoder_and_store(2);
        let mut store = store;
        let emb = store.add("emb", Tensor::zeros(5, 3));
        let mut tape = Tape::new(&store);
        assert!(enc.encode(&mut tape, emb, &[], 0.0).is_err());
    }

    #[test]
    fn inner_attention_singleton_and_identical_columns() {
        let (store, enc) = encoder_and_store(2);
        let mut tape = Tape::new(&store);
        let h1 = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4])).unwrap();
        let (pi, attn) = enc.attention.pool(&mut tape, h1).unwrap();
        assert_eq!(tape.value(attn).data(), &[1.0]);
        assert_eq!(tape.value(pi).data(), tape.value(h1).data());

        let col = vec![0.3, -0.2, 0.9, 0.1];
        let same = tape.constant(Tensor::from_columns(&[col.clone(), col.clone(), col])).unwrap();
        let (_, attn) = enc.attention.pool(&mut tape, same).unwrap();
        for &a in tape.value(attn).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_attention_matches_hand_evaluation() {
        // input dim 2, attention dim 2, T = 3
        let mut store = ParamStore::new();
        let att = InnerAttention {
            w_hidden: store.add("w2", Tensor::new(2, 2, vec![1.0, 0.5, -0.5, 2.0])),
            b_hidden: store.add("b1", Tensor::vector(vec![0.1, -0.1])),
            w_score: store.add("w1", Tensor::new(1, 2, vec![1.5, -1.0])),
            b_score: store.add("b2", Tensor::scalar(0.2)),
        };
        let cols: [[f64; 2]; 3] = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        // Independent evaluation of the two-layer perceptron and softmax.
        let scores: Vec<f64> = cols
            .iter()
            .map(|h| {
                let a0: f64 = (1.0 * h[0] + 0.5 * h[1] + 0.1).tanh();
                let a1: f64 = (-0.5 * h[0] + 2.0 * h[1] - 0.1).tanh();
                1.5 * a0 - 1.0 * a1 + 0.2
            })
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let weights: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
        let pi0: f64 = cols.iter().zip(&weights).map(|(h, w)| h[0] * w).sum();
        let pi1: f64 = cols.iter().zip(&weights).map(|(h, w)| h[1] * w).sum();

        let mut tape = Tape::new(&store);
        let h = tape
            .constant(Tensor::from_columns(&cols.iter().map(|c| c.to_vec()).collect::<Vec<_>>()))
            .unwrap();
        let (pi, attn) = att.pool(&mut tape, h).unwrap();
        for (a, b) in tape.value(attn).data().iter().zip(&weights) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((tape.value(pi).data()[0] - pi0).abs() < 1e-12);
        assert!((tape.value(pi).data()[1] - pi1).abs() < 1e-12);
    }

    #[test]
    fn encoded_pi_is_convex_combination() {
        let (mut store, enc) = encoder_and_store(3);
        let emb = store.add_uniform("emb", 10, 3, &mut rng());
        let mut tape = Tape::new(&store);
        let e = enc.encode(&mut tape, emb, &[4, 5, 6, 7], 0.0).unwrap();
        let attn = tape.value(e.attn).clone();
        assert!((attn.sum() - 1.0).abs() < 1e-9);
        assert!(attn.data().iter().all(|&a| a > 0.0 && a < 1.0));
        let h = tape.value(e.states).clone();
        let pi = tape.value(e.pi).clone();
        for r in 0..h.rows() {
            let row = h.row(r);
            let (lo, hi) = row.iter().fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
            let p = pi.get(r, 0);
            assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
            let expect: f64 = row.iter().zip(attn.data()).map(|(a, b)| a * b).sum();
            assert!((p - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn long_inputs_are_truncated() {
        let mut store = ParamStore::new();
        let enc = SequenceEncoder::new(&mut store, "enc", 3, 2, 4, &mut rng());
        let emb = store.add_uniform("emb", 10, 3, &mut rng());
        let mut tape = Tape::new(&store);
        let e = enc.encode(&mut tape, emb, &[4, 5, 6, 7, 8, 9], 0.0).unwrap();
        assert_eq!(tape.shape(e.states), [4, 4]);
    }
}
