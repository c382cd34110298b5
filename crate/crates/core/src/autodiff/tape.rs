use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParamId, ParamStore, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `m x 1` against `m x n`.
    Col,
    /// `1 x n` against `m x n`.
    Row,
    /// `1 x 1` against anything.
    Scalar,
}

impl Bcast {
    fn resolve(a: &Tensor, b: &Tensor) -> Option<Self> {
        let (ar, ac, br, bc) = (a.rows(), a.cols(), b.rows(), b.cols());
        if ar == br && ac == bc {
            Some(Self::Same)
        } else if br == 1 && bc == 1 {
            Some(Self::Scalar)
        } else if br == ar && bc == 1 {
            Some(Self::Col)
        } else if br == 1 && bc == ac {
            Some(Self::Row)
        } else {
            None
        }
    }

    #[inline]
    fn index(self, i: usize, j: usize, b: &Tensor) -> usize {
        match self {
            Self::Same => i * b.cols() + j,
            Self::Col => i,
            Self::Row => j,
            Self::Scalar => 0,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Embed {
        table: ParamId,
        ids: Vec<usize>,
        frozen_row: Option<usize>,
    },
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Softmax {
        src: Var,
        axis: usize,
    },
    LogSoftmax {
        src: Var,
        axis: usize,
    },
    MaxPool {
        src: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Dropout {
        src: Var,
        mask: Vec<f64>,
    },
    BatchNorm {
        src: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Clamp {
        src: Var,
        lo: f64,
        hi: f64,
    },
    Norm(Var),
    Gather {
        src: Var,
        index: Vec<(usize, usize)>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Normalization statistics for [`Tape::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch (training).
    Batch,
    /// Normalize with frozen running statistics (evaluation).
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-feature mean and biased variance of a normalized batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Wengert list of executed operations. Parameters are read from a borrowed
/// [`ParamStore`]; [`Tape::backward`] returns gradients without touching it.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    training: bool,
    rng: ChaCha8Rng,
}

type Result<T> = std::result::Result<T, TensorError>;

impl<'p> Tape<'p> {
    /// Evaluation tape: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; params.len()],
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training tape: dropout masks are drawn from a generator seeded with `seed`.
    pub fn training(params: &'p ParamStore, seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let t = &self.nodes[v.0].value;
        [t.rows(), t.cols()]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(&self, op: &'static str, vars: &[Var]) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            shapes: vars.iter().map(|&v| self.shape(v)).collect(),
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Constant)
    }

    /// Records a parameter leaf; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.params.value(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Gathers rows `ids` of the `|V| x d` table as the columns of a `d x T`
    /// matrix. `frozen_row` never receives gradient.
    pub fn embed(&mut self, table: ParamId, ids: &[usize], frozen_row: Option<usize>) -> Result<Var> {
        let t = self.params.value(table);
        let dim = t.cols();
        if ids.iter().any(|&i| i >= t.rows()) {
            return Err(TensorError::Invalid {
                op: "embed",
                msg: format!("token id out of range for {} rows", t.rows()),
            });
        }
        let cols = ids.len();
        let mut data = vec![0.0; dim * cols];
        for (j, &id) in ids.iter().enumerate() {
            for (k, &v) in t.row(id).iter().enumerate() {
                data[k * cols + j] = v;
            }
        }
        self.push(
            "embed",
            Tensor::new(dim, cols, data),
            Op::Embed {
                table,
                ids: ids.to_vec(),
                frozen_row,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(self.mismatch("matmul", &[a, b]));
        }
        let out = ta.matmul(tb);
        self.push("matmul", out, Op::MatMul(a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = Bcast::resolve(ta, tb).ok_or_else(|| self.mismatch(name, &[a, b]))?;
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(r * c);
        let (da, db) = (ta.data(), tb.data());
        for i in 0..r {
            for j in 0..c {
                out.push(f(da[i * c + j], db[bc.index(i, j, tb)]));
            }
        }
        self.push(name, Tensor::new(r, c, out), make(a, b, bc))
    }

    /// Elementwise `a + b`; `b` may broadcast as a column, row or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("subtract", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("multiply", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push("scale", out, Op::Scale(a, factor))
    }

    /// Concatenates along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "needs at least one part and axis 0 or 1".into(),
            });
        }
        let first = self.shape(parts[0]);
        let other = 1 - axis;
        if parts.iter().any(|&p| self.shape(p)[other] != first[other]) {
            return Err(self.mismatch("concat", parts));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let out = if axis == 0 {
            let mut data = Vec::with_capacity(total * first[1]);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(total, first[1], data)
        } else {
            let rows = first[0];
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(rows, total, data)
        };
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Takes `len` rows (`axis = 0`) or columns (`axis = 1`) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} out of bounds for shape [{r}, {c}] axis {axis}", start + len),
            });
        }
        let out = if axis == 0 {
            Tensor::new(len, c, t.data()[start * c..(start + len) * c].to_vec())
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&t.row(i)[start..start + len]);
            }
            Tensor::new(r, len, data)
        };
        self.push("slice", out, Op::Slice { src: a, axis, start })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push("log", out, Op::Log(a))
    }

    /// Softmax over each column (`axis = 0`) or each row (`axis = 1`).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_axis(self.value(a), axis, false);
        self.push("softmax", out, Op::Softmax { src: a, axis })
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_axis(self.value(a), axis, true);
        self.push("log_softmax", out, Op::LogSoftmax { src: a, axis })
    }

    /// Maxout pooling: consecutive groups of `pool` rows collapse to their max.
    pub fn max_pool(&mut self, a: Var, pool: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if pool == 0 || r % pool != 0 {
            return Err(TensorError::Invalid {
                op: "max_pool",
                msg: format!("{r} rows not divisible by pool size {pool}"),
            });
        }
        let out_rows = r / pool;
        let mut data = Vec::with_capacity(out_rows * c);
        let mut argmax = Vec::with_capacity(out_rows * c);
        for g in 0..out_rows {
            for j in 0..c {
                let mut best = (g * pool) * c + j;
                for k in 1..pool {
                    let idx = (g * pool + k) * c + j;
                    if t.data()[idx] > t.data()[best] {
                        best = idx;
                    }
                }
                data.push(t.data()[best]);
                argmax.push(best);
            }
        }
        self.push(
            "max_pool",
            Tensor::new(out_rows, c, data),
            Op::MaxPool { src: a, argmax },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty input".into(),
            });
        }
        let m = t.sum() / t.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(a))
    }

    /// Inverted dropout. Identity on evaluation tapes or when `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.dropout_with_mask(a, mask)
    }

    /// Multiplies by a caller-supplied mask.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(self.mismatch("dropout", &[a]));
        }
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.rows(), t.cols(), data);
        self.push("dropout", out, Op::Dropout { src: a, mask })
    }

    /// Batch normalization of each row across the columns of `a`
    /// (`features x batch`), followed by `gamma * xhat + beta` with `gamma`,
    /// `beta` of shape `features x 1`.
    pub fn batch_norm(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let t = self.value(a);
        let (f, n) = (t.rows(), t.cols());
        if self.shape(gamma) != [f, 1] || self.shape(beta) != [f, 1] || n == 0 {
            return Err(self.mismatch("batchnorm", &[a, gamma, beta]));
        }
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; f];
                let mut var = vec![0.0; f];
                for i in 0..f {
                    let row = t.row(i);
                    let m = row.iter().sum::<f64>() / n as f64;
                    mean[i] = m;
                    var[i] = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
                }
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != f || var.len() != f {
                    return Err(self.mismatch("batchnorm", &[a]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; f * n];
        let mut out = vec![0.0; f * n];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for i in 0..f {
            for j in 0..n {
                let x = (t.data()[i * n + j] - mean[i]) * inv_std[i];
                xhat[i * n + j] = x;
                out[i * n + j] = g[i] * x + b[i];
            }
        }
        let moments = batch_stats.then(|| BatchMoments {
            mean,
            var,
            count: n,
        });
        let v = self.push(
            "batchnorm",
            Tensor::new(f, n, out),
            Op::BatchNorm {
                src: a,
                gamma,
                beta,
                xhat: Tensor::new(f, n, xhat),
                inv_std,
                batch_stats,
            },
        )?;
        Ok((v, moments))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp { src: a, lo, hi })
    }

    /// Frobenius norm. The subgradient at zero is taken as zero.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).squared_norm().sqrt();
        self.push("norm", Tensor::scalar(n), Op::Norm(a))
    }

    /// Picks individual entries `(row, col)` into an `n x 1` column.
    pub fn gather(&mut self, a: Var, index: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(a);
        if index.iter().any(|&(r, c)| r >= t.rows() || c >= t.cols()) {
            return Err(self.mismatch("gather", &[a]));
        }
        let data = index.iter().map(|&(r, c)| t.get(r, c)).collect();
        self.push(
            "gather",
            Tensor::vector(data),
            Op::Gather {
                src: a,
                index: index.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients of parameters that the
    /// loss does not depend on are absent from the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::with_capacity(self.params.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    out.slot_mut(*id, y.rows(), y.cols()).add_assign(&g);
                }
                Op::Embed {
                    table,
                    ids,
                    frozen_row,
                } => {
                    let t = self.params.value(*table);
                    let slot = out.slot_mut(*table, t.rows(), t.cols());
                    let (dim, cols) = (y.rows(), y.cols());
                    for (j, &id) in ids.iter().enumerate() {
                        if Some(id) == *frozen_row {
                            continue;
                        }
                        for k in 0..dim {
                            let v = slot.get(id, k) + g.data()[k * cols + j];
                            slot.set(id, k, v);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    match &mut grads[a.0] {
                        Some(acc) => g.matmul_nt_acc(tb, acc.data_mut()),
                        slot @ None => *slot = Some(g.matmul_nt(tb)),
                    }
                    match &mut grads[b.0] {
                        Some(acc) => ta.matmul_tn_acc(&g, acc.data_mut()),
                        slot @ None => *slot = Some(ta.matmul_tn(&g)),
                    }
                }
                Op::Add(a, b, bc) => {
                    let gb = reduce_bcast(&g, *bc, self.value(*b));
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sub(a, b, bc) => {
                    let mut gb = reduce_bcast(&g, *bc, self.value(*b));
                    gb.scale_assign(-1.0);
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b, bc) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (r, c) = (ta.rows(), ta.cols());
                    let mut ga = vec![0.0; r * c];
                    let mut gab = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            ga[k] = g.data()[k] * tb.data()[bc.index(i, j, tb)];
                            gab[k] = g.data()[k] * ta.data()[k];
                        }
                    }
                    let gb = reduce_bcast(&Tensor::new(r, c, gab), *bc, tb);
                    accumulate(&mut grads, *a, Tensor::new(r, c, ga));
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => {
                    let mut ga = g;
                    ga.scale_assign(*f);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for &p in parts {
                        let ps = self.shape(p);
                        let piece = if *axis == 0 {
                            let c = ps[1];
                            Tensor::new(ps[0], c, g.data()[offset * c..(offset + ps[0]) * c].to_vec())
                        } else {
                            let mut data = Vec::with_capacity(ps[0] * ps[1]);
                            for i in 0..ps[0] {
                                data.extend_from_slice(&g.row(i)[offset..offset + ps[1]]);
                            }
                            Tensor::new(ps[0], ps[1], data)
                        };
                        offset += ps[*axis];
                        accumulate(&mut grads, p, piece);
                    }
                }
                Op::Slice { src, axis, start } => {
                    let ss = self.shape(*src);
                    let mut ga = Tensor::zeros(ss[0], ss[1]);
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let (si, sj) = if *axis == 0 { (i + start, j) } else { (i, j + start) };
                            ga.set(si, sj, g.get(i, j));
                        }
                    }
                    accumulate(&mut grads, *src, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Tanh(a) => {
                    let ga = zip_map(&g, y, |gi, yi| gi * (1.0 - yi * yi));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_map(&g, y, |gi, yi| gi * yi * (1.0 - yi));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = zip_map(&g, self.value(*a), |gi, xi| gi / xi);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax { src, axis } => {
                    let ga = softmax_backward(&g, y, *axis, false);
                    accumulate(&mut grads, *src, ga);
                }
                Op::LogSoftmax { src, axis } => {
                    let ga = softmax_backward(&g, y, *axis, true);
                    accumulate(&mut grads, *src, ga);
                }
                Op::MaxPool { src, argmax } => {
                    let ss = self.shape(*src);
                    let mut ga = Tensor::zeros(ss[0], ss[1]);
                    for (k, &src_idx) in argmax.iter().enumerate() {
                        ga.data_mut()[src_idx] += g.data()[k];
                    }
                    accumulate(&mut grads, *src, ga);
                }
                Op::Sum(a) => {
                    let s = self.shape(*a);
                    accumulate(&mut grads, *a, Tensor::filled(s[0], s[1], g.item()));
                }
                Op::Mean(a) => {
                    let s = self.shape(*a);
                    let n = (s[0] * s[1]) as f64;
                    accumulate(&mut grads, *a, Tensor::filled(s[0], s[1], g.item() / n));
                }
                Op::Dropout { src, mask } => {
                    let data = g.data().iter().zip(mask).map(|(gi, m)| gi * m).collect();
                    accumulate(&mut grads, *src, Tensor::new(g.rows(), g.cols(), data));
                }
                Op::BatchNorm {
                    src,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (f, n) = (g.rows(), g.cols());
                    let gv = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; f];
                    let mut dbeta = vec![0.0; f];
                    let mut dx = vec![0.0; f * n];
                    for i in 0..f {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        dbeta[i] = sum_g;
                        dgamma[i] = sum_gx;
                        let scale = gv[i] * inv_std[i];
                        for j in 0..n {
                            dx[i * n + j] = if *batch_stats {
                                scale * (gr[j] - sum_g / n as f64 - xr[j] * sum_gx / n as f64)
                            } else {
                                scale * gr[j]
                            };
                        }
                    }
                    accumulate(&mut grads, *src, Tensor::new(f, n, dx));
                    accumulate(&mut grads, *gamma, Tensor::vector(dgamma));
                    accumulate(&mut grads, *beta, Tensor::vector(dbeta));
                }
                Op::Clamp { src, lo, hi } => {
                    let ga = zip_map(&g, self.value(*src), |gi, xi| {
                        if xi < *lo || xi > *hi {
                            0.0
                        } else {
                            gi
                        }
                    });
                    accumulate(&mut grads, *src, ga);
                }
                Op::Norm(a) => {
                    let n = y.item();
                    let ta = self.value(*a);
                    let ga = if n > 0.0 {
                        ta.map(|v| g.item() * v / n)
                    } else {
                        Tensor::zeros(ta.rows(), ta.cols())
                    };
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather { src, index } => {
                    let ss = self.shape(*src);
                    let mut ga = Tensor::zeros(ss[0], ss[1]);
                    for (k, &(r, c)) in index.iter().enumerate() {
                        let v = ga.get(r, c) + g.data()[k];
                        ga.set(r, c, v);
                    }
                    accumulate(&mut grads, *src, ga);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data)
}

fn reduce_bcast(g: &Tensor, bc: Bcast, b: &Tensor) -> Tensor {
    match bc {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::scalar(g.sum()),
        Bcast::Col => Tensor::vector((0..g.rows()).map(|i| g.row(i).iter().sum()).collect()),
        Bcast::Row => {
            let mut out = Tensor::zeros(1, b.cols());
            for i in 0..g.rows() {
                for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
                    *o += v;
                }
            }
            out
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (or log-softmax) along an axis; the maximum is
/// subtracted before exponentiation.
pub fn softmax_axis(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = t.clone();
    let (outer, inner) = if axis == 0 { (c, r) } else { (r, c) };
    let at = |o: usize, k: usize| if axis == 0 { k * c + o } else { o * c + k };
    for o in 0..outer {
        let max = (0..inner).map(|k| t.data()[at(o, k)]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..inner).map(|k| (t.data()[at(o, k)] - max).exp()).sum();
        let log_sum = sum.ln();
        for k in 0..inner {
            let z = t.data()[at(o, k)] - max;
            out.data_mut()[at(o, k)] = if log { z - log_sum } else { z.exp() / sum };
        }
    }
    out
}

fn softmax_backward(g: &Tensor, y: &Tensor, axis: usize, log: bool) -> Tensor {
    let (r, c) = (y.rows(), y.cols());
    let mut out = Tensor::zeros(r, c);
    let (outer, inner) = if axis == 0 { (c, r) } else { (r, c) };
    let at = |o: usize, k: usize| if axis == 0 { k * c + o } else { o * c + k };
    for o in 0..outer {
        if log {
            let sum_g: f64 = (0..inner).map(|k| g.data()[at(o, k)]).sum();
            for k in 0..inner {
                let i = at(o, k);
                out.data_mut()[i] = g.data()[i] - y.data()[i].exp() * sum_g;
            }
        } else {
            let dot: f64 = (0..inner).map(|k| g.data()[at(o, k)] * y.data()[at(o, k)]).sum();
            for k in 0..inner {
                let i = at(o, k);
                out.data_mut()[i] = y.data()[i] * (g.data()[i] - dot);
            }
        }
    }
    out
}
