//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every primitive in evaluation order. Leaves are either
//! parameters (gradients requested) or constants. [`Tape::backward`] walks the
//! record once in reverse, so each use of an operand contributes exactly one
//! adjoint term.

use std::sync::atomic::{AtomicU64, Ordering};

use super::matrix::dot;
use super::{par, Matrix};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    AddTiled(usize, usize),
    ScaleRows(usize, usize),
    ScaleCols(usize, usize),
    RepeatRows(usize, usize),
    Column(usize, usize),
    Gelu(usize),
    Relu(usize),
    Log(usize),
    SoftmaxRows(usize),
    NormalizeRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        shape: AttnShape,
        probs: Vec<f64>,
    },
    MeanGroups(usize, usize),
    MeanRows(usize),
    Sum(usize),
    Mean(usize),
    SumSq(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    param: bool,
}

/// Batch layout for fused multi-head self-attention: `batch` sequences of
/// `tokens` rows each, with `heads` equal-width column blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub tokens: usize,
    pub heads: usize,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            param: false,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn at(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        v.idx
    }

    fn val(&self, i: usize) -> &Matrix {
        &self.nodes[i].value
    }

    /// A leaf whose gradient can be requested.
    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.idx].param = true;
        v
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.at(v)].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m[(0, 0)]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.at(a), self.at(b));
        let out = self.val(ia).add(self.val(ib));
        self.push(out, Op::Add(ia, ib))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.at(a), self.at(b));
        let out = self.val(ia).sub(self.val(ib));
        self.push(out, Op::Sub(ia, ib))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.at(a), self.at(b));
        let out = self.val(ia).hadamard(self.val(ib));
        self.push(out, Op::Mul(ia, ib))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ia = self.at(a);
        let out = self.val(ia).scale(s);
        self.push(out, Op::Scale(ia, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.at(a), self.at(b));
        let out = self.val(ia).matmul(self.val(ib));
        self.push(out, Op::MatMul(ia, ib))
    }

    /// `a · bᵀ`; the natural form for `x · Wᵀ` linear layers.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.at(a), self.at(b));
        let out = self.val(ia).matmul_nt(self.val(ib));
        self.push(out, Op::MatMulNt(ia, ib))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ia = self.at(a);
        let out = self.val(ia).transpose();
        self.push(out, Op::Transpose(ia))
    }

    /// `a + 1·row` where `row` is 1×cols.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ia, ir) = (self.at(a), self.at(row));
        let (x, r) = (self.val(ia), self.val(ir));
        assert_eq!(r.shape(), (1, x.cols()), "add_row expects a 1x{} row", x.cols());
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(ia, ir))
    }

    /// Adds a k×cols `block` to every consecutive group of k rows of `a`.
    pub fn add_tiled(&mut self, a: Var, block: Var) -> Var {
        let (ia, ib) = (self.at(a), self.at(block));
        let (x, b) = (self.val(ia), self.val(ib));
        assert_eq!(x.cols(), b.cols());
        assert_eq!(x.rows() % b.rows(), 0, "add_tiled row count mismatch");
        let k = b.rows();
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, v) in out.row_mut(i).iter_mut().zip(b.row(i % k)) {
                *o += v;
            }
        }
        self.push(out, Op::AddTiled(ia, ib))
    }

    /// Multiplies row i of `a` by `s[i]`, where `s` is rows×1.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (ia, is) = (self.at(a), self.at(s));
        let (x, sv) = (self.val(ia), self.val(is));
        assert_eq!(sv.shape(), (x.rows(), 1), "scale_rows expects a column vector");
        let mut out = x.clone();
        for i in 0..out.rows() {
            let f = sv[(i, 0)];
            out.row_mut(i).iter_mut().for_each(|o| *o *= f);
        }
        self.push(out, Op::ScaleRows(ia, is))
    }

    /// Multiplies column j of `a` by `s[j]`, where `s` is 1×cols.
    pub fn scale_cols(&mut self, a: Var, s: Var) -> Var {
        let (ia, is) = (self.at(a), self.at(s));
        let (x, sv) = (self.val(ia), self.val(is));
        assert_eq!(sv.shape(), (1, x.cols()), "scale_cols expects a row vector");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, f) in out.row_mut(i).iter_mut().zip(sv.data()) {
                *o *= f;
            }
        }
        self.push(out, Op::ScaleCols(ia, is))
    }

    /// Repeats every row `k` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let ia = self.at(a);
        let x = self.val(ia);
        let out = Matrix::from_fn(x.rows() * k, x.cols(), |i, j| x[(i / k, j)]);
        self.push(out, Op::RepeatRows(ia, k))
    }

    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let ia = self.at(a);
        let out = Matrix::col_vector(&self.val(ia).column(j));
        self.push(out, Op::Column(ia, j))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ia = self.at(a);
        let out = self.val(ia).map(gelu);
        self.push(out, Op::Gelu(ia))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ia = self.at(a);
        let out = self.val(ia).map(|x| x.max(0.0));
        self.push(out, Op::Relu(ia))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let ia = self.at(a);
        let out = self.val(ia).map(f64::ln);
        self.push(out, Op::Log(ia))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ia = self.at(a);
        let out = softmax_rows(self.val(ia));
        self.push(out, Op::SoftmaxRows(ia))
    }

    /// Divides each row by its sum. Rows must have a nonzero sum.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let ia = self.at(a);
        let mut out = self.val(ia).clone();
        for i in 0..out.rows() {
            let s: f64 = out.row(i).iter().sum();
            assert!(s != 0.0, "normalize_rows on a zero-sum row");
            out.row_mut(i).iter_mut().for_each(|x| *x /= s);
        }
        self.push(out, Op::NormalizeRows(ia))
    }

    /// Row-wise layer normalization with 1×cols gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (ix, ig, ib) = (self.at(x), self.at(gain), self.at(bias));
        let (xv, g, b) = (self.val(ix), self.val(ig), self.val(ib));
        let m = xv.cols();
        assert_eq!(g.shape(), (1, m));
        assert_eq!(b.shape(), (1, m));
        let mut xhat = Matrix::zeros(xv.rows(), m);
        let mut out = Matrix::zeros(xv.rows(), m);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat[(i, j)] = h;
                out[(i, j)] = h * g.data()[j] + b.data()[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                xhat,
                inv_std,
            },
        )
    }

    /// Fused multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are (batch·tokens)×dim; sequences never attend across
    /// each other. Sequences are processed in parallel.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Var {
        let (iq, ik, iv) = (self.at(q), self.at(k), self.at(v));
        let (qv, kv, vv) = (self.val(iq), self.val(ik), self.val(iv));
        let AttnShape {
            batch,
            tokens,
            heads,
        } = shape;
        let dim = qv.cols();
        assert_eq!(qv.rows(), batch * tokens, "attention row count mismatch");
        assert_eq!(kv.shape(), qv.shape());
        assert_eq!(vv.shape(), qv.shape());
        assert_eq!(dim % heads, 0, "dim not divisible by heads");
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(batch * tokens, dim);
        let mut probs = vec![0.0; batch * heads * tokens * tokens];
        let work = batch * heads * tokens * tokens * dh * 2;
        par::for_each_chunk2(
            out.data_mut(),
            tokens * dim,
            &mut probs,
            heads * tokens * tokens,
            work,
            |b, out_b, probs_b| {
                let base = b * tokens;
                for h in 0..heads {
                    let c0 = h * dh;
                    for i in 0..tokens {
                        let qi = &qv.row(base + i)[c0..c0 + dh];
                        let p = &mut probs_b[(h * tokens + i) * tokens..(h * tokens + i + 1) * tokens];
                        for (j, pj) in p.iter_mut().enumerate() {
                            *pj = dot(qi, &kv.row(base + j)[c0..c0 + dh]) * scale;
                        }
                        softmax_in_place(p);
                        let oi = &mut out_b[i * dim + c0..i * dim + c0 + dh];
                        for (j, &pj) in p.iter().enumerate() {
                            for (o, &x) in oi.iter_mut().zip(&vv.row(base + j)[c0..c0 + dh]) {
                                *o += pj * x;
                            }
                        }
                    }
                }
            },
        );
        self.push(
            out,
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                shape,
                probs,
            },
        )
    }

    /// Averages each consecutive group of `group` rows: (n·group)×m → n×m.
    pub fn mean_groups(&mut self, a: Var, group: usize) -> Var {
        let ia = self.at(a);
        let x = self.val(ia);
        assert_eq!(x.rows() % group, 0, "mean_groups row count mismatch");
        let n = x.rows() / group;
        let mut out = Matrix::zeros(n, x.cols());
        for i in 0..x.rows() {
            let target = i / group;
            for (o, v) in out.row_mut(target).iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let out = out.scale(1.0 / group as f64);
        self.push(out, Op::MeanGroups(ia, group))
    }

    /// Column means as a 1×cols row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ia = self.at(a);
        let x = self.val(ia);
        let mut out = Matrix::zeros(1, x.cols());
        for i in 0..x.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let out = out.scale(1.0 / x.rows() as f64);
        self.push(out, Op::MeanRows(ia))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.at(a);
        let s = self.val(ia).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(ia))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ia = self.at(a);
        let x = self.val(ia);
        let s = x.sum() / x.len() as f64;
        self.push(Matrix::filled(1, 1, s), Op::Mean(ia))
    }

    /// Squared Frobenius norm.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let ia = self.at(a);
        let s = self.val(ia).frobenius_sq();
        self.push(Matrix::filled(1, 1, s), Op::SumSq(ia))
    }

    /// Mean softmax cross-entropy of `logits` (n×classes) against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.at(logits);
        let z = self.val(il);
        if labels.len() != z.rows() {
            return Err(Error::InvalidInput(format!(
                "{} labels for {} logit rows",
                labels.len(),
                z.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= z.cols()) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {} classes",
                z.cols()
            )));
        }
        let probs = softmax_rows(z);
        let loss = cross_entropy_value(z, labels);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.at(root);
        if self.val(r).shape() != (1, 1) {
            return Err(Error::InvalidInput("backward root must be a scalar".into()));
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[r] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=r).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            params: self.nodes.iter().map(|n| n.param).collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            adj,
        })
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(adj, *a, g.hadamard(self.val(*b)));
                accumulate(adj, *b, g.hadamard(self.val(*a)));
            }
            Op::Scale(a, s) => accumulate(adj, *a, g.scale(*s)),
            Op::MatMul(a, b) => {
                accumulate(adj, *a, g.matmul_nt(self.val(*b)));
                accumulate(adj, *b, self.val(*a).matmul_tn(g));
            }
            Op::MatMulNt(a, b) => {
                accumulate(adj, *a, g.matmul(self.val(*b)));
                accumulate(adj, *b, g.matmul_tn(self.val(*a)));
            }
            Op::Transpose(a) => accumulate(adj, *a, g.transpose()),
            Op::AddRow(a, row) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *row, column_sums(g));
            }
            Op::AddTiled(a, block) => {
                accumulate(adj, *a, g.clone());
                let k = self.val(*block).rows();
                let mut gb = Matrix::zeros(k, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in gb.row_mut(r % k).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(adj, *block, gb);
            }
            Op::ScaleRows(a, s) => {
                let (x, sv) = (self.val(*a), self.val(*s));
                let mut ga = g.clone();
                let mut gs = Matrix::zeros(sv.rows(), 1);
                for r in 0..g.rows() {
                    let f = sv[(r, 0)];
                    ga.row_mut(r).iter_mut().for_each(|o| *o *= f);
                    gs[(r, 0)] = dot(g.row(r), x.row(r));
                }
                accumulate(adj, *a, ga);
                accumulate(adj, *s, gs);
            }
            Op::ScaleCols(a, s) => {
                let (x, sv) = (self.val(*a), self.val(*s));
                let mut ga = g.clone();
                let mut gs = Matrix::zeros(1, sv.cols());
                for r in 0..g.rows() {
                    for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o *= sv.data()[j];
                    }
                    for (j, gsj) in gs.data_mut().iter_mut().enumerate() {
                        *gsj += g[(r, j)] * x[(r, j)];
                    }
                }
                accumulate(adj, *a, ga);
                accumulate(adj, *s, gs);
            }
            Op::RepeatRows(a, k) => {
                let x = self.val(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    for (o, v) in ga.row_mut(r / k).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::Column(a, j) => {
                let x = self.val(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    ga[(r, *j)] = g[(r, 0)];
                }
                accumulate(adj, *a, ga);
            }
            Op::Gelu(a) => accumulate(adj, *a, self.val(*a).zip_map(g, |x, gy| gy * gelu_grad(x))),
            Op::Relu(a) => accumulate(
                adj,
                *a,
                self.val(*a).zip_map(g, |x, gy| if x > 0.0 { gy } else { 0.0 }),
            ),
            Op::Log(a) => accumulate(adj, *a, self.val(*a).zip_map(g, |x, gy| gy / x)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = dot(g.row(r), y.row(r));
                    for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = y[(r, j)] * (g[(r, j)] - s);
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let (x, y) = (self.val(*a), &node.value);
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let total: f64 = x.row(r).iter().sum();
                    let s = dot(g.row(r), y.row(r));
                    for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = (g[(r, j)] - s) / total;
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.val(*gain);
                let m = xhat.cols();
                let mut gx = Matrix::zeros(xhat.rows(), m);
                let mut gg = Matrix::zeros(1, m);
                let mut gb = Matrix::zeros(1, m);
                let mut dxhat = vec![0.0; m];
                for r in 0..xhat.rows() {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    for j in 0..m {
                        dxhat[j] = gr[j] * gv.data()[j];
                        gg.data_mut()[j] += gr[j] * hr[j];
                        gb.data_mut()[j] += gr[j];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dh = dot(&dxhat, hr);
                    let f = inv_std[r] / m as f64;
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = f * (m as f64 * dxhat[j] - sum_d - hr[j] * sum_dh);
                    }
                }
                accumulate(adj, *x, gx);
                accumulate(adj, *gain, gg);
                accumulate(adj, *bias, gb);
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *shape, probs, g);
                accumulate(adj, *q, gq);
                accumulate(adj, *k, gk);
                accumulate(adj, *v, gv);
            }
            Op::MeanGroups(a, group) => {
                let x = self.val(*a);
                let f = 1.0 / *group as f64;
                let ga = Matrix::from_fn(x.rows(), x.cols(), |r, c| g[(r / group, c)] * f);
                accumulate(adj, *a, ga);
            }
            Op::MeanRows(a) => {
                let x = self.val(*a);
                let f = 1.0 / x.rows() as f64;
                let ga = Matrix::from_fn(x.rows(), x.cols(), |_, c| g[(0, c)] * f);
                accumulate(adj, *a, ga);
            }
            Op::Sum(a) => {
                let x = self.val(*a);
                accumulate(adj, *a, Matrix::filled(x.rows(), x.cols(), g[(0, 0)]));
            }
            Op::Mean(a) => {
                let x = self.val(*a);
                let f = g[(0, 0)] / x.len() as f64;
                accumulate(adj, *a, Matrix::filled(x.rows(), x.cols(), f));
            }
            Op::SumSq(a) => accumulate(adj, *a, self.val(*a).scale(2.0 * g[(0, 0)])),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let f = g[(0, 0)] / labels.len() as f64;
                let mut ga = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    ga[(r, y)] -= 1.0;
                }
                accumulate(adj, *logits, ga.scale(f));
            }
        }
    }

    fn attention_backward(
        &self,
        q: usize,
        k: usize,
        v: usize,
        shape: AttnShape,
        probs: &[f64],
        g: &Matrix,
    ) -> (Matrix, Matrix, Matrix) {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let AttnShape {
            batch,
            tokens,
            heads,
        } = shape;
        let dim = qv.cols();
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Matrix::zeros(batch * tokens, dim);
        let mut gk = Matrix::zeros(batch * tokens, dim);
        let mut gv = Matrix::zeros(batch * tokens, dim);
        let work = batch * heads * tokens * tokens * dh * 4;
        par::for_each_chunk3(
            gq.data_mut(),
            gk.data_mut(),
            gv.data_mut(),
            tokens * dim,
            work,
            |b, gq_b, gk_b, gv_b| {
                let base = b * tokens;
                let mut dp = vec![0.0; tokens];
                for h in 0..heads {
                    let c0 = h * dh;
                    for i in 0..tokens {
                        let p = &probs[((b * heads + h) * tokens + i) * tokens..][..tokens];
                        let go = &g.row(base + i)[c0..c0 + dh];
                        for j in 0..tokens {
                            let vj = &vv.row(base + j)[c0..c0 + dh];
                            dp[j] = dot(go, vj);
                            let gvj = &mut gv_b[j * dim + c0..j * dim + c0 + dh];
                            for (o, &x) in gvj.iter_mut().zip(go) {
                                *o += p[j] * x;
                            }
                        }
                        let s = dot(&dp, p);
                        let qi = &qv.row(base + i)[c0..c0 + dh];
                        for j in 0..tokens {
                            let ds = p[j] * (dp[j] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kv.row(base + j)[c0..c0 + dh];
                            let gqi = &mut gq_b[i * dim + c0..i * dim + c0 + dh];
                            for (o, &x) in gqi.iter_mut().zip(kj) {
                                *o += ds * x;
                            }
                            let gkj = &mut gk_b[j * dim + c0..j * dim + c0 + dh];
                            for (o, &x) in gkj.iter_mut().zip(qi) {
                                *o += ds * x;
                            }
                        }
                    }
                }
            },
        );
        (gq, gk, gv)
    }
}

fn accumulate(adj: &mut [Option<Matrix>], i: usize, g: Matrix) {
    match &mut adj[i] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Mean softmax cross-entropy, computed through log-sum-exp.
pub fn cross_entropy_value(z: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = z.row(i);
        let (am, max) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, x)| if x > acc.1 { (j, x) } else { acc });
        // log1p keeps full relative precision when the margin is large.
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != am)
            .map(|(_, x)| (x - max).exp())
            .sum();
        total += (max - row[y]) + rest.ln_1p();
    }
    total / labels.len().max(1) as f64
}

/// Adjoints from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    params: Vec<bool>,
    shapes: Vec<(usize, usize)>,
    adj: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to a parameter leaf. Parameters that do not
    /// influence the root get a zero gradient.
    pub fn wrt(&self, v: Var) -> Result<Matrix> {
        if v.tape != self.tape || v.idx >= self.params.len() || !self.params[v.idx] {
            return Err(Error::UnknownParameter);
        }
        Ok(match &self.adj[v.idx] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.idx];
                Matrix::zeros(r, c)
            }
        })
    }
}

/// Gradient of the scalar program `f` at `params`.
///
/// `f` receives the tape and one parameter variable per entry of `params`
/// and returns the scalar output variable.
pub fn grad<F>(params: &[Matrix], f: F) -> Result<(f64, Vec<Matrix>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let value = tape.scalar(out);
    let gs = vars.iter().map(|&v| grads.wrt(v)).collect::<Result<Vec<_>>>()?;
    Ok((value, gs))
}
