//! Tape-based reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Graph`] records every forward operation as a node. Parameters enter
//! either whole ([`Graph::param`]) or as gathered rows ([`Graph::rows`], the
//! embedding lookup); on [`Graph::backward`] their gradients are added into a
//! [`GradStore`]. Frozen parameters receive nothing.

use super::params::{GradStore, ParamId, ParamRegistry};
use super::tensor::Tensor2;
use crate::error::{Result, TipsError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Rows(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulCol(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanCols(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamRegistry,
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor2, b: &Tensor2) -> TipsError {
    TipsError::Dimension {
        op,
        left: a.shape(),
        right: b.shape(),
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

/// `ln σ(x)`, stable for large |x|.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamRegistry) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn params(&self) -> &'p ParamRegistry {
        self.params
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.value(id).clone();
        self.push(value, Op::Param(id))
    }

    /// Embedding lookup: gathers `idx` rows of a parameter table.
    pub fn rows(&mut self, id: ParamId, idx: &[usize]) -> Result<Var> {
        let table = self.params.value(id);
        let mut out = Tensor2::zeros(idx.len(), table.cols());
        for (r, &i) in idx.iter().enumerate() {
            if i >= table.rows() {
                return Err(TipsError::Index {
                    what: "embedding table",
                    index: i,
                    len: table.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(table.row(i));
        }
        Ok(self.push(out, Op::Rows(id, idx.to_vec())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err("add", x, y));
        }
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err("sub", x, y));
        }
        let mut out = x.clone();
        for (o, v) in out.data_mut().iter_mut().zip(y.data()) {
            *o -= v;
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// `x + b` with the `1×c` row `b` broadcast over rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(dim_err("add_row", xv, bv));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, v) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    /// `x·W + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(k);
        self.push(out, Op::Scale(x, k))
    }

    /// Multiplies row `i` of `x` by `c[i, 0]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(c));
        if cv.cols() != 1 || cv.rows() != xv.rows() {
            return Err(dim_err("mul_col", xv, cv));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let k = cv.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.push(out, Op::MulCol(x, c)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = log_sigmoid(*v));
        self.push(out, Op::LogSigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() == 0 {
            return Err(TipsError::Precondition("softmax over an empty row".into()));
        }
        let out = softmax_rows(xv);
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(TipsError::Index {
                what: "column slice",
                index: start + len,
                len: xv.cols(),
            });
        }
        let mut out = Tensor2::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r)
                .copy_from_slice(&xv.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(dim_err("concat_cols", self.value(parts[0]), pv));
            }
            cols += pv.cols();
        }
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(TipsError::Index {
                what: "row slice",
                index: start + len,
                len: xv.rows(),
            });
        }
        let c = xv.cols();
        let out =
            Tensor2::from_vec(len, c, xv.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows(x, start)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor2::filled(1, 1, s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.data().len().max(1) as f64;
        let s = xv.sum() / n;
        self.push(Tensor2::filled(1, 1, s), Op::MeanAll(x))
    }

    /// Mean across columns, giving a `rows×1` column.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols().max(1) as f64;
        let vals: Vec<f64> = (0..xv.rows()).map(|r| xv.row(r).iter().sum::<f64>() / c).collect();
        self.push(Tensor2::column_vector(&vals), Op::MeanCols(x))
    }

    /// Reverse sweep seeded with `d loss / d node = seed` for each listed
    /// node (any shape; scalars are `1×1`). Parameter gradients are added
    /// into `grads`.
    pub fn backward(&self, seeds: &[(Var, Tensor2)], grads: &mut GradStore) -> Result<()> {
        let mut adj: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, seed) in seeds {
            if seed.shape() != self.value(*v).shape() {
                return Err(dim_err("backward seed", self.value(*v), seed));
            }
            accumulate(&mut adj[v.0], seed);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    if self.params.is_trainable(*id) {
                        grads.slot_mut(*id).add_assign(&g);
                    }
                }
                Op::Rows(id, idx) => {
                    if self.params.is_trainable(*id) {
                        let slot = grads.slot_mut(*id);
                        for (r, &row) in idx.iter().enumerate() {
                            for (d, s) in slot.row_mut(row).iter_mut().zip(g.row(r)) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(&g)?;
                    accumulate(&mut adj[a.0], &da);
                    accumulate(&mut adj[b.0], &db);
                }
                Op::MatMulNt(a, b) => {
                    // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                    let da = g.matmul(self.value(*b))?;
                    let db = g.matmul_tn(self.value(*a))?;
                    accumulate(&mut adj[a.0], &da);
                    accumulate(&mut adj[b.0], &db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], &g);
                    accumulate(&mut adj[b.0], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[a.0], &g);
                    let mut neg = g;
                    neg.scale_assign(-1.0);
                    accumulate(&mut adj[b.0], &neg);
                }
                Op::AddRow(x, b) => {
                    let mut db = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, s) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut adj[x.0], &g);
                    accumulate(&mut adj[b.0], &db);
                }
                Op::Scale(x, k) => {
                    let mut dx = g;
                    dx.scale_assign(*k);
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::MulCol(x, c) => {
                    let (xv, cv) = (self.value(*x), self.value(*c));
                    let mut dx = g.clone();
                    let mut dc = Tensor2::zeros(cv.rows(), 1);
                    for r in 0..g.rows() {
                        let k = cv.get(r, 0);
                        dx.row_mut(r).iter_mut().for_each(|v| *v *= k);
                        dc.set(r, 0, super::tensor::dot(g.row(r), xv.row(r)));
                    }
                    accumulate(&mut adj[x.0], &dx);
                    accumulate(&mut adj[c.0], &dc);
                }
                Op::Tanh(x) => {
                    let mut dx = g;
                    for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= 1.0 - y * y;
                    }
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = g;
                    for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::LogSigmoid(x) => {
                    let mut dx = g;
                    for (d, xin) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *d *= sigmoid(-xin);
                    }
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let inner = super::tensor::dot(dx.row(r), yr);
                        for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                            *d = yv * (*d - inner);
                        }
                    }
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pc = self.value(*p).cols();
                        let mut dp = Tensor2::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        accumulate(&mut adj[p.0], &dp);
                        off += pc;
                    }
                }
                Op::SliceRows(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    let c = xv.cols();
                    dx.data_mut()[start * c..start * c + g.data().len()].copy_from_slice(g.data());
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::Transpose(x) => {
                    accumulate(&mut adj[x.0], &g.transpose());
                }
                Op::SumAll(x) => {
                    let xv = self.value(*x);
                    let dx = Tensor2::filled(xv.rows(), xv.cols(), g.data()[0]);
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::MeanAll(x) => {
                    let xv = self.value(*x);
                    let n = xv.data().len().max(1) as f64;
                    let dx = Tensor2::filled(xv.rows(), xv.cols(), g.data()[0] / n);
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::MeanCols(x) => {
                    let xv = self.value(*x);
                    let c = xv.cols().max(1) as f64;
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let k = g.get(r, 0) / c;
                        dx.row_mut(r).iter_mut().for_each(|v| *v = k);
                    }
                    accumulate(&mut adj[x.0], &dx);
                }
            }
        }
        Ok(())
    }

    /// Convenience: backward from a single scalar node with seed 1.
    pub fn backward_scalar(&self, loss: Var, grads: &mut GradStore) -> Result<()> {
        self.backward(&[(loss, Tensor2::filled(1, 1, 1.0))], grads)
    }
}

fn accumulate(slot: &mut Option<Tensor2>, g: &Tensor2) {
    match slot {
        Some(existing) => existing.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}
