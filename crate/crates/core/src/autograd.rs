//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation in execution order; a [`Var`] is a
//! handle into it. Shape errors surface when an op is recorded, never
//! during [`Tape::backward`]. Discrete choices (cluster assignment, sort
//! order) are captured as constants and receive no gradient.
//!
//! ```
//! use wideformer::autograd::Tape;
//! use wideformer::numerics::Matrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Matrix::filled(2, 2, 3.0));
//! let y = tape.mean(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);
//! ```

use std::rc::Rc;

use crate::attention::row_entropy as entropy_of;
use crate::error::{Error, Result};
use crate::numerics::{axpy_slice, dot, matmul, matmul_nt, matmul_tn, row_softmax, softmax_in_place, Matrix};
use crate::wideformer::segment_aggregate;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Names of the recorded operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Add,
    AddRow,
    Scale,
    MulConst,
    RowSoftmax,
    Elu,
    Mean,
    Sum,
    ConcatCols,
    GatherRows,
    SegmentSoftmaxAggregate,
    SegmentMean,
    SortWeight,
    CrossEntropy,
    RowEntropy,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    RowSoftmax(Var),
    Elu(Var),
    Mean(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SegmentSoftmaxAggregate {
        q: Var,
        k: Var,
        v: Var,
        members: Rc<Vec<Vec<usize>>>,
    },
    SegmentMean {
        k: Var,
        members: Rc<Vec<Vec<usize>>>,
        centers: Option<Var>,
    },
    SortWeight {
        h: Var,
        attn: Var,
        order: Rc<Vec<Vec<usize>>>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        rows: Vec<usize>,
        probs: Matrix,
    },
    RowEntropy(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::MulConst(..) => OpKind::MulConst,
            Op::RowSoftmax(..) => OpKind::RowSoftmax,
            Op::Elu(..) => OpKind::Elu,
            Op::Mean(..) => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::SegmentSoftmaxAggregate { .. } => OpKind::SegmentSoftmaxAggregate,
            Op::SegmentMean { .. } => OpKind::SegmentMean,
            Op::SortWeight { .. } => OpKind::SortWeight,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::RowEntropy(..) => OpKind::RowEntropy,
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    param: bool,
}

/// Append-only operation log. Single owner during forward and backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<Var>,
}

impl Gradients {
    /// Accumulated gradient, `None` if the node was not reached.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter, zero-filled if the loss does not depend on it.
    pub fn param(&self, tape: &Tape, v: Var) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Matrix::zeros(r, c)
        })
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = true;
        v
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a `1 × c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::shape("add_row", x.shape(), b.shape()));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            axpy_slice(value.row_mut(r), 1.0, b.row(0));
        }
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Result<Var> {
        let value = self.value(a).hadamard(&c)?;
        Ok(self.push(value, Op::MulConst(a, c)))
    }

    pub fn row_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let value = row_softmax(self.value(a), mask)?;
        Ok(self.push(value, Op::RowSoftmax(a)))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(elu);
        self.push(value, Op::Elu(a))
    }

    /// Mean of all entries, as a `1 × 1` value.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::filled(1, 1, x.sum() / x.len().max(1) as f64);
        self.push(value, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hconcat(&refs)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::IndexOutOfRange { index: bad, len: x.rows() });
        }
        let value = x.select_rows(idx);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec())))
    }

    /// Per-cluster softmax aggregation: for each cluster `t` and target `i`,
    /// `Σ_{j∈M_t} softmax_{M_t}(q_i · k_j) v_j`. Output is `n × (m · d_v)`
    /// in cluster-major column blocks.
    pub fn segment_softmax_aggregate(&mut self, q: Var, k: Var, v: Var, members: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.cols() != kv.cols() {
            return Err(Error::shape("segment_softmax_aggregate (q vs k)", qv.shape(), kv.shape()));
        }
        if kv.rows() != vv.rows() {
            return Err(Error::shape("segment_softmax_aggregate (k vs v)", kv.shape(), vv.shape()));
        }
        check_members(&members, kv.rows())?;
        let value = segment_aggregate(qv, kv, vv, &members);
        Ok(self.push(value, Op::SegmentSoftmaxAggregate { q, k, v, members }))
    }

    /// Mean row of `k` per cluster (zero rows for empty clusters).
    ///
    /// With `centers`, the forward value is unchanged but the centers
    /// receive a straight-through gradient from the soft assignment
    /// `softmax(K Cᵀ)`.
    pub fn segment_mean(&mut self, k: Var, members: Rc<Vec<Vec<usize>>>, centers: Option<Var>) -> Result<Var> {
        let kv = self.value(k);
        check_members(&members, kv.rows())?;
        if let Some(c) = centers {
            let cv = self.value(c);
            if cv.cols() != kv.cols() || cv.rows() != members.len() {
                return Err(Error::shape("segment_mean centers", cv.shape(), (members.len(), kv.cols())));
            }
        }
        let mut value = Matrix::zeros(members.len(), kv.cols());
        for (t, mem) in members.iter().enumerate() {
            if mem.is_empty() {
                continue;
            }
            let row = value.row_mut(t);
            for &j in mem {
                axpy_slice(row, 1.0, kv.row(j));
            }
            let inv = 1.0 / mem.len() as f64;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        Ok(self.push(value, Op::SegmentMean { k, members, centers }))
    }

    /// Slot `s` of row `i` holds `attn[i, order[i][s]] · h[i, block order[i][s]]`.
    pub fn sort_weight(&mut self, h: Var, attn: Var, order: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        let (hv, av) = (self.value(h), self.value(attn));
        let m = av.cols();
        if hv.rows() != av.rows() || m == 0 || hv.cols() % m != 0 || order.len() != hv.rows() {
            return Err(Error::shape("sort_weight", hv.shape(), av.shape()));
        }
        let d = hv.cols() / m;
        let mut value = Matrix::zeros(hv.rows(), hv.cols());
        for (i, ord) in order.iter().enumerate() {
            if ord.len() != m {
                return Err(Error::shape("sort_weight order", (i, ord.len()), (i, m)));
            }
            let (a, src) = (av.row(i), hv.row(i));
            let dst = value.row_mut(i);
            for (slot, &t) in ord.iter().enumerate() {
                if t >= m {
                    return Err(Error::IndexOutOfRange { index: t, len: m });
                }
                for c in 0..d {
                    dst[slot * d + c] = a[t] * src[t * d + c];
                }
            }
        }
        Ok(self.push(value, Op::SortWeight { h, attn, order }))
    }

    /// Mean softmax cross-entropy over the listed rows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], rows: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(Error::shape("cross_entropy labels", lv.shape(), (labels.len(), 1)));
        }
        if rows.is_empty() {
            return Err(Error::param("cross_entropy over an empty row set"));
        }
        let mut probs = Matrix::zeros(rows.len(), lv.cols());
        let mut total = 0.0;
        for (o, &r) in rows.iter().enumerate() {
            if r >= lv.rows() {
                return Err(Error::IndexOutOfRange { index: r, len: lv.rows() });
            }
            let y = labels[r];
            if y >= lv.cols() {
                return Err(Error::IndexOutOfRange { index: y, len: lv.cols() });
            }
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            let p = probs.row_mut(o);
            for (pc, &x) in p.iter_mut().zip(row) {
                *pc = (x - lse).exp();
            }
        }
        let value = Matrix::filled(1, 1, total / rows.len() as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                rows: rows.to_vec(),
                probs,
            },
        ))
    }

    /// Shannon entropy of each row, `n × 1`.
    pub fn row_entropy(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            value[(r, 0)] = entropy_of(x.row(r));
        }
        self.push(value, Op::RowEntropy(a))
    }

    /// Reverse accumulation from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Contract(format!("backward needs a 1x1 loss, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].param)
            .map(Var)
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let mut acc = |v: Var, delta: Matrix| {
            debug_assert!(v.0 < id);
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &delta).expect("gradient shape"),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, matmul_nt(g, self.value(*b)).expect("shape"));
                acc(*b, matmul_tn(self.value(*a), g).expect("shape"));
            }
            Op::MatMulNt(a, b) => {
                acc(*a, matmul(g, self.value(*b)).expect("shape"));
                acc(*b, matmul_tn(g, self.value(*a)).expect("shape"));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    axpy_slice(gb.row_mut(0), 1.0, g.row(r));
                }
                acc(*bias, gb);
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::MulConst(a, c) => acc(*a, g.hadamard(c).expect("shape")),
            Op::RowSoftmax(a) => {
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for ((o, &p), &gg) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (gg - inner);
                    }
                }
                acc(*a, gx);
            }
            Op::Elu(a) => {
                let x = self.value(*a);
                let mut gx = g.clone();
                for ((o, &xv), &yv) in gx.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    if xv <= 0.0 {
                        *o *= yv + 1.0;
                    }
                }
                acc(*a, gx);
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g[(0, 0)] / (r * c).max(1) as f64));
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, g.col_block(off, w));
                    off += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.value(*a).shape();
                let mut gx = Matrix::zeros(r, c);
                for (o, &i) in idx.iter().enumerate() {
                    axpy_slice(gx.row_mut(i), 1.0, g.row(o));
                }
                acc(*a, gx);
            }
            Op::SegmentSoftmaxAggregate { q, k, v, members } => {
                let (gq, gk, gv) = segment_backward(self.value(*q), self.value(*k), self.value(*v), members, g);
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
            Op::SegmentMean { k, members, centers } => {
                let kv = self.value(*k);
                let mut gk = Matrix::zeros(kv.rows(), kv.cols());
                for (t, mem) in members.iter().enumerate() {
                    if mem.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / mem.len() as f64;
                    for &j in mem {
                        axpy_slice(gk.row_mut(j), inv, g.row(t));
                    }
                }
                acc(*k, gk);
                if let Some(c) = centers {
                    acc(*c, soft_center_grad(kv, self.value(*c), g));
                }
            }
            Op::SortWeight { h, attn, order } => {
                let (hv, av) = (self.value(*h), self.value(*attn));
                let m = av.cols();
                let d = hv.cols() / m;
                let mut gh = Matrix::zeros(hv.rows(), hv.cols());
                let mut ga = Matrix::zeros(av.rows(), m);
                for (i, ord) in order.iter().enumerate() {
                    let (a, src, gr) = (av.row(i), hv.row(i), g.row(i));
                    for (slot, &t) in ord.iter().enumerate() {
                        let gs = &gr[slot * d..(slot + 1) * d];
                        ga[(i, t)] += dot(gs, &src[t * d..(t + 1) * d]);
                        axpy_slice(&mut gh.row_mut(i)[t * d..(t + 1) * d], a[t], gs);
                    }
                }
                acc(*h, gh);
                acc(*attn, ga);
            }
            Op::CrossEntropy {
                logits,
                labels,
                rows,
                probs,
            } => {
                let (r, c) = self.value(*logits).shape();
                let mut gx = Matrix::zeros(r, c);
                let s = g[(0, 0)] / rows.len() as f64;
                for (o, &row) in rows.iter().enumerate() {
                    let dst = gx.row_mut(row);
                    axpy_slice(dst, s, probs.row(o));
                    dst[labels[row]] -= s;
                }
                acc(*logits, gx);
            }
            Op::RowEntropy(a) => {
                let x = self.value(*a);
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gr = g[(r, 0)];
                    for (o, &p) in gx.row_mut(r).iter_mut().zip(x.row(r)) {
                        if p > 0.0 {
                            *o = -gr * (p.ln() + 1.0);
                        }
                    }
                }
                acc(*a, gx);
            }
        }
    }
}

fn check_members(members: &[Vec<usize>], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for mem in members {
        for &j in mem {
            if j >= n {
                return Err(Error::IndexOutOfRange { index: j, len: n });
            }
            if std::mem::replace(&mut seen[j], true) {
                return Err(Error::Contract(format!("node {j} belongs to two clusters")));
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Contract("cluster members do not cover every node".into()));
    }
    Ok(())
}

fn segment_backward(q: &Matrix, k: &Matrix, v: &Matrix, members: &[Vec<usize>], g: &Matrix) -> (Matrix, Matrix, Matrix) {
    let dv = v.cols();
    let mut gq = Matrix::zeros(q.rows(), q.cols());
    let mut gk = Matrix::zeros(k.rows(), k.cols());
    let mut gv = Matrix::zeros(v.rows(), v.cols());
    let mut w = Vec::new();
    let mut dw = Vec::new();
    for i in 0..q.rows() {
        let qi = q.row(i);
        for (t, mem) in members.iter().enumerate() {
            if mem.is_empty() {
                continue;
            }
            let gi = &g.row(i)[t * dv..(t + 1) * dv];
            w.clear();
            w.extend(mem.iter().map(|&j| dot(qi, k.row(j))));
            softmax_in_place(&mut w, None);
            dw.clear();
            dw.extend(mem.iter().map(|&j| dot(gi, v.row(j))));
            let inner = dot(&w, &dw);
            for ((&wj, &dwj), &j) in w.iter().zip(&dw).zip(mem) {
                axpy_slice(gv.row_mut(j), wj, gi);
                let ds = wj * (dwj - inner);
                if ds != 0.0 {
                    axpy_slice(gq.row_mut(i), ds, k.row(j));
                    axpy_slice(gk.row_mut(j), ds, qi);
                }
            }
        }
    }
    (gq, gk, gv)
}

/// Gradient of `Σ_t ⟨G_t, K̃_t(C)⟩` with respect to `C`, where
/// `K̃_t = Σ_j P_jt K_j / Σ_j P_jt` and `P = softmax(K Cᵀ)` row-wise.
fn soft_center_grad(k: &Matrix, c: &Matrix, g: &Matrix) -> Matrix {
    let m = c.rows();
    let mut p = matmul_nt(k, c).expect("shape");
    for r in 0..p.rows() {
        softmax_in_place(p.row_mut(r), None);
    }
    let mut z = vec![0.0; m];
    let mut soft = Matrix::zeros(m, k.cols());
    for j in 0..k.rows() {
        for t in 0..m {
            z[t] += p[(j, t)];
            axpy_slice(soft.row_mut(t), p[(j, t)], k.row(j));
        }
    }
    for t in 0..m {
        let inv = 1.0 / z[t];
        soft.row_mut(t).iter_mut().for_each(|x| *x *= inv);
    }
    let g_soft: Vec<f64> = (0..m).map(|t| dot(g.row(t), soft.row(t))).collect();
    let mut gc = Matrix::zeros(m, c.cols());
    let mut gp = vec![0.0; m];
    for j in 0..k.rows() {
        let kj = k.row(j);
        for t in 0..m {
            gp[t] = (dot(g.row(t), kj) - g_soft[t]) / z[t];
        }
        let pj = p.row(j);
        let inner = dot(pj, &gp);
        for t in 0..m {
            let ds = pj[t] * (gp[t] - inner);
            axpy_slice(gc.row_mut(t), ds, kj);
        }
    }
    gc
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `(parameter index, row, col)` of the largest error.
    pub worst: Option<(usize, usize, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Denominator floor for relative gradient errors.
pub const REL_ERR_FLOOR: f64 = 1e-8;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Evaluates a recorded scalar function at the given parameter values.
pub fn eval_scalar<F>(f: &F, params: &[Matrix]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::Contract(format!("scalar function returned {}x{}", v.rows(), v.cols())));
    }
    Ok(v[(0, 0)])
}

/// Tape gradients of a recorded scalar function.
pub fn tape_gradients<F>(f: &F, params: &[Matrix]) -> Result<Vec<Matrix>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.param(&tape, v)).collect())
}

/// Central differences of a recorded scalar function, one coordinate at a time.
pub fn numeric_gradients<F>(f: &F, params: &[Matrix], h: f64) -> Result<Vec<Matrix>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::param("finite-difference step must be positive"));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Matrix::zeros(params[p].rows(), params[p].cols());
        for idx in 0..params[p].len() {
            let orig = work[p].data()[idx];
            work[p].data_mut()[idx] = orig + h;
            let plus = eval_scalar(f, &work)?;
            work[p].data_mut()[idx] = orig - h;
            let minus = eval_scalar(f, &work)?;
            work[p].data_mut()[idx] = orig;
            g.data_mut()[idx] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares tape gradients with central differences.
pub fn grad_check<F>(f: F, params: &[Matrix], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = tape_gradients(&f, params)?;
    let numeric = numeric_gradients(&f, params, h)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        tol,
    };
    for (p, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for r in 0..a.rows() {
            for c in 0..a.cols() {
                let e = rel_err(a[(r, c)], n[(r, c)]);
                report.checked += 1;
                if e > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(e);
                    report.worst = Some((p, r, c));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{random_matrix, Dist, Rng};

    fn rand(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        random_matrix(rng, r, c, Dist::Gaussian(1.0)).unwrap()
    }

    /// Fixed random weights turn any output into a generic scalar.
    fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let (r, c) = tape.value(x).shape();
        let w = random_matrix(&mut Rng::new(seed), r, c, Dist::Gaussian(1.0)).unwrap();
        let prod = tape.mul_const(x, w).unwrap();
        tape.sum(prod)
    }

    fn check<F>(f: F, params: &[Matrix])
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let r = grad_check(f, params, 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn add_zero_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::filled(2, 3, 1.5));
        let z = tape.constant(Matrix::zeros(2, 3));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn matmul_gradient_closed_form() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(a), tape.param(b.clone()));
        let p = tape.matmul(va, vb).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        // d/dA sum(AB) = 1 Bᵀ
        let want = matmul_nt(&Matrix::filled(2, 2, 1.0), &b).unwrap();
        assert_eq!(g.get(va).unwrap(), &want);
    }

    #[test]
    fn constant_and_mean_losses() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::filled(3, 4, 2.0));
        let unused = tape.param(Matrix::filled(2, 2, 1.0));
        let c = tape.constant(Matrix::filled(1, 1, 7.0));
        let g = tape.backward(c).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.param(&tape, x), Matrix::zeros(3, 4));

        let m = tape.mean(x);
        let g = tape.backward(m).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-16));
        assert_eq!(g.param(&tape, unused), Matrix::zeros(2, 2));
        assert_eq!(g.params().len(), 2);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_at_record_time() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::zeros(2, 3));
        let b = tape.param(Matrix::zeros(2, 3));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.add_row(a, b).is_err());
        assert!(tape.gather_rows(a, &[5]).is_err());
        assert!(tape.cross_entropy(a, &[0, 1], &[]).is_err());
    }

    #[test]
    fn quadratic_grad_check() {
        let f = |t: &mut Tape, p: &[Var]| t.matmul(p[0], p[0]);
        let r = grad_check(f, &[Matrix::filled(1, 1, 3.0)], 1e-5, 1e-4).unwrap();
        assert!(r.passed());
        let g = tape_gradients(&f, &[Matrix::filled(1, 1, 3.0)]).unwrap();
        assert_eq!(g[0][(0, 0)], 6.0);
        let n = numeric_gradients(&f, &[Matrix::filled(1, 1, 3.0)], 1e-5).unwrap();
        assert!((n[0][(0, 0)] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn every_op_passes_grad_check() {
        for inst in 0..10u64 {
            let mut rng = Rng::new(100 + inst);
            let a = rand(&mut rng, 4, 3);
            let b = rand(&mut rng, 3, 5);
            let c = rand(&mut rng, 4, 3);
            let row = rand(&mut rng, 1, 3);
            let s = inst;

            check(|t, p| { let y = t.matmul(p[0], p[1])?; Ok(project(t, y, s)) }, &[a.clone(), b.clone()]);
            check(|t, p| { let y = t.matmul_nt(p[0], p[1])?; Ok(project(t, y, s)) }, &[a.clone(), c.clone()]);
            check(|t, p| { let y = t.add(p[0], p[1])?; Ok(project(t, y, s)) }, &[a.clone(), c.clone()]);
            check(|t, p| { let y = t.add_row(p[0], p[1])?; Ok(project(t, y, s)) }, &[a.clone(), row.clone()]);
            check(|t, p| { let y = t.scale(p[0], -1.7); Ok(project(t, y, s)) }, &[a.clone()]);
            let mask = rand(&mut rng, 4, 3);
            check(|t, p| { let y = t.mul_const(p[0], mask.clone())?; Ok(project(t, y, s)) }, &[a.clone()]);
            check(|t, p| { let y = t.row_softmax(p[0], None)?; Ok(project(t, y, s)) }, &[a.clone()]);
            check(|t, p| { let y = t.row_softmax(p[0], Some(&[true, false, true]))?; Ok(project(t, y, s)) }, &[a.clone()]);
            check(|t, p| { let y = t.elu(p[0]); Ok(project(t, y, s)) }, &[a.clone()]);
            check(|t, p| { let y = t.elu(p[0]); Ok(t.mean(y)) }, &[a.clone()]);
            check(|t, p| { let y = t.concat_cols(&[p[0], p[1]])?; Ok(project(t, y, s)) }, &[a.clone(), c.clone()]);
            check(|t, p| { let y = t.gather_rows(p[0], &[2, 0, 2])?; Ok(project(t, y, s)) }, &[a.clone()]);
            let labels = vec![0, 2, 1, 1];
            check(|t, p| t.cross_entropy(p[0], &labels, &[0, 1, 3]), &[a.clone()]);
            check(
                |t, p| {
                    let sm = t.row_softmax(p[0], None)?;
                    let h = t.row_entropy(sm);
                    Ok(project(t, h, s))
                },
                &[a.clone()],
            );

            let n = 6;
            let q = rand(&mut rng, n, 2);
            let k = rand(&mut rng, n, 2);
            let v = rand(&mut rng, n, 3);
            let members = Rc::new(vec![vec![0, 3, 4], vec![], vec![1, 2, 5]]);
            let mem = members.clone();
            check(
                |t, p| {
                    let y = t.segment_softmax_aggregate(p[0], p[1], p[2], mem.clone())?;
                    Ok(project(t, y, s))
                },
                &[q.clone(), k.clone(), v.clone()],
            );
            let mem = members.clone();
            check(|t, p| { let y = t.segment_mean(p[0], mem.clone(), None)?; Ok(project(t, y, s)) }, &[k.clone()]);

            let h = rand(&mut rng, 5, 6);
            let att = rand(&mut rng, 5, 3);
            let order = Rc::new((0..5).map(|i| crate::wideformer::ascending_order(att.row(i))).collect::<Vec<_>>());
            check(
                |t, p| {
                    let y = t.sort_weight(p[0], p[1], order.clone())?;
                    Ok(project(t, y, s))
                },
                &[h.clone(), att.clone()],
            );
        }
    }

    #[test]
    fn soft_center_gradient_matches_finite_differences() {
        let mut rng = Rng::new(42);
        let k = rand(&mut rng, 7, 3);
        let c = rand(&mut rng, 3, 3);
        let g = rand(&mut rng, 3, 3);
        let soft_loss = |c: &Matrix| {
            let p = row_softmax(&matmul_nt(&k, c).unwrap(), None).unwrap();
            let mut total = 0.0;
            for t in 0..3 {
                let z: f64 = (0..7).map(|j| p[(j, t)]).sum();
                for col in 0..3 {
                    let mean: f64 = (0..7).map(|j| p[(j, t)] * k[(j, col)]).sum::<f64>() / z;
                    total += g[(t, col)] * mean;
                }
            }
            total
        };
        let an = soft_center_grad(&k, &c, &g);
        let h = 1e-5;
        for idx in 0..c.len() {
            let mut plus = c.clone();
            plus.data_mut()[idx] += h;
            let mut minus = c.clone();
            minus.data_mut()[idx] -= h;
            let fd = (soft_loss(&plus) - soft_loss(&minus)) / (2.0 * h);
            assert!(rel_err(an.data()[idx], fd) <= 1e-5, "{idx}: {} vs {fd}", an.data()[idx]);
        }
    }

    #[test]
    fn straight_through_centers_keep_forward_value() {
        let mut rng = Rng::new(43);
        let k = rand(&mut rng, 6, 2);
        let c = rand(&mut rng, 2, 2);
        let members = Rc::new(vec![vec![0, 1, 2], vec![3, 4, 5]]);
        let mut tape = Tape::new();
        let (vk, vc) = (tape.param(k), tape.param(c));
        let hard = tape.segment_mean(vk, members.clone(), None).unwrap();
        let st = tape.segment_mean(vk, members, Some(vc)).unwrap();
        assert_eq!(tape.value(hard), tape.value(st));
        let s = tape.sum(st);
        let g = tape.backward(s).unwrap();
        assert!(g.get(vc).unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn segment_members_validated() {
        let mut tape = Tape::new();
        let q = tape.param(Matrix::zeros(3, 2));
        let bad = Rc::new(vec![vec![0, 1], vec![1, 2]]);
        assert!(tape.segment_softmax_aggregate(q, q, q, bad).is_err());
        let short = Rc::new(vec![vec![0, 1]]);
        assert!(tape.segment_mean(q, short, None).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = Rng::new(5);
        let x = rand(&mut rng, 5, 4);
        let w = rand(&mut rng, 4, 4);
        let f = |t: &mut Tape, p: &[Var]| {
            let q = t.matmul(p[0], p[1])?;
            let s = t.matmul_nt(q, q)?;
            let a = t.row_softmax(s, None)?;
            let h = t.row_entropy(a);
            Ok(t.mean(h))
        };
        let g1 = tape_gradients(&f, &[x.clone(), w.clone()]).unwrap();
        let g2 = tape_gradients(&f, &[x, w]).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn two_layer_composite_matches_finite_differences() {
        for inst in 0..20u64 {
            let mut rng = Rng::new(200 + inst);
            let x = rand(&mut rng, 5, 3);
            let w1 = rand(&mut rng, 3, 4).scale(0.5);
            let b1 = rand(&mut rng, 1, 4);
            let w2 = rand(&mut rng, 4, 3).scale(0.5);
            let labels = vec![0, 1, 2, 1, 0];
            let f = |t: &mut Tape, p: &[Var]| {
                let xs = t.constant(x.clone());
                let h = t.matmul(xs, p[0])?;
                let h = t.add_row(h, p[1])?;
                let h = t.elu(h);
                let o = t.matmul(h, p[2])?;
                t.cross_entropy(o, &labels, &[0, 1, 2, 3, 4])
            };
            check(f, &[w1, b1, w2]);
        }
    }
}
