//! Dense global softmax attention, attention entropy and the closed-form
//! gradient of a single attention score with respect to the query weights.

use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, matmul_nt, row_softmax, softmax_in_place, Matrix};

/// Tolerance used when checking that an attention matrix is row-stochastic.
pub const STOCHASTIC_TOL: f64 = 1e-6;

/// Query, key and value features for one attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl Projections {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        if q.shape() != k.shape() {
            return Err(Error::shape("projections (q vs k)", q.shape(), k.shape()));
        }
        if v.rows() != q.rows() {
            return Err(Error::shape("projections (q vs v)", q.shape(), v.shape()));
        }
        Ok(Projections { q, k, v })
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.v.cols()
    }

    /// Applies a node relabeling: row `i` of the result is row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Projections {
        Projections {
            q: self.q.select_rows(perm),
            k: self.k.select_rows(perm),
            v: self.v.select_rows(perm),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionResult {
    /// Row-stochastic `n × n` score matrix.
    pub scores: Matrix,
    /// Aggregated values, `scores · V`.
    pub output: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyReport {
    /// Raw entropy per target node, in nats.
    pub per_node: Vec<f64>,
    /// `per_node / ln(width)`; zero when the width is one.
    pub normalized: Vec<f64>,
    pub mean_normalized: f64,
    /// Number of source entries per row (the normalizing width).
    pub n: usize,
    /// Optional theoretical minimum to compare against, in nats.
    pub lower_bound: Option<f64>,
}

impl EntropyReport {
    pub(crate) fn from_raw(per_node: Vec<f64>, width: usize) -> Self {
        let norm = if width >= 2 { (width as f64).ln() } else { 0.0 };
        let normalized: Vec<f64> = per_node
            .iter()
            .map(|&h| if norm > 0.0 { h / norm } else { 0.0 })
            .collect();
        let mean_normalized = if normalized.is_empty() {
            0.0
        } else {
            normalized.iter().sum::<f64>() / normalized.len() as f64
        };
        EntropyReport {
            per_node,
            normalized,
            mean_normalized,
            n: width,
            lower_bound: None,
        }
    }

    pub fn mean_raw(&self) -> f64 {
        if self.per_node.is_empty() {
            0.0
        } else {
            self.per_node.iter().sum::<f64>() / self.per_node.len() as f64
        }
    }
}

pub fn project_qkv(x: &Matrix, w_q: &Matrix, w_k: &Matrix, w_v: &Matrix) -> Result<Projections> {
    Projections::new(matmul(x, w_q)?, matmul(x, w_k)?, matmul(x, w_v)?)
}

/// `α = softmax(Q Kᵀ)`, `H = α V`. No `1/√d` temperature.
pub fn dense_attention(p: &Projections) -> Result<AttentionResult> {
    let logits = matmul_nt(&p.q, &p.k)?;
    let scores = row_softmax(&logits, None)?;
    let output = matmul(&scores, &p.v)?;
    Ok(AttentionResult { scores, output })
}

/// Shannon entropy (nats) of one probability row, with `0 ln 0 = 0`.
#[inline]
pub fn row_entropy(row: &[f64]) -> f64 {
    -row.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Per-row entropy of a row-stochastic matrix, normalized by `ln(cols)`.
///
/// Works for square attention matrices and for `n × m` cluster-attention
/// matrices alike.
pub fn attention_entropy(scores: &Matrix) -> Result<EntropyReport> {
    let mut per_node = Vec::with_capacity(scores.rows());
    for r in 0..scores.rows() {
        let row = scores.row(r);
        let total: f64 = row.iter().sum();
        let deviation = (total - 1.0).abs();
        if deviation > STOCHASTIC_TOL || row.iter().any(|&p| p < -STOCHASTIC_TOL) {
            return Err(Error::NotStochastic { row: r, deviation });
        }
        per_node.push(row_entropy(row));
    }
    Ok(EntropyReport::from_raw(per_node, scores.cols()))
}

/// Entropy of `softmax(Q Kᵀ)` computed one target row at a time, so the
/// `n × n` score matrix is never held in memory.
pub fn attention_entropy_streaming(q: &Matrix, k: &Matrix) -> Result<EntropyReport> {
    if q.cols() != k.cols() {
        return Err(Error::shape("attention_entropy_streaming", q.shape(), k.shape()));
    }
    let mut buf = vec![0.0; k.rows()];
    let mut per_node = Vec::with_capacity(q.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        for (j, b) in buf.iter_mut().enumerate() {
            *b = dot(qi, k.row(j));
        }
        if !softmax_in_place(&mut buf, None) {
            return Err(Error::DegenerateRow { row: i });
        }
        per_node.push(row_entropy(&buf));
    }
    Ok(EntropyReport::from_raw(per_node, k.rows()))
}

/// `∂α_{i,j} / ∂W_Q` for `α = softmax(X W_Q (X W_K)ᵀ)`.
///
/// Layout: entry `(a, b)` of the returned `d × d_h` matrix is the
/// derivative with respect to `W_Q[a, b]`, i.e.
/// `α_{ij} · X_iᵀ (K_j − Σ_k α_{ik} K_k)` with `K = X W_K`.
pub fn closed_form_attn_grad(x: &Matrix, w_q: &Matrix, w_k: &Matrix, i: usize, j: usize) -> Result<Matrix> {
    let n = x.rows();
    for idx in [i, j] {
        if idx >= n {
            return Err(Error::IndexOutOfRange { index: idx, len: n });
        }
    }
    if w_q.shape() != w_k.shape() {
        return Err(Error::shape("closed_form_attn_grad", w_q.shape(), w_k.shape()));
    }
    let xi = x.select_rows(&[i]);
    let qi = matmul(&xi, w_q)?;
    let k = matmul(x, w_k)?;
    let alpha = row_softmax(&matmul_nt(&qi, &k)?, None)?;
    let a = alpha.row(0);
    let dh = k.cols();

    // K_j − Σ_k α_ik K_k
    let mut centered = k.row(j).to_vec();
    for (kk, &w) in a.iter().enumerate() {
        for (c, &kv) in centered.iter_mut().zip(k.row(kk)) {
            *c -= w * kv;
        }
    }
    let mut grad = Matrix::zeros(x.cols(), dh);
    for (row, &xa) in x.row(i).iter().enumerate() {
        for (b, &c) in centered.iter().enumerate() {
            grad[(row, b)] = a[j] * xa * c;
        }
    }
    Ok(grad)
}
