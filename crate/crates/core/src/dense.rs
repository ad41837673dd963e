//! Exact (quadratic) attention baselines.
//!
//! These materialize the full `n x n` score matrix and serve as oracles for the
//! linearized path in [`crate::nystrom`].

use std::ops::Deref;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::Tracked;

/// An `n x d` matrix of token features with `n, d >= 1` and finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix(DMatrix<f64>);

impl TokenMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::shape("TokenMatrix", "n >= 1, d >= 1", format!("{}x{}", data.nrows(), data.ncols())));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("TokenMatrix"));
        }
        Ok(TokenMatrix(data))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("TokenMatrix::from_rows", "rectangular rows", "ragged rows"));
        }
        Self::new(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Columns `[start, start + width)`, used for head slicing.
    pub fn column_block(&self, start: usize, width: usize) -> TokenMatrix {
        TokenMatrix(self.0.columns(start, width).into_owned())
    }
}

impl Deref for TokenMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GramKind {
    /// Kernel of a token set with itself: symmetric, unit diagonal.
    SelfKernel,
    /// Kernel between two different token sets.
    Cross,
    /// Low-rank reconstruction `P^T M P`: symmetric, no range guarantee.
    Nystrom,
}

/// A Gaussian kernel matrix with entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    data: DMatrix<f64>,
    kind: GramKind,
}

impl GramMatrix {
    pub fn new(data: DMatrix<f64>, kind: GramKind) -> Self {
        GramMatrix { data, kind }
    }

    pub fn kind(&self) -> GramKind {
        self.kind
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }
}

impl Deref for GramMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.data
    }
}

/// Query/key/value projections `d -> d_e`.
///
/// With `shared_qk` the key projection *is* the query projection: there is a
/// single stored matrix and [`ProjectionSet::w_k`] returns it.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    w_q: DMatrix<f64>,
    w_k: Option<DMatrix<f64>>,
    w_v: DMatrix<f64>,
}

impl ProjectionSet {
    pub fn shared(w_qk: DMatrix<f64>, w_v: DMatrix<f64>) -> Result<Self> {
        Self::check(&w_qk, &w_v)?;
        Ok(ProjectionSet { w_q: w_qk, w_k: None, w_v })
    }

    pub fn separate(w_q: DMatrix<f64>, w_k: DMatrix<f64>, w_v: DMatrix<f64>) -> Result<Self> {
        Self::check(&w_q, &w_v)?;
        Self::check(&w_k, &w_v)?;
        Ok(ProjectionSet { w_q, w_k: Some(w_k), w_v })
    }

    fn check(w: &DMatrix<f64>, w_v: &DMatrix<f64>) -> Result<()> {
        if w.shape() != w_v.shape() {
            return Err(Error::shape("ProjectionSet", format!("{:?}", w_v.shape()), format!("{:?}", w.shape())));
        }
        Ok(())
    }

    pub fn shared_qk(&self) -> bool {
        self.w_k.is_none()
    }

    pub fn w_q(&self) -> &DMatrix<f64> {
        &self.w_q
    }

    pub fn w_k(&self) -> &DMatrix<f64> {
        self.w_k.as_ref().unwrap_or(&self.w_q)
    }

    pub fn w_v(&self) -> &DMatrix<f64> {
        &self.w_v
    }

    pub fn w_q_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.w_q
    }

    pub fn w_v_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.w_v
    }

    /// Input feature dimension `d`.
    pub fn input_dim(&self) -> usize {
        self.w_q.nrows()
    }

    /// Embedding dimension `d_e`.
    pub fn embed_dim(&self) -> usize {
        self.w_q.ncols()
    }
}

/// `Q = X W_q`, `K = X W_k`, `V = X W_v`.
pub fn project(x: &TokenMatrix, proj: &ProjectionSet) -> Result<(TokenMatrix, TokenMatrix, TokenMatrix)> {
    if x.dim() != proj.input_dim() {
        return Err(Error::shape("project", format!("x with {} columns", proj.input_dim()), x.dim()));
    }
    let q = x.as_matrix() * proj.w_q();
    let k = if proj.shared_qk() { q.clone() } else { x.as_matrix() * proj.w_k() };
    let v = x.as_matrix() * proj.w_v();
    Ok((TokenMatrix::new(q)?, TokenMatrix::new(k)?, TokenMatrix::new(v)?))
}

/// `exp(-||a_i - b_j||^2 / (2 sqrt(d)))` for all row pairs, `d = a.ncols()`.
///
/// Distances are accumulated as sums of squared differences so that equal rows
/// give exactly 1. When `a` and `b` are the same matrix only the upper triangle
/// is evaluated and mirrored.
pub fn gaussian_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(a.ncols(), b.ncols());
    let d = a.ncols();
    let scale = 1.0 / (2.0 * (d as f64).sqrt());
    // Work on transposes so each token is a contiguous column.
    let at = a.transpose();
    let bt = b.transpose();
    let (n, m) = (a.nrows(), b.nrows());
    let same = std::ptr::eq(a, b) || a == b;
    let mut out = DMatrix::zeros(n, m);
    for j in 0..m {
        let bj = bt.column(j);
        let start = if same { j } else { 0 };
        for i in start..n {
            let ai = at.column(i);
            let mut dist = 0.0;
            for t in 0..d {
                let diff = ai[t] - bj[t];
                dist += diff * diff;
            }
            let v = (-dist * scale).exp();
            out[(i, j)] = v;
            if same {
                out[(j, i)] = v;
            }
        }
    }
    out
}

/// Reverse of [`gaussian_kernel`]: given `k = gaussian_kernel(a, b)` and the
/// gradient `dk`, returns the gradients with respect to `a` and `b`.
pub fn gaussian_kernel_backward(a: &DMatrix<f64>, b: &DMatrix<f64>, k: &DMatrix<f64>, dk: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let coef = 1.0 / (a.ncols() as f64).sqrt();
    let r = dk.component_mul(k);
    let row_sums: Vec<f64> = r.row_iter().map(|row| row.sum()).collect();
    let col_sums: Vec<f64> = r.column_iter().map(|col| col.sum()).collect();
    let mut da = &r * b;
    for (i, mut row) in da.row_iter_mut().enumerate() {
        row -= a.row(i) * row_sums[i];
    }
    da *= coef;
    let mut db = r.tr_mul(a);
    for (j, mut row) in db.row_iter_mut().enumerate() {
        row -= b.row(j) * col_sums[j];
    }
    db *= coef;
    (da, db)
}

/// Gaussian Gram matrix between queries and keys with embedding dimension `d_e`.
pub fn gaussian_gram(q: &TokenMatrix, k: &TokenMatrix, d_e: usize) -> Result<GramMatrix> {
    if q.dim() != d_e || k.dim() != d_e {
        return Err(Error::shape("gaussian_gram", format!("{d_e} columns"), format!("{} and {}", q.dim(), k.dim())));
    }
    let kind = if q == k { GramKind::SelfKernel } else { GramKind::Cross };
    Ok(GramMatrix::new(gaussian_kernel(q, k), kind))
}

fn check_qkv(op: &'static str, q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Result<()> {
    if q.dim() != k.dim() {
        return Err(Error::shape(op, format!("K with {} columns", q.dim()), k.dim()));
    }
    if k.n() != v.n() {
        return Err(Error::shape(op, format!("V with {} rows", k.n()), v.n()));
    }
    Ok(())
}

/// Row-wise `softmax(Q K^T / sqrt(d_e))` with max subtraction.
pub fn softmax_weights(q: &DMatrix<f64>, k: &DMatrix<f64>) -> DMatrix<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut logits = q * k.transpose() * scale;
    for mut row in logits.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row /= sum;
    }
    logits
}

/// Scaled dot-product softmax attention.
pub fn softmax_attention(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Result<TokenMatrix> {
    check_qkv("softmax_attention", q, k, v)?;
    let weights = Tracked::new(softmax_weights(q, k));
    let out = &*weights * v.as_matrix();
    TokenMatrix::new(out)
}

/// `S V` with the full Gaussian Gram `S` and no row normalization.
pub fn exact_gaussian_attention(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Result<TokenMatrix> {
    check_qkv("exact_gaussian_attention", q, k, v)?;
    let s = Tracked::new(gaussian_kernel(q, k));
    let out = Tracked::new(&*s * v.as_matrix());
    TokenMatrix::new(out.into_inner())
}

/// Runs a single-head attention function on `heads` equal column slices and
/// concatenates the results.
pub fn multi_head<F>(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix, heads: usize, f: F) -> Result<TokenMatrix>
where
    F: Fn(&TokenMatrix, &TokenMatrix, &TokenMatrix) -> Result<TokenMatrix>,
{
    if heads == 0 || !q.dim().is_multiple_of(heads) || !v.dim().is_multiple_of(heads) {
        return Err(Error::Config(format!("{} / {} columns not divisible into {heads} heads", q.dim(), v.dim())));
    }
    let (dq, dv) = (q.dim() / heads, v.dim() / heads);
    let mut out = DMatrix::zeros(q.n(), v.dim());
    for h in 0..heads {
        let oh = f(&q.column_block(h * dq, dq), &k.column_block(h * dq, dq), &v.column_block(h * dv, dv))?;
        out.columns_mut(h * dv, dv).copy_from(oh.as_matrix());
    }
    TokenMatrix::new(out)
}
