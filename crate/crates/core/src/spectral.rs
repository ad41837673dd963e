//! Eigenvalue and spectral-norm instrumentation for attention matrices.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::{gaussian_kernel, softmax_weights};
use crate::error::{Error, Result};
use crate::linalg::{is_finite, loglog_slope, spectral_norm, spectral_norm_symmetric, symmetric_eigenvalues};
use crate::nystrom::middle_factor;
use crate::pinv::svd_pinv_oracle;
use crate::synth::{clustered_tokens, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixKind {
    SoftmaxAttn,
    GaussianGram,
    PinvRaw,
    PinvNormalized,
    Other,
}

impl MatrixKind {
    pub fn name(&self) -> &'static str {
        match self {
            MatrixKind::SoftmaxAttn => "softmax_attn",
            MatrixKind::GaussianGram => "gaussian_gram",
            MatrixKind::PinvRaw => "pinv_raw",
            MatrixKind::PinvNormalized => "pinv_normalized",
            MatrixKind::Other => "other",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub kind: MatrixKind,
    pub size: usize,
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    pub spectral_norm: f64,
    pub trace: f64,
}

impl SpectrumReport {
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(f64::NAN)
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(f64::NAN)
    }

    /// `lambda_1 / lambda_2`, or `None` below two eigenvalues.
    pub fn top_ratio(&self) -> Option<f64> {
        match self.eigenvalues.as_slice() {
            [a, b, ..] => Some(a / b),
            _ => None,
        }
    }
}

/// Full spectrum of a square matrix.
///
/// Symmetric inputs use a symmetric eigen-solver. Other inputs go through a real
/// Schur decomposition and must have a real spectrum.
pub fn eigen_spectrum(a: &DMatrix<f64>, symmetric: bool, kind: MatrixKind) -> Result<SpectrumReport> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::shape("eigen_spectrum", "non-empty square matrix", format!("{}x{}", a.nrows(), a.ncols())));
    }
    if !is_finite(a) {
        return Err(Error::NonFinite("eigen_spectrum"));
    }
    let trace = a.trace();
    let (eigenvalues, spectral_norm) = if symmetric {
        let vals = symmetric_eigenvalues(a)?;
        let norm = vals.iter().map(|v| v.abs()).fold(0.0, f64::max);
        (vals, norm)
    } else {
        let schur = a
            .clone()
            .try_schur(f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Analysis("Schur decomposition did not converge".into()))?;
        let complex = schur.complex_eigenvalues();
        let scale = complex.iter().map(|c| c.norm()).fold(1.0, f64::max);
        if let Some(c) = complex.iter().find(|c| c.im.abs() > 1e-8 * scale) {
            return Err(Error::Analysis(format!("complex eigenvalue {c} in a spectrum expected to be real")));
        }
        let mut vals: Vec<f64> = complex.iter().map(|c| c.re).collect();
        vals.sort_by(|x, y| y.total_cmp(x));
        (vals, spectral_norm(a)?)
    };
    Ok(SpectrumReport {
        kind,
        size: a.nrows(),
        eigenvalues,
        spectral_norm,
        trace,
    })
}

/// Symmetric matrix similar to row-softmax self-attention `D^-1 A`, with
/// `A = exp(Q Q^T / sqrt(d))`: entries `exp(l_ij - (lse_i + lse_j) / 2)`,
/// computed in log space so large logits cannot overflow.
pub fn softmax_similar_symmetric(q: &DMatrix<f64>) -> DMatrix<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let logits = q * q.transpose() * scale;
    let lse: Vec<f64> = logits
        .row_iter()
        .map(|r| {
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        })
        .collect();
    let mut s = DMatrix::from_fn(logits.nrows(), logits.ncols(), |i, j| (logits[(i, j)] - 0.5 * (lse[i] + lse[j])).exp());
    // exact symmetry; logits can differ in the last bit across the diagonal
    let st = s.transpose();
    s += st;
    s *= 0.5;
    s
}

/// Checks that every eigenvalue of softmax attention lies in `[0, 1]`
/// (to within `1e-8`).
pub fn check_softmax_bound(q: &DMatrix<f64>, k: &DMatrix<f64>, d_e: usize) -> Result<(bool, SpectrumReport)> {
    if q.ncols() != d_e || k.ncols() != d_e || q.nrows() != k.nrows() {
        return Err(Error::shape("check_softmax_bound", format!("square attention with d_e={d_e}"), format!("{:?} / {:?}", q.shape(), k.shape())));
    }
    let report = if q == k {
        eigen_spectrum(&softmax_similar_symmetric(q), true, MatrixKind::SoftmaxAttn)?
    } else {
        eigen_spectrum(&softmax_weights(q, k), false, MatrixKind::SoftmaxAttn)?
    };
    let ok = report.lambda_max() <= 1.0 + 1e-8 && report.lambda_min() >= -1e-8;
    Ok((ok, report))
}

/// Checks `lambda_max <= n` and `trace = n` for the Gaussian self-Gram.
pub fn check_gram_bound(q: &DMatrix<f64>, d_e: usize) -> Result<(bool, SpectrumReport)> {
    if q.ncols() != d_e {
        return Err(Error::shape("check_gram_bound", format!("{d_e} columns"), q.ncols()));
    }
    let n = q.nrows() as f64;
    let report = eigen_spectrum(&gaussian_kernel(q, q), true, MatrixKind::GaussianGram)?;
    let ok = report.lambda_max() <= n + 1e-6 && (report.trace - n).abs() <= 1e-6;
    Ok((ok, report))
}

/// Clustered bottleneck tokens for the norm-growth experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSetup {
    pub dim: usize,
    pub clusters: usize,
    pub spread: f64,
    pub separation: f64,
    pub rank_tol: f64,
}

impl Default for ClusterSetup {
    fn default() -> Self {
        ClusterSetup {
            dim: 16,
            clusters: 4,
            spread: 0.5,
            separation: 3.0,
            rank_tol: 1e-12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormGrowthRow {
    pub m: usize,
    pub trial: usize,
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormGrowthTable {
    pub rows: Vec<NormGrowthRow>,
    /// Log-log slope of `||A^+||_2` against `m`.
    pub raw_exponent: Option<f64>,
    /// Log-log slope of `||D^-1/2 A^+ D^-1/2||_2` against `m`.
    pub normalized_exponent: Option<f64>,
}

impl NormGrowthTable {
    fn fit(rows: Vec<NormGrowthRow>) -> Self {
        let ms: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
        let raw: Vec<f64> = rows.iter().map(|r| r.raw).collect();
        let norm: Vec<f64> = rows.iter().map(|r| r.normalized).collect();
        NormGrowthTable {
            raw_exponent: loglog_slope(&ms, &raw),
            normalized_exponent: loglog_slope(&ms, &norm),
            rows,
        }
    }

    /// Exponents fitted on the rows of a single trial.
    pub fn trial_exponents(&self, trial: usize) -> (Option<f64>, Option<f64>) {
        let rows: Vec<NormGrowthRow> = self.rows.iter().filter(|r| r.trial == trial).copied().collect();
        let t = Self::fit(rows);
        (t.raw_exponent, t.normalized_exponent)
    }
}

/// Both spectral norms for one bottleneck matrix.
pub fn bottleneck_norms(a: &DMatrix<f64>, rank_tol: f64) -> Result<(f64, f64)> {
    let inv = svd_pinv_oracle(a, rank_tol)?;
    let raw = spectral_norm_symmetric(&inv)?;
    let normalized = spectral_norm_symmetric(&middle_factor(a, &inv, true))?;
    Ok((raw, normalized))
}

/// For each `m` and trial, draws clustered tokens, builds the Gaussian
/// bottleneck matrix `A`, and records `||A^+||_2` and `||D^-1/2 A^+ D^-1/2||_2`.
pub fn norm_growth_experiment(m_values: &[usize], trials: usize, seed: u64, setup: &ClusterSetup, parallel: bool) -> Result<NormGrowthTable> {
    if m_values.is_empty() || trials == 0 {
        return Err(Error::Usage("norm growth needs at least one m and one trial".into()));
    }
    let jobs: Vec<(usize, usize)> = m_values.iter().flat_map(|&m| (0..trials).map(move |t| (m, t))).collect();
    let run = |&(m, trial): &(usize, usize)| -> Result<NormGrowthRow> {
        let q = clustered_tokens(m, setup.dim, setup.clusters, setup.spread, setup.separation, derive_seed(seed, trial as u64 * 1_000_003 + m as u64));
        let a = gaussian_kernel(&q, &q);
        let (raw, normalized) = bottleneck_norms(&a, setup.rank_tol)?;
        Ok(NormGrowthRow { m, trial, raw, normalized })
    };
    let rows: Result<Vec<NormGrowthRow>> = if parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };
    Ok(NormGrowthTable::fit(rows?))
}
