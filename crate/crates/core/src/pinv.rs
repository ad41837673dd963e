//! Newton-Raphson Moore-Penrose inverse.
//!
//! `A_0 = alpha * A`, `A_{k+1} = 2 A_k - A_k A A_k`. For symmetric positive
//! semi-definite `A` every iterate is a polynomial in `A`, and on each
//! eigenvalue `lambda > 0` the error `1 - lambda * x_k` squares per step, so the
//! iteration converges to `A^+` whenever `0 < alpha * lambda_max^2 < 2`.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_finite, max_asymmetry, one_norm, spectral_norm_symmetric};

/// Largest exponent tried when searching for the initial scale.
pub const MAX_ALPHA_EXPONENT: i32 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResidualNorm {
    /// Maximum absolute column sum.
    One,
    /// Largest singular value.
    Spectral,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinvConfig {
    pub max_iterations: usize,
    pub beta: f64,
    pub residual_norm: ResidualNorm,
    /// Stop once the residual drops below this. `0` runs all iterations.
    pub early_stop_tol: f64,
}

impl Default for PinvConfig {
    fn default() -> Self {
        PinvConfig {
            max_iterations: 20,
            beta: 0.5,
            residual_norm: ResidualNorm::Spectral,
            early_stop_tol: 1e-6,
        }
    }
}

impl PinvConfig {
    pub fn fixed(iterations: usize) -> Self {
        PinvConfig {
            max_iterations: iterations,
            early_stop_tol: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("pinv max_iterations must be >= 1".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("pinv beta must be in (0, 1), got {}", self.beta)));
        }
        if self.early_stop_tol.is_nan() || self.early_stop_tol < 0.0 {
            return Err(Error::Config("pinv early_stop_tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PinvResult {
    pub approx_inverse: DMatrix<f64>,
    /// Relative residual `||A A_k A - A|| / ||A||` for `k = 0..=iterations_used`.
    pub trace: Vec<f64>,
    pub iterations_used: usize,
    /// Scale actually used for `A_0`.
    pub alpha: f64,
}

impl PinvResult {
    pub fn final_residual(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::NAN)
    }

    /// Writes `iteration,residual` rows with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "residual"])?;
        for (k, r) in self.trace.iter().enumerate() {
            w.write_record([k.to_string(), format!("{r:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_square(op: &'static str, a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::shape(op, "non-empty square matrix", format!("{}x{}", a.nrows(), a.ncols())));
    }
    if !is_finite(a) {
        return Err(Error::NonFinite(op));
    }
    Ok(())
}

/// Largest `alpha = 2 beta^i / ||A||_1^2` (smallest `i >= 0`) with
/// `||I - alpha A||_1 <= 1`. Falls back to `2 / ||A||_1^2` when no
/// `i <= MAX_ALPHA_EXPONENT` qualifies.
pub fn init_alpha(a: &DMatrix<f64>, beta: f64) -> Result<f64> {
    check_square("init_alpha", a)?;
    let norm = one_norm(a);
    if norm == 0.0 {
        return Err(Error::Degenerate("init_alpha on an all-zero matrix".into()));
    }
    let base = 2.0 / (norm * norm);
    let mut scale = 1.0;
    for _ in 0..=MAX_ALPHA_EXPONENT {
        let alpha = base * scale;
        if identity_gap_excess(a, alpha) <= 0.0 {
            return Ok(alpha);
        }
        scale *= beta;
    }
    Ok(base)
}

/// `||I - alpha A||_1 - 1`, evaluated without forming `1 - alpha a_jj`.
///
/// Forming the difference directly rounds to exactly 1 once `alpha` drops
/// below machine epsilon, which would accept a useless `alpha` for any matrix
/// whose column sums exceed 2.
fn identity_gap_excess(a: &DMatrix<f64>, alpha: f64) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for (j, col) in a.column_iter().enumerate() {
        let diag = alpha * col[j];
        // |1 - x| - 1
        let mut excess = if diag <= 1.0 { -diag } else { diag - 2.0 };
        for (i, v) in col.iter().enumerate() {
            if i != j {
                excess += alpha * v.abs();
            }
        }
        worst = worst.max(excess);
    }
    worst
}

fn residual(a: &DMatrix<f64>, x: &DMatrix<f64>, a_norm: f64, kind: ResidualNorm) -> Result<f64> {
    let e = a * x * a - a;
    let norm = match kind {
        ResidualNorm::One => one_norm(&e),
        ResidualNorm::Spectral => spectral_norm_symmetric(&e)?,
    };
    Ok(norm / a_norm)
}

/// Approximates `A^+` for symmetric positive semi-definite `A`.
///
/// The scale from [`init_alpha`] can sit exactly on `alpha * lambda_max^2 = 2`
/// (for instance `A = I` gives `alpha = 2`), where the top eigen-direction
/// oscillates to zero instead of converging. Such an `alpha` is multiplied by
/// `beta` until it is strictly inside the convergence region.
pub fn newton_pinv(a: &DMatrix<f64>, cfg: &PinvConfig) -> Result<PinvResult> {
    cfg.validate()?;
    check_square("newton_pinv", a)?;
    let asym = max_asymmetry(a);
    if asym >= 1e-8 {
        return Err(Error::Degenerate(format!("newton_pinv needs a symmetric matrix (asymmetry {asym:e})")));
    }
    let mut alpha = init_alpha(a, cfg.beta)?;
    let lambda_max = spectral_norm_symmetric(a)?;
    while alpha * lambda_max * lambda_max >= 2.0 * (1.0 - 1e-12) {
        alpha *= cfg.beta;
    }

    let a_norm = match cfg.residual_norm {
        ResidualNorm::One => one_norm(a),
        ResidualNorm::Spectral => lambda_max,
    };
    let mut x = a * alpha;
    let mut trace = vec![residual(a, &x, a_norm, cfg.residual_norm)?];
    let mut used = 0;
    for step in 1..=cfg.max_iterations {
        let ax = a * &x;
        x = &x * 2.0 - &x * ax;
        if !is_finite(&x) {
            return Err(Error::Divergence { step, trace });
        }
        let r = residual(a, &x, a_norm, cfg.residual_norm)?;
        trace.push(r);
        used = step;
        if !r.is_finite() {
            return Err(Error::Divergence { step, trace });
        }
        if cfg.early_stop_tol > 0.0 && r < cfg.early_stop_tol {
            break;
        }
    }
    Ok(PinvResult {
        approx_inverse: x,
        trace,
        iterations_used: used,
        alpha,
    })
}

/// `V Sigma^+ U^T`, dropping singular values below `rank_tol * sigma_max`.
pub fn svd_pinv_oracle(a: &DMatrix<f64>, rank_tol: f64) -> Result<DMatrix<f64>> {
    if !is_finite(a) {
        return Err(Error::OracleUnavailable("non-finite input".into()));
    }
    let svd = a
        .clone()
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::OracleUnavailable("SVD did not converge".into()))?;
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::OracleUnavailable("SVD factors missing".into())),
    };
    let sigma = svd.singular_values;
    let sigma_max = sigma.iter().copied().fold(0.0, f64::max);
    let cutoff = rank_tol * sigma_max;
    let mut dropped = 0;
    let mut scaled_ut = u.transpose();
    for (i, s) in sigma.iter().enumerate() {
        let inv = if *s > cutoff && *s > 0.0 {
            1.0 / s
        } else {
            if *s > 0.0 {
                dropped += 1;
            }
            0.0
        };
        scaled_ut.row_mut(i).scale_mut(inv);
    }
    if dropped > 0 {
        log::warn!("svd_pinv_oracle: {dropped} non-zero singular value(s) below {cutoff:e} treated as zero");
    }
    Ok(v_t.transpose() * scaled_ut)
}

/// Gradient with respect to `X` given the gradient with respect to `Y = X^{-1}`:
/// `-Y^T (dL/dY) Y^T`.
pub fn pinv_backward(y: &DMatrix<f64>, grad_y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if y.nrows() != y.ncols() || y.shape() != grad_y.shape() {
        return Err(Error::shape("pinv_backward", format!("{:?} square", y.shape()), format!("{:?}", grad_y.shape())));
    }
    let yt = y.transpose();
    Ok(-(&yt * grad_y * &yt))
}

/// Gradient of the Newton iteration itself, obtained by running reverse mode
/// through every step with `alpha` held fixed.
pub fn pinv_backward_unrolled(a: &DMatrix<f64>, alpha: f64, iterations: usize, grad_y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square("pinv_backward_unrolled", a)?;
    if a.shape() != grad_y.shape() {
        return Err(Error::shape("pinv_backward_unrolled", format!("{:?}", a.shape()), format!("{:?}", grad_y.shape())));
    }
    let mut iterates = Vec::with_capacity(iterations + 1);
    iterates.push(a * alpha);
    for k in 0..iterations {
        let x = &iterates[k];
        let next = x * 2.0 - x * a * x;
        iterates.push(next);
    }
    let mut g = grad_y.clone();
    let mut grad_a = DMatrix::zeros(a.nrows(), a.ncols());
    for x in iterates[..iterations].iter().rev() {
        let xt = x.transpose();
        grad_a -= &xt * &g * &xt;
        g = &g * 2.0 - &g * (a * x).transpose() - (x * a).transpose() * &g;
    }
    grad_a += g * alpha;
    Ok(grad_a)
}
