//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Symmetric matrices up to this size get an exact eigen-solve for their
/// spectral norm; larger ones fall back to power iteration.
pub const EXACT_EIGEN_LIMIT: usize = 256;

const POWER_SEED: u64 = 0x005e_ed0f_50f7;

/// Maximum absolute column sum.
pub fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows().min(a.ncols());
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn is_finite(a: &DMatrix<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Eigenvalues of a symmetric matrix, sorted descending.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Analysis(format!("eigen-solver did not converge ({}x{})", a.nrows(), a.ncols())))?;
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|x, y| y.total_cmp(x));
    Ok(vals)
}

/// Dominant eigenvalue magnitude of a symmetric matrix by power iteration
/// from a fixed-seed Gaussian start vector.
pub fn power_iteration_symmetric(a: &DMatrix<f64>, iters: usize) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let mut lambda = 0.0;
    for _ in 0..iters.max(1) {
        let norm = v.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v /= norm;
        let w = a * &v;
        lambda = w.norm();
        v = w;
    }
    lambda
}

/// Spectral norm of a symmetric matrix: exact up to [`EXACT_EIGEN_LIMIT`],
/// power iteration above.
pub fn spectral_norm_symmetric(a: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() <= EXACT_EIGEN_LIMIT {
        let vals = symmetric_eigenvalues(a)?;
        Ok(vals.iter().map(|v| v.abs()).fold(0.0, f64::max))
    } else {
        Ok(power_iteration_symmetric(a, 200))
    }
}

/// Largest singular value of any matrix.
pub fn spectral_norm(a: &DMatrix<f64>) -> Result<f64> {
    let svd = a
        .clone()
        .try_svd(false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Analysis("SVD did not converge".into()))?;
    Ok(svd.singular_values.iter().copied().fold(0.0, f64::max))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
