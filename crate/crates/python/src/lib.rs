//! Python module `softattn`. Matrices cross the boundary as lists of rows.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use soft_attn::dense::{self, TokenMatrix};
use soft_attn::model::{self, ModelConfig, ToyModel, ToyTask, TrainConfig};
use soft_attn::nystrom::{self, AttentionConfig, ConvSampler, Grid, Sampling};
use soft_attn::pinv::{self, PinvConfig};
use soft_attn::spectral;
use soft_attn::synth::rng;
use soft_attn::{DMatrix, Error};

type Rows = Vec<Vec<f64>>;
/// `(epoch, loss, accuracy, mean_pinv_residual)`
type EpochRow = (usize, f64, f64, f64);

fn py_err(e: Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_matrix(rows: &Rows) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn tokens(rows: &Rows) -> PyResult<TokenMatrix> {
    TokenMatrix::new(to_matrix(rows)?).map_err(py_err)
}

fn to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `exp(-||a_i - b_j||^2 / (2 sqrt(d)))` for every pair of rows.
#[pyfunction]
fn gaussian_kernel(a: Rows, b: Rows) -> PyResult<Rows> {
    let (a, b) = (to_matrix(&a)?, to_matrix(&b)?);
    if a.ncols() != b.ncols() {
        return Err(PyValueError::new_err("a and b need the same number of columns"));
    }
    Ok(to_rows(&dense::gaussian_kernel(&a, &b)))
}

#[pyfunction]
fn softmax_attention(q: Rows, k: Rows, v: Rows) -> PyResult<Rows> {
    let out = dense::softmax_attention(&tokens(&q)?, &tokens(&k)?, &tokens(&v)?).map_err(py_err)?;
    Ok(to_rows(out.as_matrix()))
}

#[pyfunction]
fn exact_gaussian_attention(q: Rows, v: Rows) -> PyResult<Rows> {
    let q = tokens(&q)?;
    let out = dense::exact_gaussian_attention(&q, &q, &tokens(&v)?).map_err(py_err)?;
    Ok(to_rows(out.as_matrix()))
}

/// Result of the Newton-Raphson pseudo-inverse.
#[pyclass(frozen, get_all)]
struct PinvResult {
    inverse: Rows,
    trace: Vec<f64>,
    iterations: usize,
    alpha: f64,
}

#[pymethods]
impl PinvResult {
    #[getter]
    fn final_residual(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::NAN)
    }

    fn __repr__(&self) -> String {
        format!("PinvResult(iterations={}, alpha={:.3e}, final_residual={:.3e})", self.iterations, self.alpha, self.final_residual())
    }
}

#[pyfunction]
#[pyo3(signature = (a, iterations = 20, beta = 0.5, tol = 0.0))]
fn newton_pinv(a: Rows, iterations: usize, beta: f64, tol: f64) -> PyResult<PinvResult> {
    let cfg = PinvConfig { max_iterations: iterations, beta, early_stop_tol: tol, ..PinvConfig::default() };
    let r = pinv::newton_pinv(&to_matrix(&a)?, &cfg).map_err(py_err)?;
    Ok(PinvResult {
        inverse: to_rows(&r.approx_inverse),
        trace: r.trace,
        iterations: r.iterations_used,
        alpha: r.alpha,
    })
}

#[pyfunction]
#[pyo3(signature = (a, rank_tol = 1e-12))]
fn svd_pinv(a: Rows, rank_tol: f64) -> PyResult<Rows> {
    Ok(to_rows(&pinv::svd_pinv_oracle(&to_matrix(&a)?, rank_tol).map_err(py_err)?))
}

fn sampling_from(name: &str, window: usize, m: usize, seed: u64) -> PyResult<Sampling> {
    match name {
        "conv" => Ok(Sampling::conv(window)),
        "pool" => Ok(Sampling::pool(window)),
        "random" => Ok(Sampling::Random { m, seed }),
        "biased" => Ok(Sampling::BiasedFirst { m }),
        other => Err(PyValueError::new_err(format!("unknown sampling {other:?}"))),
    }
}

/// Linearized Gaussian attention over an `h x w` token grid.
#[pyclass]
struct SoftAttention {
    cfg: AttentionConfig,
    grid: Grid,
    conv: Option<ConvSampler>,
}

#[pymethods]
impl SoftAttention {
    #[new]
    #[pyo3(signature = (d_e, grid_h, grid_w, heads = 1, sampling = "pool", window = 2, m = 0, normalized = true, iterations = 20, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(d_e: usize, grid_h: usize, grid_w: usize, heads: usize, sampling: &str, window: usize, m: usize, normalized: bool, iterations: usize, seed: u64) -> PyResult<Self> {
        let grid = Grid::new(grid_h, grid_w);
        let sampling = sampling_from(sampling, window, m, seed)?;
        let cfg = AttentionConfig::new(d_e, heads, sampling, grid, normalized).map_err(py_err)?.with_pinv(PinvConfig::fixed(iterations));
        let conv = match sampling {
            Sampling::Convolution { window } => Some(ConvSampler::init(window, d_e, &mut rng(seed))),
            _ => None,
        };
        Ok(SoftAttention { cfg, grid, conv })
    }

    #[getter]
    fn m(&self) -> usize {
        self.cfg.m
    }

    /// Returns `(output, diagnostics)`.
    fn __call__(&self, q: Rows, v: Rows) -> PyResult<(Rows, std::collections::HashMap<String, f64>)> {
        let (out, diag) = nystrom::soft_attention(&tokens(&q)?, &tokens(&v)?, &self.cfg, self.grid, self.conv.as_ref()).map_err(py_err)?;
        let stats = [
            ("n".to_string(), diag.n as f64),
            ("m".to_string(), diag.m as f64),
            ("pinv_iterations".to_string(), diag.pinv_iterations as f64),
            ("final_residual".to_string(), diag.final_residual),
            ("peak_elements".to_string(), diag.peak_elements as f64),
        ];
        Ok((to_rows(out.as_matrix()), stats.into_iter().collect()))
    }

    /// Dense `n x n` approximate attention matrix for each head.
    fn materialize(&self, q: Rows) -> PyResult<Vec<Rows>> {
        let shats = nystrom::materialize_shat(&tokens(&q)?, &self.cfg, self.grid, self.conv.as_ref()).map_err(py_err)?;
        Ok(shats.iter().map(|s| to_rows(s.as_matrix())).collect())
    }
}

/// Eigenvalues (descending) of a symmetric matrix.
#[pyfunction]
fn symmetric_eigenvalues(a: Rows) -> PyResult<Vec<f64>> {
    soft_attn::linalg::symmetric_eigenvalues(&to_matrix(&a)?).map_err(py_err)
}

/// `(holds, lambda_max)` for the softmax eigenvalue bound with keys equal to queries.
#[pyfunction]
fn check_softmax_bound(q: Rows) -> PyResult<(bool, f64)> {
    let q = to_matrix(&q)?;
    let (ok, r) = spectral::check_softmax_bound(&q, &q, q.ncols()).map_err(py_err)?;
    Ok((ok, r.lambda_max()))
}

/// `(holds, lambda_max, trace)` for the Gaussian Gram bound.
#[pyfunction]
fn check_gram_bound(q: Rows) -> PyResult<(bool, f64, f64)> {
    let q = to_matrix(&q)?;
    let (ok, r) = spectral::check_gram_bound(&q, q.ncols()).map_err(py_err)?;
    Ok((ok, r.lambda_max(), r.trace))
}

/// Trains the default toy model and returns `(initial_accuracy, [(epoch, loss, accuracy, residual)])`.
#[pyfunction]
#[pyo3(signature = (epochs = 50, lr = 3e-3, seed = 0, samples = 256))]
fn train_toy(py: Python<'_>, epochs: usize, lr: f64, seed: u64, samples: usize) -> PyResult<(f64, Vec<EpochRow>)> {
    let task = ToyTask { seed, samples, ..ToyTask::default() };
    let history = py
        .detach(|| -> Result<model::History, Error> {
            let data = task.generate()?;
            let mut m = ToyModel::new(&ModelConfig { init_seed: seed, ..ModelConfig::default() }, task.grid, task.d, task.classes)?;
            model::train_toy(&mut m, &data, &TrainConfig { epochs, lr, seed, ..TrainConfig::default() })
        })
        .map_err(py_err)?;
    let rows = history.epochs.iter().map(|e| (e.epoch, e.loss, e.accuracy, e.mean_pinv_residual)).collect();
    Ok((history.initial_accuracy, rows))
}

#[pymodule]
fn softattn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PinvResult>()?;
    m.add_class::<SoftAttention>()?;
    m.add_function(wrap_pyfunction!(gaussian_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_attention, m)?)?;
    m.add_function(wrap_pyfunction!(exact_gaussian_attention, m)?)?;
    m.add_function(wrap_pyfunction!(newton_pinv, m)?)?;
    m.add_function(wrap_pyfunction!(svd_pinv, m)?)?;
    m.add_function(wrap_pyfunction!(symmetric_eigenvalues, m)?)?;
    m.add_function(wrap_pyfunction!(check_softmax_bound, m)?)?;
    m.add_function(wrap_pyfunction!(check_gram_bound, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    Ok(())
}
