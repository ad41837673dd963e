//! Linearized attention through a Nyström factorization of the Gaussian Gram.
//!
//! With bottleneck tokens `Q~` sampled from `Q`:
//!
//! ```text
//! A = exp(Q~ (-) Q~)        m x m, unit diagonal
//! P = exp(Q~ (-) Q)         m x n
//! S^ = P^T NR(A) P                          (plain)
//! S^ = P^T D^-1/2 NR(A) D^-1/2 P,  D = diag(A 1)   (normalized)
//! ```
//!
//! and the output `S^ V` is evaluated right to left as `P^T (M (P V))`, so no
//! `n x n` matrix is ever formed.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dense::{gaussian_kernel, GramKind, GramMatrix, TokenMatrix};
use crate::error::{Error, Result};
use crate::memory::{MemoryProbe, Tracked};
use crate::pinv::{newton_pinv, PinvConfig};
use crate::synth::{rng, uniform_matrix};

/// Largest `n` for which [`materialize_shat`] will build the dense matrix.
pub const MATERIALIZE_LIMIT: usize = 1024;

const D_CLAMP: f64 = 1e-12;

/// Token grid layout; token `r * w + c` sits at row `r`, column `c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Grid { h, w }
    }

    /// A `1 x n` grid for plain sequences.
    pub fn sequence(n: usize) -> Self {
        Grid { h: 1, w: n }
    }

    pub fn n(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sampling {
    /// Learned `kh x kw` stride-`k` convolution (weights in [`ConvSampler`]).
    Convolution { window: (usize, usize) },
    /// Mean over each `kh x kw` window.
    AveragePool { window: (usize, usize) },
    /// `m` distinct tokens chosen by `seed`, kept in index order.
    Random { m: usize, seed: u64 },
    /// The first `m` tokens.
    BiasedFirst { m: usize },
}

impl Sampling {
    pub fn conv(k: usize) -> Self {
        Sampling::Convolution { window: (k, k) }
    }

    pub fn pool(k: usize) -> Self {
        Sampling::AveragePool { window: (k, k) }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Sampling::Convolution { .. } => "conv",
            Sampling::AveragePool { .. } => "pool",
            Sampling::Random { .. } => "random",
            Sampling::BiasedFirst { .. } => "biased",
        }
    }

    /// Number of bottleneck tokens produced on `grid`.
    pub fn bottleneck_len(&self, grid: Grid) -> Result<usize> {
        match *self {
            Sampling::Convolution { window } | Sampling::AveragePool { window } => {
                let (kh, kw) = window;
                if kh == 0 || kw == 0 {
                    return Err(Error::Config("sampling window must be non-empty".into()));
                }
                Ok(grid.h.div_ceil(kh) * grid.w.div_ceil(kw))
            }
            Sampling::Random { m, .. } | Sampling::BiasedFirst { m } => Ok(m),
        }
    }
}

/// Weights of the convolutional sampler: one `d_e x d_e` matrix per window
/// offset (row-major over the window) and a bias row.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSampler {
    pub window: (usize, usize),
    pub weights: Vec<DMatrix<f64>>,
    pub bias: DMatrix<f64>,
}

impl ConvSampler {
    /// Fan-in scaled uniform initialisation.
    pub fn init<R: Rng>(window: (usize, usize), d_e: usize, rng: &mut R) -> Self {
        let taps = window.0 * window.1;
        let bound = 1.0 / ((taps * d_e) as f64).sqrt();
        ConvSampler {
            window,
            weights: (0..taps).map(|_| uniform_matrix(d_e, d_e, bound, rng)).collect(),
            bias: DMatrix::zeros(1, d_e),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ConvSampler {
            window: self.window,
            weights: self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            bias: DMatrix::zeros(1, self.bias.ncols()),
        }
    }

    /// The average-pooling special case: every tap is `I / (kh kw)`.
    pub fn averaging(window: (usize, usize), d_e: usize) -> Self {
        let taps = window.0 * window.1;
        ConvSampler {
            window,
            weights: vec![DMatrix::identity(d_e, d_e) / taps as f64; taps],
            bias: DMatrix::zeros(1, d_e),
        }
    }
}

/// All hyper-parameters of one attention layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_e: usize,
    pub heads: usize,
    pub m: usize,
    pub sampling: Sampling,
    pub pinv: PinvConfig,
    /// Symmetric `D^-1/2` normalization around the inverse.
    pub normalized: bool,
}

impl AttentionConfig {
    pub fn new(d_e: usize, heads: usize, sampling: Sampling, grid: Grid, normalized: bool) -> Result<Self> {
        let cfg = AttentionConfig {
            d_e,
            heads,
            m: sampling.bottleneck_len(grid)?,
            sampling,
            pinv: PinvConfig::default(),
            normalized,
        };
        cfg.validate(grid)?;
        Ok(cfg)
    }

    pub fn with_pinv(mut self, pinv: PinvConfig) -> Self {
        self.pinv = pinv;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_e / self.heads.max(1)
    }

    pub fn validate(&self, grid: Grid) -> Result<()> {
        if self.heads == 0 || self.d_e == 0 || !self.d_e.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_e={} is not divisible into {} heads", self.d_e, self.heads)));
        }
        if self.m == 0 {
            return Err(Error::Config("bottleneck length m must be >= 1".into()));
        }
        if self.m > grid.n() {
            return Err(Error::Config(format!("bottleneck length m={} exceeds n={}", self.m, grid.n())));
        }
        let produced = self.sampling.bottleneck_len(grid)?;
        if produced != self.m {
            return Err(Error::Config(format!("{} sampling yields {produced} tokens but m={}", self.sampling.name(), self.m)));
        }
        self.pinv.validate()
    }
}

/// The sampled `m x d_e` tokens plus, per token, the source rows that fed it.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckTokens {
    pub data: DMatrix<f64>,
    pub sources: Vec<Vec<usize>>,
}

/// Row-major windows over the grid; edge windows shrink instead of padding.
pub fn grid_windows(grid: Grid, window: (usize, usize)) -> Vec<Vec<usize>> {
    let (kh, kw) = window;
    let mut out = Vec::with_capacity(grid.h.div_ceil(kh) * grid.w.div_ceil(kw));
    for r0 in (0..grid.h).step_by(kh) {
        for c0 in (0..grid.w).step_by(kw) {
            let mut cell = Vec::with_capacity(kh * kw);
            for r in r0..(r0 + kh).min(grid.h) {
                for c in c0..(c0 + kw).min(grid.w) {
                    cell.push(r * grid.w + c);
                }
            }
            out.push(cell);
        }
    }
    out
}

/// Window offset `(dr, dc)` of grid token `idx` inside its window, as a tap index.
fn tap_index(idx: usize, grid: Grid, window: (usize, usize)) -> usize {
    let (r, c) = (idx / grid.w, idx % grid.w);
    (r % window.0) * window.1 + (c % window.1)
}

pub fn sample_bottleneck(q: &DMatrix<f64>, grid: Grid, method: &Sampling, conv: Option<&ConvSampler>) -> Result<BottleneckTokens> {
    let n = q.nrows();
    if grid.n() != n {
        return Err(Error::shape("sample_bottleneck", format!("{} tokens for a {}x{} grid", grid.n(), grid.h, grid.w), n));
    }
    let m = method.bottleneck_len(grid)?;
    if m == 0 || m > n {
        return Err(Error::Config(format!("bottleneck length m={m} must be in 1..={n}")));
    }
    let d = q.ncols();
    match *method {
        Sampling::AveragePool { window } => {
            let sources = grid_windows(grid, window);
            let mut data = DMatrix::zeros(m, d);
            for (t, cell) in sources.iter().enumerate() {
                for &i in cell {
                    let mut row = data.row_mut(t);
                    row += q.row(i);
                }
                data.row_mut(t).scale_mut(1.0 / cell.len() as f64);
            }
            Ok(BottleneckTokens { data, sources })
        }
        Sampling::Convolution { window } => {
            let conv = conv.ok_or_else(|| Error::Config("convolution sampling needs sampler weights".into()))?;
            if conv.window != window || conv.bias.ncols() != d || conv.weights.iter().any(|w| w.shape() != (d, d)) {
                return Err(Error::shape("sample_bottleneck", format!("conv sampler {window:?} with d_e={d}"), format!("{:?}", conv.window)));
            }
            let sources = grid_windows(grid, window);
            let mut data = DMatrix::zeros(m, d);
            for (t, cell) in sources.iter().enumerate() {
                let mut row = conv.bias.clone();
                for &i in cell {
                    row += q.row(i) * &conv.weights[tap_index(i, grid, window)];
                }
                data.row_mut(t).copy_from(&row);
            }
            Ok(BottleneckTokens { data, sources })
        }
        Sampling::Random { seed, .. } => {
            let mut picks = index::sample(&mut rng(seed), n, m).into_vec();
            picks.sort_unstable();
            Ok(select_rows(q, picks))
        }
        Sampling::BiasedFirst { .. } => Ok(select_rows(q, (0..m).collect())),
    }
}

fn select_rows(q: &DMatrix<f64>, picks: Vec<usize>) -> BottleneckTokens {
    let data = q.select_rows(picks.iter());
    BottleneckTokens {
        data,
        sources: picks.into_iter().map(|i| vec![i]).collect(),
    }
}

/// Reverse of [`sample_bottleneck`]: maps the gradient on the bottleneck tokens
/// back to the input tokens and, for convolution, to the sampler weights.
pub fn sample_bottleneck_backward(
    grad_tokens: &DMatrix<f64>,
    q: &DMatrix<f64>,
    grid: Grid,
    method: &Sampling,
    sampled: &BottleneckTokens,
    conv: Option<&ConvSampler>,
) -> Result<(DMatrix<f64>, Option<ConvSampler>)> {
    let mut grad_q = DMatrix::zeros(q.nrows(), q.ncols());
    match *method {
        Sampling::AveragePool { .. } => {
            for (t, cell) in sampled.sources.iter().enumerate() {
                let share = 1.0 / cell.len() as f64;
                for &i in cell {
                    let mut row = grad_q.row_mut(i);
                    row += grad_tokens.row(t) * share;
                }
            }
            Ok((grad_q, None))
        }
        Sampling::Convolution { window } => {
            let conv = conv.ok_or_else(|| Error::Config("convolution sampling needs sampler weights".into()))?;
            let mut grad_conv = conv.zeros_like();
            for (t, cell) in sampled.sources.iter().enumerate() {
                let g = grad_tokens.row(t);
                grad_conv.bias += g;
                for &i in cell {
                    let tap = tap_index(i, grid, window);
                    grad_conv.weights[tap] += q.row(i).transpose() * g;
                    let back = g * conv.weights[tap].transpose();
                    let mut row = grad_q.row_mut(i);
                    row += back;
                }
            }
            Ok((grad_q, Some(grad_conv)))
        }
        Sampling::Random { .. } | Sampling::BiasedFirst { .. } => {
            for (t, cell) in sampled.sources.iter().enumerate() {
                let mut row = grad_q.row_mut(cell[0]);
                row += grad_tokens.row(t);
            }
            Ok((grad_q, None))
        }
    }
}

/// Inverse scaling `D^-1/2` with `D = diag(A 1)`.
pub fn degree_inv_sqrt(a: &DMatrix<f64>) -> Vec<f64> {
    a.row_iter().map(|r| 1.0 / r.sum().max(D_CLAMP).sqrt()).collect()
}

/// The middle factor: `Y` or `D^-1/2 Y D^-1/2`.
pub fn middle_factor(a: &DMatrix<f64>, y: &DMatrix<f64>, normalized: bool) -> DMatrix<f64> {
    if !normalized {
        return y.clone();
    }
    let w = degree_inv_sqrt(a);
    DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| w[i] * y[(i, j)] * w[j])
}

/// Per-call diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftDiagnostics {
    pub n: usize,
    pub m: usize,
    pub method: String,
    /// Largest iteration count over heads.
    pub pinv_iterations: usize,
    /// Largest final residual over heads.
    pub final_residual: f64,
    pub peak_elements: usize,
    pub traces: Vec<Vec<f64>>,
}

impl SoftDiagnostics {
    pub const CSV_HEADER: [&'static str; 6] = ["n", "m", "method", "pinv_iterations", "final_residual", "peak_elements"];

    pub fn csv_record(&self) -> [String; 6] {
        [
            self.n.to_string(),
            self.m.to_string(),
            self.method.clone(),
            self.pinv_iterations.to_string(),
            format!("{:e}", self.final_residual),
            self.peak_elements.to_string(),
        ]
    }

    pub fn write_csv<W: Write>(rows: &[SoftDiagnostics], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for r in rows {
            w.write_record(r.csv_record())?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_inputs(q: &TokenMatrix, cfg: &AttentionConfig, grid: Grid) -> Result<()> {
    cfg.validate(grid)?;
    if q.n() != grid.n() {
        return Err(Error::shape("soft_attention", format!("{} tokens", grid.n()), q.n()));
    }
    if q.dim() != cfg.d_e {
        return Err(Error::shape("soft_attention", format!("Q with d_e={} columns", cfg.d_e), q.dim()));
    }
    Ok(())
}

/// Linear-complexity Gaussian attention `S^ V`. Keys are the queries.
pub fn soft_attention(
    q: &TokenMatrix,
    v: &TokenMatrix,
    cfg: &AttentionConfig,
    grid: Grid,
    conv: Option<&ConvSampler>,
) -> Result<(TokenMatrix, SoftDiagnostics)> {
    check_inputs(q, cfg, grid)?;
    if v.n() != q.n() || !v.dim().is_multiple_of(cfg.heads) {
        return Err(Error::shape("soft_attention", format!("V with {} rows and columns divisible by {}", q.n(), cfg.heads), format!("{}x{}", v.n(), v.dim())));
    }
    let probe = MemoryProbe::start();
    let n = q.n();
    let (dh, dv) = (cfg.head_dim(), v.dim() / cfg.heads);

    let sampled = Tracked::new(sample_bottleneck(q, grid, &cfg.sampling, conv)?.data);
    let mut out = Tracked::zeros(n, v.dim());
    let mut traces = Vec::with_capacity(cfg.heads);
    let mut iterations = 0;
    for h in 0..cfg.heads {
        let qh = Tracked::new(q.as_matrix().columns(h * dh, dh).into_owned());
        let qt = Tracked::new(sampled.columns(h * dh, dh).into_owned());
        let vh = Tracked::new(v.as_matrix().columns(h * dv, dv).into_owned());
        let a = Tracked::new(gaussian_kernel(&qt, &qt));
        let p = Tracked::new(gaussian_kernel(&qt, &qh));
        let inv = newton_pinv(&a, &cfg.pinv)?;
        iterations = iterations.max(inv.iterations_used);
        let mid = Tracked::new(middle_factor(&a, &inv.approx_inverse, cfg.normalized));
        traces.push(inv.trace);
        let pv = Tracked::new(&*p * &*vh);
        let c = Tracked::new(&*mid * &*pv);
        let oh = Tracked::new(p.tr_mul(&c));
        out.columns_mut(h * dv, dv).copy_from(&*oh);
    }
    let final_residual = traces.iter().filter_map(|t| t.last().copied()).fold(0.0, f64::max);
    let diag = SoftDiagnostics {
        n,
        m: cfg.m,
        method: cfg.sampling.name().to_string(),
        pinv_iterations: iterations,
        final_residual,
        peak_elements: probe.peak(),
        traces,
    };
    Ok((TokenMatrix::new(out.into_inner())?, diag))
}

/// Dense `n x n` reconstruction of the approximate attention matrix, one per head.
/// Refused above [`MATERIALIZE_LIMIT`] tokens.
pub fn materialize_shat(q: &TokenMatrix, cfg: &AttentionConfig, grid: Grid, conv: Option<&ConvSampler>) -> Result<Vec<GramMatrix>> {
    if q.n() > MATERIALIZE_LIMIT {
        return Err(Error::Refused(format!("materialize_shat on n={} > {MATERIALIZE_LIMIT}", q.n())));
    }
    check_inputs(q, cfg, grid)?;
    let dh = cfg.head_dim();
    let sampled = sample_bottleneck(q, grid, &cfg.sampling, conv)?.data;
    (0..cfg.heads)
        .map(|h| {
            let qh = q.as_matrix().columns(h * dh, dh).into_owned();
            let qt = sampled.columns(h * dh, dh).into_owned();
            let a = gaussian_kernel(&qt, &qt);
            let p = gaussian_kernel(&qt, &qh);
            let inv = newton_pinv(&a, &cfg.pinv)?;
            let mid = middle_factor(&a, &inv.approx_inverse, cfg.normalized);
            Ok(GramMatrix::new(p.tr_mul(&(mid * &p)), GramKind::Nystrom))
        })
        .collect()
}

/// Predicted cost of one call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    /// `(d_e + 4 m d_e + m^2) n + T m^3 + d_e m^2`
    pub flops: u128,
    /// `(2m + d_e) n + m^2`
    pub elements: u128,
}

pub fn complexity_accounting(cfg: &AttentionConfig, n: usize) -> Result<CostReport> {
    if cfg.m == 0 {
        return Err(Error::Config("bottleneck length m must be >= 1".into()));
    }
    let (n, m, d, t) = (n as u128, cfg.m as u128, cfg.d_e as u128, cfg.pinv.max_iterations as u128);
    Ok(CostReport {
        flops: (d + 4 * m * d + m * m) * n + t * m * m * m + d * m * m,
        elements: (2 * m + d) * n + m * m,
    })
}
