//! Benchmark and experiment drivers that produce CSV tables.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dense::{exact_gaussian_attention, gaussian_kernel, TokenMatrix};
use crate::error::{Error, Result};
use crate::linalg::{loglog_slope, median};
use crate::memory::MemoryProbe;
use crate::model::{train_toy, ModelConfig, ToyModel, ToyTask, TrainConfig};
use crate::nystrom::{soft_attention, AttentionConfig, ConvSampler, Grid, Sampling};
use crate::pinv::{newton_pinv, PinvConfig};
use crate::spectral::{bottleneck_norms, eigen_spectrum, norm_growth_experiment, softmax_similar_symmetric, ClusterSetup, MatrixKind};
use crate::synth::{clustered_tokens, derive_seed, gaussian_tokens};

/// Exact attention is only run up to this many tokens in the scale benchmark.
pub const EXACT_GUARD: usize = 3136;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Scale,
    PinvTrace,
    Spectra,
    NormGrowth,
    Train,
    AblateSampling,
    AblateBottleneck,
}

impl Mode {
    pub const ALL: [Mode; 7] = [Mode::Scale, Mode::PinvTrace, Mode::Spectra, Mode::NormGrowth, Mode::Train, Mode::AblateSampling, Mode::AblateBottleneck];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Scale => "scale",
            Mode::PinvTrace => "pinv_trace",
            Mode::Spectra => "spectra",
            Mode::NormGrowth => "norm_growth",
            Mode::Train => "train",
            Mode::AblateSampling => "ablate_sampling",
            Mode::AblateBottleneck => "ablate_bottleneck",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingKind {
    Conv,
    Pool,
    Random,
    Biased,
}

impl SamplingKind {
    pub const ALL: [SamplingKind; 4] = [SamplingKind::Conv, SamplingKind::Pool, SamplingKind::Random, SamplingKind::Biased];

    pub fn name(&self) -> &'static str {
        match self {
            SamplingKind::Conv => "conv",
            SamplingKind::Pool => "pool",
            SamplingKind::Random => "random",
            SamplingKind::Biased => "biased",
        }
    }

    /// The sampling that yields `m` tokens on `grid`; window methods need a
    /// window that tiles the grid into exactly `m` cells.
    pub fn build(&self, grid: Grid, m: usize, seed: u64) -> Result<Sampling> {
        let sampling = match self {
            SamplingKind::Random => Sampling::Random { m, seed },
            SamplingKind::Biased => Sampling::BiasedFirst { m },
            SamplingKind::Conv | SamplingKind::Pool => {
                let window = window_for(grid, m);
                if *self == SamplingKind::Conv {
                    Sampling::Convolution { window }
                } else {
                    Sampling::AveragePool { window }
                }
            }
        };
        let got = sampling.bottleneck_len(grid)?;
        if got != m {
            return Err(Error::Usage(format!("{} sampling cannot produce m={m} tokens on a {}x{} grid (gets {got})", self.name(), grid.h, grid.w)));
        }
        Ok(sampling)
    }
}

impl FromStr for SamplingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplingKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown sampling {s:?}")))
    }
}

/// Window that splits the grid into an `s x s` arrangement when `m = s^2`,
/// otherwise a `1 x ceil(n/m)` strip.
fn window_for(grid: Grid, m: usize) -> (usize, usize) {
    let s = (m as f64).sqrt().round() as usize;
    if s * s == m && grid.h >= s && grid.w >= s {
        (grid.h.div_ceil(s), grid.w.div_ceil(s))
    } else {
        (grid.h, grid.w.div_ceil(m.div_ceil(grid.h).max(1)))
    }
}

/// Grid used for a sequence of `n` tokens: `28 x n/28` when that divides,
/// else a single row.
pub fn scale_grid(n: usize) -> Grid {
    if n.is_multiple_of(28) {
        Grid::new(28, n / 28)
    } else {
        Grid::sequence(n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub mode: Mode,
    pub n_values: Vec<usize>,
    pub m_values: Vec<usize>,
    /// Timing repeats, trace instances, or trials depending on the mode.
    pub repeats: usize,
    pub seed: u64,
    pub normalized: bool,
    pub sampling: SamplingKind,
    pub iterations: usize,
    pub epochs: usize,
    pub d_e: usize,
    pub parallel: bool,
}

impl BenchSpec {
    /// Defaults for `mode`.
    pub fn new(mode: Mode) -> Self {
        let mut spec = BenchSpec {
            mode,
            n_values: Vec::new(),
            m_values: vec![49],
            repeats: 3,
            seed: 0,
            normalized: true,
            sampling: SamplingKind::Pool,
            iterations: 20,
            epochs: 50,
            d_e: 32,
            parallel: false,
        };
        match mode {
            Mode::Scale => spec.n_values = (1..=8).map(|p| 784 * p).collect(),
            Mode::PinvTrace => spec.repeats = 5,
            Mode::Spectra => spec.n_values = vec![64, 256, 1024],
            Mode::NormGrowth => {
                spec.m_values = vec![8, 16, 32, 64, 128];
                spec.repeats = 10;
            }
            Mode::Train => {
                spec.m_values = vec![16];
                spec.sampling = SamplingKind::Conv;
            }
            Mode::AblateSampling => {
                spec.m_values = vec![16];
                spec.epochs = 10;
            }
            Mode::AblateBottleneck => {
                spec.m_values = vec![36, 49, 64, 81];
                spec.sampling = SamplingKind::Random;
                spec.epochs = 10;
            }
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |msg: String| Err(Error::Usage(msg));
        if self.m_values.is_empty() || self.m_values.contains(&0) {
            return usage("m list must be non-empty and positive".into());
        }
        if self.repeats == 0 {
            return usage("repeats must be >= 1".into());
        }
        if self.iterations == 0 {
            return usage("iterations must be >= 1".into());
        }
        if self.d_e == 0 {
            return usage("d_e must be >= 1".into());
        }
        match self.mode {
            Mode::Scale | Mode::Spectra => {
                if self.n_values.is_empty() || self.n_values.contains(&0) {
                    return usage("n list must be non-empty and positive".into());
                }
                if self.n_values.windows(2).any(|w| w[0] >= w[1]) {
                    return usage("n list must be strictly increasing".into());
                }
            }
            _ => {}
        }
        if self.mode == Mode::Scale {
            if self.repeats < 3 {
                return usage("timing modes need repeats >= 3".into());
            }
            if self.m_values.len() != 1 {
                return usage("scale mode takes a single m".into());
            }
        }
        if self.mode == Mode::NormGrowth && self.m_values.windows(2).any(|w| w[0] >= w[1]) {
            return usage("m list must be strictly increasing".into());
        }
        if matches!(self.mode, Mode::Train | Mode::AblateSampling | Mode::AblateBottleneck) && self.epochs == 0 {
            return usage("epochs must be >= 1".into());
        }
        Ok(())
    }
}

/// A header plus string rows, written as CSV after a `#` line holding the spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Values of the named column, or `None` when it does not exist.
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let idx = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[idx].as_str()).collect())
    }

    /// Rows whose first column equals `key`.
    pub fn rows_where(&self, key: &str) -> impl Iterator<Item = &Vec<String>> {
        let key = key.to_string();
        self.rows.iter().filter(move |r| r[0] == key)
    }

    pub fn write_csv<W: Write>(&self, spec: &BenchSpec, mut out: W) -> Result<()> {
        writeln!(out, "# {}", serde_json::to_string(spec)?)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn run(spec: &BenchSpec) -> Result<Table> {
    spec.validate()?;
    match spec.mode {
        Mode::Scale => run_scale(spec),
        Mode::PinvTrace => run_pinv_trace(spec),
        Mode::Spectra => run_spectra(spec),
        Mode::NormGrowth => run_norm_growth(spec),
        Mode::Train => run_train(spec),
        Mode::AblateSampling => run_ablate_sampling(spec),
        Mode::AblateBottleneck => run_ablate_bottleneck(spec),
    }
}

/// Wall time (median after one warm-up) and peak live elements of soft and,
/// up to [`EXACT_GUARD`] tokens, exact attention. Slope rows follow.
pub fn run_scale(spec: &BenchSpec) -> Result<Table> {
    spec.validate()?;
    let mut t = Table::new(&["kind", "method", "n", "m", "seconds", "peak_elements"]);
    let m = spec.m_values[0];
    let mut soft_pts = Vec::new();
    let mut exact_pts = Vec::new();
    for &n in &spec.n_values {
        let grid = scale_grid(n);
        let sampling = spec.sampling.build(grid, m, derive_seed(spec.seed, 1))?;
        let cfg = AttentionConfig::new(spec.d_e, 1, sampling, grid, spec.normalized)?.with_pinv(PinvConfig::fixed(spec.iterations));
        let conv = matches!(sampling, Sampling::Convolution { .. }).then(|| ConvSampler::averaging(window_for(grid, m), spec.d_e));
        let q = TokenMatrix::new(gaussian_tokens(n, spec.d_e, 1.0, derive_seed(spec.seed, n as u64)))?;
        let v = TokenMatrix::new(gaussian_tokens(n, spec.d_e, 1.0, derive_seed(spec.seed, n as u64 + 1)))?;

        let mut peak = 0;
        let seconds = time_median(spec.repeats, || {
            let (_, diag) = soft_attention(&q, &v, &cfg, grid, conv.as_ref())?;
            peak = diag.peak_elements;
            Ok(())
        })?;
        t.push(vec!["point".into(), "soft".into(), n.to_string(), cfg.m.to_string(), seconds.to_string(), peak.to_string()]);
        soft_pts.push((n as f64, seconds, peak as f64));

        if n <= EXACT_GUARD {
            let mut peak = 0;
            let seconds = time_median(spec.repeats, || {
                let probe = MemoryProbe::start();
                exact_gaussian_attention(&q, &q, &v)?;
                peak = probe.peak();
                Ok(())
            })?;
            t.push(vec!["point".into(), "exact".into(), n.to_string(), n.to_string(), seconds.to_string(), peak.to_string()]);
            exact_pts.push((n as f64, seconds, peak as f64));
        }
    }
    for (method, pts) in [("soft", &soft_pts), ("exact", &exact_pts)] {
        if pts.len() < 2 {
            continue;
        }
        let ns: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let secs: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let elems: Vec<f64> = pts.iter().map(|p| p.2).collect();
        t.push(vec!["slope".into(), method.into(), String::new(), String::new(), opt(loglog_slope(&ns, &secs)), opt(loglog_slope(&ns, &elems))]);
    }
    Ok(t)
}

fn time_median(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

/// Newton residual per iteration on Gaussian self-Gram matrices of size `m`.
pub fn run_pinv_trace(spec: &BenchSpec) -> Result<Table> {
    spec.validate()?;
    let mut t = Table::new(&["m", "instance", "iteration", "residual"]);
    let cfg = PinvConfig::fixed(spec.iterations);
    for &m in &spec.m_values {
        for inst in 0..spec.repeats {
            let q = gaussian_tokens(m, spec.d_e, 1.0, derive_seed(spec.seed, (m * 1000 + inst) as u64));
            let res = newton_pinv(&gaussian_kernel(&q, &q), &cfg)?;
            for (k, r) in res.trace.iter().enumerate() {
                t.push(vec![m.to_string(), inst.to_string(), k.to_string(), r.to_string()]);
            }
        }
    }
    Ok(t)
}

/// Spectrum summaries of softmax attention, the Gaussian Gram, and the raw and
/// normalized pseudo-inverse of a clustered bottleneck matrix.
pub fn run_spectra(spec: &BenchSpec) -> Result<Table> {
    spec.validate()?;
    let mut t = Table::new(&["matrix", "size", "lambda_max", "lambda_min", "trace", "spectral_norm", "top_ratio"]);
    let mut push = |r: &crate::spectral::SpectrumReport| {
        t.push(vec![
            r.kind.name().into(),
            r.size.to_string(),
            r.lambda_max().to_string(),
            r.lambda_min().to_string(),
            r.trace.to_string(),
            r.spectral_norm.to_string(),
            opt(r.top_ratio()),
        ]);
    };
    let setup = ClusterSetup::default();
    for &n in &spec.n_values {
        let q = gaussian_tokens(n, spec.d_e, 1.0, derive_seed(spec.seed, n as u64));
        push(&eigen_spectrum(&softmax_similar_symmetric(&q), true, MatrixKind::SoftmaxAttn)?);
        push(&eigen_spectrum(&gaussian_kernel(&q, &q), true, MatrixKind::GaussianGram)?);
        let c = clustered_tokens(n, setup.dim, setup.clusters, setup.spread, setup.separation, derive_seed(spec.seed, n as u64 + 7));
        push(&eigen_spectrum(&gaussian_kernel(&c, &c), true, MatrixKind::GaussianGram)?);
    }
    for &m in &spec.m_values {
        let c = clustered_tokens(m, setup.dim, setup.clusters, setup.spread, setup.separation, derive_seed(spec.seed, m as u64 + 11));
        let a = gaussian_kernel(&c, &c);
        let inv = crate::pinv::svd_pinv_oracle(&a, setup.rank_tol)?;
        push(&eigen_spectrum(&inv, true, MatrixKind::PinvRaw)?);
        push(&eigen_spectrum(&crate::nystrom::middle_factor(&a, &inv, true), true, MatrixKind::PinvNormalized)?);
    }
    Ok(t)
}

/// Per-trial norms and fitted exponents of the raw and normalized inverse.
pub fn run_norm_growth(spec: &BenchSpec) -> Result<Table> {
    spec.validate()?;
    let table = norm_growth_experiment(&spec.m_values, spec.repeats, spec.seed, &ClusterSetup::default(), spec.parallel)?;
    let mut t = Table::new(&["kind", "m", "trial", "raw", "normalized"]);
    for r in &table.rows {
        t.push(vec!["point".into(), r.m.to_string(), r.trial.to_string(), r.raw.to_string(), r.normalized.to_string()]);
    }
    t.push(vec!["exponent".into(), String::new(), String::new(), opt(table.raw_exponent), opt(table.normalized_exponent)]);
    Ok(t)
}

fn train_once(spec: &BenchSpec, task: &ToyTask, sampling: Sampling) -> Result<crate::model::History> {
    let data = task.generate()?;
    let cfg = ModelConfig {
        sampling,
        normalized: spec.normalized,
        pinv: PinvConfig { max_iterations: spec.iterations, ..PinvConfig::default() },
        init_seed: spec.seed,
        ..ModelConfig::default()
    };
    let mut model = ToyModel::new(&cfg, task.grid, task.d, task.classes)?;
    train_toy(&mut model, &data, &TrainConfig { epochs: spec.epochs, seed: spec.seed, ..TrainConfig::default() })
}

/// Training history of the toy model on the default task.
pub fn run_train(spec: &BenchSpec) -> Result<Table> {
    spec.validate()?;
    let task = ToyTask { seed: spec.seed, ..ToyTask::default() };
    let sampling = spec.sampling.build(task.grid, spec.m_values[0], derive_seed(spec.seed, 3))?;
    let h = train_once(spec, &task, sampling)?;
    let mut t = Table::new(&["epoch", "loss", "accuracy", "mean_pinv_residual"]);
    for e in &h.epochs {
        t.push(vec![e.epoch.to_string(), e.loss.to_string(), e.accuracy.to_string(), e.mean_pinv_residual.to_string()]);
    }
    Ok(t)
}

const ABLATION_HEADER: [&str; 7] = ["sampling", "m", "initial_accuracy", "final_accuracy", "best_accuracy", "final_loss", "mean_pinv_residual"];

fn ablation_row(kind: SamplingKind, m: usize, h: &crate::model::History) -> Vec<String> {
    vec![
        kind.name().into(),
        m.to_string(),
        h.initial_accuracy.to_string(),
        h.final_accuracy().to_string(),
        h.best_accuracy().to_string(),
        h.epochs.last().map_or(f64::NAN, |e| e.loss).to_string(),
        h.mean_pinv_residual().to_string(),
    ]
}

/// Trains the toy model once per sampling method at a fixed `m`.
pub fn run_ablate_sampling(spec: &BenchSpec) -> Result<Table> {
    spec.validate()?;
    let task = ToyTask { seed: spec.seed, ..ToyTask::default() };
    let mut t = Table::new(&ABLATION_HEADER);
    for kind in SamplingKind::ALL {
        for &m in &spec.m_values {
            let h = train_once(spec, &task, kind.build(task.grid, m, derive_seed(spec.seed, 3))?)?;
            t.push(ablation_row(kind, m, &h));
        }
    }
    Ok(t)
}

/// Trains the toy model on a 12x12 grid once per bottleneck length.
pub fn run_ablate_bottleneck(spec: &BenchSpec) -> Result<Table> {
    spec.validate()?;
    let task = ToyTask { seed: spec.seed, grid: Grid::new(12, 12), ..ToyTask::default() };
    let mut t = Table::new(&ABLATION_HEADER);
    for &m in &spec.m_values {
        if m > task.grid.n() {
            return Err(Error::Usage(format!("m={m} exceeds the {} tokens of the ablation grid", task.grid.n())));
        }
        let h = train_once(spec, &task, spec.sampling.build(task.grid, m, derive_seed(spec.seed, 3))?)?;
        t.push(ablation_row(spec.sampling, m, &h));
    }
    Ok(t)
}

/// Largest eigenvalue of row-softmax attention for random tokens at a given
/// token scale.
pub fn softmax_lambda_max(n: usize, d: usize, scale: f64, seed: u64) -> Result<f64> {
    let q = gaussian_tokens(n, d, scale, seed);
    Ok(eigen_spectrum(&softmax_similar_symmetric(&q), true, MatrixKind::SoftmaxAttn)?.lambda_max())
}

/// The raw and normalized inverse norms for one clustered bottleneck of size `m`.
pub fn clustered_inverse_norms(m: usize, seed: u64) -> Result<(f64, f64)> {
    let s = ClusterSetup::default();
    let c = clustered_tokens(m, s.dim, s.clusters, s.spread, s.separation, seed);
    bottleneck_norms(&gaussian_kernel(&c, &c), s.rank_tol)
}
