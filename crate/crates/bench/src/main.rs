//! `soft-bench`: runs one experiment and writes its CSV to a file or stdout.
//!
//! Exit codes: 0 on success, 1 on a numerical failure, 2 on a usage error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use soft_attn::bench::{self, BenchSpec, Mode, SamplingKind};
use soft_attn::Error;

#[derive(Parser, Debug)]
#[command(name = "soft-bench", version, about = "Scaling, convergence, spectral and training experiments for softmax-free attention")]
struct Cli {
    /// scale, pinv_trace, spectra, norm_growth, train, ablate_sampling or ablate_bottleneck
    #[arg(long)]
    mode: String,
    /// Comma-separated sequence lengths
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Comma-separated bottleneck lengths
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<usize>>,
    /// Timing repeats, trace instances or trials, depending on the mode
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// Degree-normalize the middle factor
    #[arg(long, action = clap::ArgAction::Set, default_value_t = true)]
    normalized: bool,
    /// conv, pool, random or biased
    #[arg(long)]
    sampling: Option<String>,
    /// Newton iterations
    #[arg(long)]
    iters: Option<usize>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Embedding dimension for the synthetic tokens
    #[arg(long)]
    d_e: Option<usize>,
    /// Run independent trials on all cores
    #[arg(long)]
    parallel: bool,
}

fn build_spec(cli: &Cli) -> Result<BenchSpec, Error> {
    let mode: Mode = cli.mode.parse()?;
    let mut spec = BenchSpec::new(mode);
    if let Some(n) = &cli.n {
        spec.n_values = n.clone();
    }
    if let Some(m) = &cli.m {
        spec.m_values = m.clone();
    }
    if let Some(r) = cli.repeats {
        spec.repeats = r;
    }
    if let Some(s) = &cli.sampling {
        spec.sampling = s.parse::<SamplingKind>()?;
    }
    if let Some(t) = cli.iters {
        spec.iterations = t;
    }
    if let Some(e) = cli.epochs {
        spec.epochs = e;
    }
    if let Some(d) = cli.d_e {
        spec.d_e = d;
    }
    spec.seed = cli.seed;
    spec.normalized = cli.normalized;
    spec.parallel = cli.parallel;
    spec.validate()?;
    Ok(spec)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let spec = build_spec(cli)?;
    log::info!("running {}", spec.mode);
    let table = bench::run(&spec)?;
    let out: Box<dyn Write> = match &cli.out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(io::stdout().lock()),
    };
    table.write_csv(&spec, out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("soft-bench: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) | Error::Shape { .. } | Error::Refused(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
