//! Softmax-free self-attention.
//!
//! Attention scores come from a Gaussian kernel instead of a row softmax, which
//! keeps the score matrix a positive semi-definite Gram matrix. That property
//! makes a Nyström low-rank factorization valid, and the factorization lets
//! attention be applied in time and memory linear in the sequence length.
//!
//! Module map:
//! - [`dense`]: exact quadratic baselines (softmax and full Gaussian attention).
//! - [`pinv`]: Newton-Raphson Moore-Penrose inverse, SVD oracle, inverse gradient.
//! - [`nystrom`]: bottleneck sampling and the linearized attention itself.
//! - [`spectral`]: eigenvalue and spectral-norm instrumentation.
//! - [`model`]: a toy transformer block with hand-written reverse mode and training.
//! - [`bench`]: CSV-emitting experiment runners used by the `soft-bench` CLI.

pub mod bench;
pub mod dense;
pub mod error;
pub mod linalg;
pub mod memory;
pub mod model;
pub mod nystrom;
pub mod pinv;
pub mod spectral;
pub mod synth;

pub use dense::{GramKind, GramMatrix, ProjectionSet, TokenMatrix};
pub use error::{Error, Result};
pub use nystrom::{AttentionConfig, BottleneckTokens, ConvSampler, Grid, Sampling, SoftDiagnostics};
pub use pinv::{PinvConfig, PinvResult, ResidualNorm};
pub use spectral::{MatrixKind, SpectrumReport};

pub use nalgebra::DMatrix;
