//! Toy softmax-free transformer block with hand-written reverse mode.

mod block;
mod io;
mod optim;
mod toy;

pub use block::{AttentionMode, BlockConfig, BlockTape, InverseGrad, LayerNorm, SoftBlock};
pub use io::{load_params, save_params};
pub use optim::{Optimizer, OptimizerState};
pub use toy::{train_toy, Dataset, EpochRecord, History, ModelConfig, ToyModel, ToyTask, TrainConfig};

use nalgebra::DMatrix;

/// A value and its accumulated reverse-mode adjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual {
    pub value: DMatrix<f64>,
    pub adjoint: DMatrix<f64>,
}

impl Dual {
    pub fn new(value: DMatrix<f64>) -> Self {
        let adjoint = DMatrix::zeros(value.nrows(), value.ncols());
        Dual { value, adjoint }
    }

    /// Adds `grad` into the adjoint; fan-out contributions sum.
    pub fn accumulate(&mut self, grad: &DMatrix<f64>) {
        assert_eq!(grad.shape(), self.value.shape(), "adjoint shape must match value shape");
        self.adjoint += grad;
    }

    pub fn zero_adjoint(&mut self) {
        self.adjoint.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub(crate) fn col_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

pub(crate) fn add_row(m: &DMatrix<f64>, row: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut r in out.row_iter_mut() {
        r += row;
    }
    out
}
