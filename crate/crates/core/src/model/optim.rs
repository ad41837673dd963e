use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::Dual;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    /// Adam with decoupled weight decay.
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Optimizer {
    pub fn adamw() -> Self {
        Optimizer::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers, one pair per parameter in visiting order.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    step: u64,
    first: Vec<DMatrix<f64>>,
    second: Vec<DMatrix<f64>>,
}

impl OptimizerState {
    /// Applies one update from the adjoints, then zeroes them.
    pub fn step(&mut self, opt: &Optimizer, lr: f64, params: &mut [&mut Dual]) {
        self.step += 1;
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| DMatrix::zeros(p.value.nrows(), p.value.ncols())).collect();
            self.second = self.first.clone();
        }
        for (idx, p) in params.iter_mut().enumerate() {
            match *opt {
                Optimizer::Sgd => {
                    p.value -= &p.adjoint * lr;
                }
                Optimizer::AdamW { beta1, beta2, eps, weight_decay } => {
                    let m = &mut self.first[idx];
                    let v = &mut self.second[idx];
                    let t = self.step as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for ((w, g), (mi, vi)) in p.value.iter_mut().zip(p.adjoint.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                        *w -= lr * (update + weight_decay * *w);
                    }
                }
            }
            p.zero_adjoint();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = Dual::new(DMatrix::from_element(1, 2, 1.0));
        p.accumulate(&DMatrix::from_row_slice(1, 2, &[2.0, -4.0]));
        let mut st = OptimizerState::default();
        st.step(&Optimizer::Sgd, 0.5, &mut [&mut p]);
        assert_eq!(p.value, DMatrix::from_row_slice(1, 2, &[0.0, 3.0]));
        assert!(p.adjoint.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * sign(g), plus decay.
        let mut p = Dual::new(DMatrix::from_element(1, 1, 2.0));
        p.accumulate(&DMatrix::from_element(1, 1, 0.3));
        let mut st = OptimizerState::default();
        let opt = Optimizer::AdamW { beta1: 0.9, beta2: 0.999, eps: 0.0, weight_decay: 0.1 };
        st.step(&opt, 0.01, &mut [&mut p]);
        assert!((p.value[(0, 0)] - (2.0 - 0.01 * (1.0 + 0.1 * 2.0))).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = Dual::new(DMatrix::from_element(2, 2, 1.5));
        p.accumulate(&DMatrix::from_element(2, 2, 7.0));
        let mut st = OptimizerState::default();
        st.step(&Optimizer::adamw(), 0.0, &mut [&mut p]);
        assert_eq!(p.value, DMatrix::from_element(2, 2, 1.5));
    }
}
