//! Synthetic grid classification and the training loop.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::block::{AttentionMode, BlockConfig, BlockTape, InverseGrad, SoftBlock};
use super::optim::{Optimizer, OptimizerState};
use super::{add_row, Dual};
use crate::error::{Error, Result};
use crate::nystrom::{AttentionConfig, Grid, Sampling};
use crate::pinv::PinvConfig;
use crate::synth::{derive_seed, rng, uniform_matrix};

/// Highest held-out accuracy a linear probe on mean-pooled tokens may reach.
pub const PROBE_CEILING: f64 = 0.7;

const PROBE_RIDGE: f64 = 1.0;

/// Token grids whose class is the number of distinct directions the tokens
/// cluster around: class `c` of `C` uses `2 round((n/2)^(c/(C-1)))` clusters,
/// arranged as antipodal pairs `+u, -u` and filled equally, so the mean token
/// carries no class information. Each token is `a u + b e` with `e` isotropic
/// noise of unit expected norm and `a^2 + b^2 = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub grid: Grid,
    pub d: usize,
    pub classes: usize,
    pub samples: usize,
    pub seed: u64,
    /// `a^2`, the share of each token's energy carried by its cluster direction.
    pub coherence: f64,
}

impl Default for ToyTask {
    fn default() -> Self {
        ToyTask {
            grid: Grid::new(8, 8),
            d: 16,
            classes: 2,
            samples: 256,
            seed: 0,
            coherence: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tokens: Vec<DMatrix<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub grid: Grid,
    /// Held-out accuracy of the linear probe run at generation.
    pub probe_accuracy: f64,
}

fn unit_vector<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl ToyTask {
    pub fn clusters_for(&self, class: usize) -> usize {
        let pairs = (self.grid.n() / 2).max(1) as f64;
        2 * (pairs.powf(class as f64 / (self.classes - 1) as f64).round() as usize).max(1)
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.classes < 2 || self.samples < 2 * self.classes || self.d == 0 || self.grid.n() == 0 {
            return Err(Error::Config(format!("toy task needs >= 2 classes and >= 2 samples per class, got {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.coherence) {
            return Err(Error::Config(format!("coherence {} outside [0, 1]", self.coherence)));
        }
        let (a, b) = (self.coherence.sqrt(), (1.0 - self.coherence).sqrt());
        let noise = b / (self.d as f64).sqrt();
        let n = self.grid.n();
        let mut r = rng(self.seed);
        let mut tokens = Vec::with_capacity(self.samples);
        let mut labels = Vec::with_capacity(self.samples);
        for s in 0..self.samples {
            let label = s % self.classes;
            let k = self.clusters_for(label);
            let dirs: Vec<Vec<f64>> = (0..k / 2).map(|_| unit_vector(self.d, &mut r)).collect();
            let mut assignment: Vec<usize> = (0..n).map(|i| i % k).collect();
            assignment.shuffle(&mut r);
            let mut x = DMatrix::zeros(n, self.d);
            for (i, &c) in assignment.iter().enumerate() {
                let sign = if c % 2 == 0 { a } else { -a };
                for j in 0..self.d {
                    let e: f64 = r.sample(StandardNormal);
                    x[(i, j)] = sign * dirs[c / 2][j] + noise * e;
                }
            }
            tokens.push(x);
            labels.push(label);
        }
        let probe_accuracy = linear_probe(&tokens, &labels, self.classes);
        if probe_accuracy >= PROBE_CEILING {
            return Err(Error::Degenerate(format!("mean-pooled tokens are linearly separable (probe accuracy {probe_accuracy:.3})")));
        }
        Ok(Dataset {
            tokens,
            labels,
            classes: self.classes,
            grid: self.grid,
            probe_accuracy,
        })
    }
}

fn argmax_row(m: &DMatrix<f64>) -> usize {
    m.row(0).transpose().argmax().0
}

fn mean_pool(x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, x.ncols(), |_, j| x.column(j).mean())
}

/// Ridge regression onto one-hot targets, scored by two-fold cross-validation.
/// Samples are split in blocks of `classes` so both folds hold every class.
pub fn linear_probe(tokens: &[DMatrix<f64>], labels: &[usize], classes: usize) -> f64 {
    let feats: Vec<DMatrix<f64>> = tokens.iter().map(mean_pool).collect();
    let d = feats[0].ncols() + 1;
    let row = |f: &DMatrix<f64>| DMatrix::from_fn(1, d, |_, j| if j + 1 == d { 1.0 } else { f[(0, j)] });
    let fold = |i: usize| (i / classes) % 2;
    let (mut hits, mut total) = (0, 0);
    for test_fold in 0..2 {
        let mut gram = DMatrix::identity(d, d) * PROBE_RIDGE;
        let mut rhs = DMatrix::zeros(d, classes);
        for (i, f) in feats.iter().enumerate().filter(|(i, _)| fold(*i) != test_fold) {
            let x = row(f);
            gram += x.tr_mul(&x);
            let mut target = DMatrix::zeros(1, classes);
            target[(0, labels[i])] = 1.0;
            rhs += x.tr_mul(&target);
        }
        let w = gram.cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| DMatrix::zeros(d, classes));
        for (i, f) in feats.iter().enumerate().filter(|(i, _)| fold(*i) == test_fold) {
            hits += usize::from(argmax_row(&(row(f) * &w)) == labels[i]);
            total += 1;
        }
    }
    hits as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_e: usize,
    pub heads: usize,
    pub sampling: Sampling,
    /// SOFT++ degree normalization of the middle factor.
    pub normalized: bool,
    pub mode: AttentionMode,
    pub pinv: PinvConfig,
    pub ffn_expansion: usize,
    pub inverse_grad: InverseGrad,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    /// The SOFT++ toy configuration.
    fn default() -> Self {
        ModelConfig {
            d_e: 16,
            heads: 1,
            sampling: Sampling::conv(2),
            normalized: true,
            mode: AttentionMode::Soft,
            pinv: PinvConfig::default(),
            ffn_expansion: 4,
            inverse_grad: InverseGrad::Closed,
            init_seed: 0,
        }
    }
}

/// Learned position embedding, one block, mean pooling and a linear classifier.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub pos: Dual,
    pub block: SoftBlock,
    pub w_cls: Dual,
    pub b_cls: Dual,
}

struct ModelTape {
    block: BlockTape,
    pooled: DMatrix<f64>,
    probs: DMatrix<f64>,
    n: usize,
}

impl ToyModel {
    pub fn new(cfg: &ModelConfig, grid: Grid, d: usize, classes: usize) -> Result<Self> {
        let attn = AttentionConfig::new(cfg.d_e, cfg.heads, cfg.sampling, grid, cfg.normalized)?.with_pinv(cfg.pinv);
        let block_cfg = BlockConfig {
            d,
            attn,
            grid,
            ffn_expansion: cfg.ffn_expansion,
            mode: cfg.mode,
            inverse_grad: cfg.inverse_grad,
        };
        let mut r = rng(cfg.init_seed);
        let block = SoftBlock::new(block_cfg, &mut r)?;
        Ok(ToyModel {
            pos: Dual::new(uniform_matrix(grid.n(), d, 0.02, &mut r)),
            block,
            w_cls: Dual::new(uniform_matrix(d, classes, 1.0 / (d as f64).sqrt(), &mut r)),
            b_cls: Dual::new(DMatrix::zeros(1, classes)),
        })
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Dual)> {
        let mut out = vec![("pos".to_string(), &mut self.pos)];
        out.extend(self.block.params_mut().into_iter().map(|(n, p)| (format!("block.{n}"), p)));
        out.push(("cls.w".into(), &mut self.w_cls));
        out.push(("cls.b".into(), &mut self.b_cls));
        out
    }

    pub fn parameter_count(&mut self) -> usize {
        self.params_mut().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn save<W: Write>(&mut self, out: W) -> Result<()> {
        let params = self.params_mut();
        let refs: Vec<(String, &DMatrix<f64>)> = params.iter().map(|(n, p)| (n.clone(), &p.value)).collect();
        super::save_params(&refs, out)
    }

    /// Overwrites every parameter from a file written by [`ToyModel::save`].
    pub fn load<R: std::io::Read>(&mut self, input: R) -> Result<()> {
        let loaded = super::load_params(input)?;
        let mut params = self.params_mut();
        if loaded.len() != params.len() {
            return Err(Error::shape("ToyModel::load", params.len(), loaded.len()));
        }
        for ((name, p), (lname, value)) in params.iter_mut().zip(loaded) {
            if *name != lname || p.value.shape() != value.shape() {
                return Err(Error::shape("ToyModel::load", format!("{name} {:?}", p.value.shape()), format!("{lname} {:?}", value.shape())));
            }
            p.value = value;
        }
        Ok(())
    }

    /// Class probabilities for one token grid.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(x)?.probs)
    }

    fn forward(&self, x: &DMatrix<f64>) -> Result<ModelTape> {
        let (z, block) = self.block.forward_with_tape(&(x + &self.pos.value))?;
        let pooled = mean_pool(&z);
        let logits = add_row(&(&pooled * &self.w_cls.value), &self.b_cls.value);
        let max = logits.max();
        let exp = logits.map(|l| (l - max).exp());
        let probs = &exp / exp.sum();
        Ok(ModelTape { block, pooled, probs, n: x.nrows() })
    }

    /// Cross-entropy of one sample.
    pub fn loss(&self, x: &DMatrix<f64>, label: usize) -> Result<f64> {
        Ok(-self.forward(x)?.probs[(0, label)].max(f64::MIN_POSITIVE).ln())
    }

    /// Cross-entropy of one sample; gradients are accumulated into the
    /// adjoints scaled by `weight`. Also returns the per-head Newton residuals.
    pub fn loss_and_backward(&mut self, x: &DMatrix<f64>, label: usize, weight: f64) -> Result<(f64, Vec<f64>)> {
        let tape = self.forward(x)?;
        let loss = -tape.probs[(0, label)].max(f64::MIN_POSITIVE).ln();
        let mut dlogits = tape.probs.clone() * weight;
        dlogits[(0, label)] -= weight;
        self.w_cls.accumulate(&tape.pooled.tr_mul(&dlogits));
        self.b_cls.accumulate(&dlogits);
        let dpooled = &dlogits * self.w_cls.value.transpose();
        let dz = DMatrix::from_fn(tape.n, dpooled.ncols(), |_, j| dpooled[(0, j)] / tape.n as f64);
        let dx = self.block.backward_with_tape(&tape.block, &dz)?;
        self.pos.accumulate(&dx);
        Ok((loss, tape.block.residuals))
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let mut hits = 0;
        for (x, &y) in data.tokens.iter().zip(&data.labels) {
            hits += usize::from(argmax_row(&self.predict(x)?) == y);
        }
        Ok(hits as f64 / data.tokens.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 3e-3,
            optimizer: Optimizer::adamw(),
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Training-set accuracy measured after the epoch.
    pub accuracy: f64,
    /// Mean final Newton residual over all heads and steps of the epoch.
    pub mean_pinv_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub initial_accuracy: f64,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(self.initial_accuracy, |e| e.accuracy)
    }

    pub fn best_accuracy(&self) -> f64 {
        self.epochs.iter().map(|e| e.accuracy).fold(self.initial_accuracy, f64::max)
    }

    /// Mean of the per-epoch residuals; 0 for exact attention.
    pub fn mean_pinv_residual(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|e| e.mean_pinv_residual).sum::<f64>() / self.epochs.len() as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss", "accuracy", "mean_pinv_residual"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.loss.to_string(), e.accuracy.to_string(), e.mean_pinv_residual.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains `model` in place with minibatches in a seeded shuffled order.
pub fn train_toy(model: &mut ToyModel, data: &Dataset, cfg: &TrainConfig) -> Result<History> {
    if cfg.batch_size == 0 || !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::Config(format!("invalid training config {cfg:?}")));
    }
    let initial_accuracy = model.accuracy(data)?;
    let mut state = OptimizerState::default();
    let mut order: Vec<usize> = (0..data.tokens.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng(derive_seed(cfg.seed, epoch as u64)));
        let (mut loss_sum, mut res_sum, mut res_count) = (0.0, 0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let (loss, residuals) = model.loss_and_backward(&data.tokens[i], data.labels[i], weight)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step, residuals });
                }
                loss_sum += loss;
                res_sum += residuals.iter().sum::<f64>();
                res_count += residuals.len();
            }
            let mut params: Vec<&mut Dual> = model.params_mut().into_iter().map(|(_, p)| p).collect();
            state.step(&cfg.optimizer, cfg.lr, &mut params);
        }
        let accuracy = model.accuracy(data)?;
        let mean_pinv_residual = if res_count == 0 { 0.0 } else { res_sum / res_count as f64 };
        let loss = loss_sum / data.tokens.len() as f64;
        log::debug!("epoch {epoch}: loss {loss:.4} accuracy {accuracy:.3} residual {mean_pinv_residual:.2e}");
        epochs.push(EpochRecord { epoch, loss, accuracy, mean_pinv_residual });
    }
    Ok(History { initial_accuracy, epochs })
}
