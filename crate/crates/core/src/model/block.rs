//! One pre-norm block: `y = x + Attn(LN1(x)) W_o`, `z = y + FFN(LN2(y))`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{add_row, col_sums, Dual};
use crate::dense::{gaussian_kernel, gaussian_kernel_backward, ProjectionSet, TokenMatrix};
use crate::error::{Error, Result};
use crate::nystrom::{degree_inv_sqrt, middle_factor, sample_bottleneck, sample_bottleneck_backward, AttentionConfig, BottleneckTokens, ConvSampler, Grid, Sampling};
use crate::pinv::{newton_pinv, pinv_backward, pinv_backward_unrolled};
use crate::synth::uniform_matrix;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// How the gradient of the inverse is obtained in the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InverseGrad {
    /// `-Y^T dY Y^T` with `Y` the forward iterate.
    Closed,
    /// Reverse mode through every Newton step.
    Unrolled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    /// Nyström-linearized attention.
    Soft,
    /// Full `n x n` Gaussian attention without normalization.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Token feature dimension.
    pub d: usize,
    pub attn: AttentionConfig,
    pub grid: Grid,
    /// Hidden width of the feed-forward layer is `ffn_expansion * d`.
    pub ffn_expansion: usize,
    pub mode: AttentionMode,
    pub inverse_grad: InverseGrad,
}

/// Per-token standardization with learnable scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Dual,
    pub beta: Dual,
}

#[derive(Clone, Debug)]
struct LnCache {
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Dual::new(DMatrix::from_element(1, d, 1.0)),
            beta: Dual::new(DMatrix::zeros(1, d)),
        }
    }

    fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.row_iter_mut() {
            let mean = row.sum() / d;
            row.add_scalar_mut(-mean);
            let var = row.norm_squared() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row *= inv;
            inv_std.push(inv);
        }
        let mut out = xhat.clone();
        for mut row in out.row_iter_mut() {
            row.component_mul_assign(&self.gamma.value);
            row += &self.beta.value;
        }
        (out, LnCache { xhat, inv_std })
    }

    fn backward(&mut self, cache: &LnCache, dout: &DMatrix<f64>) -> DMatrix<f64> {
        self.gamma.accumulate(&col_sums(&dout.component_mul(&cache.xhat)));
        self.beta.accumulate(&col_sums(dout));
        let d = dout.ncols() as f64;
        let mut dx = dout.clone();
        for (i, mut row) in dx.row_iter_mut().enumerate() {
            row.component_mul_assign(&self.gamma.value);
            let xhat = cache.xhat.row(i);
            let mean = row.sum() / d;
            let proj = row.dot(&xhat) / d;
            let adjusted = (&row - xhat * proj).add_scalar(-mean) * cache.inv_std[i];
            row.copy_from(&adjusted);
        }
        dx
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Clone, Debug)]
struct SoftHead {
    qh: DMatrix<f64>,
    qt: DMatrix<f64>,
    vh: DMatrix<f64>,
    a: DMatrix<f64>,
    p: DMatrix<f64>,
    y: DMatrix<f64>,
    mid: DMatrix<f64>,
    pv: DMatrix<f64>,
    c: DMatrix<f64>,
    alpha: f64,
    iterations: usize,
}

#[derive(Clone, Debug)]
struct ExactHead {
    qh: DMatrix<f64>,
    vh: DMatrix<f64>,
    s: DMatrix<f64>,
}

#[derive(Clone, Debug)]
enum AttnTape {
    Soft { sampled: BottleneckTokens, heads: Vec<SoftHead> },
    Exact { heads: Vec<ExactHead> },
}

/// Intermediates of one forward pass, consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct BlockTape {
    ln1: LnCache,
    u: DMatrix<f64>,
    q: DMatrix<f64>,
    attn: AttnTape,
    o: DMatrix<f64>,
    ln2: LnCache,
    v2: DMatrix<f64>,
    h1: DMatrix<f64>,
    g: DMatrix<f64>,
    /// Final Newton residual of each head (empty in exact mode).
    pub residuals: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SoftBlock {
    pub cfg: BlockConfig,
    pub ln1: LayerNorm,
    /// Shared query/key projection.
    pub w_qk: Dual,
    pub w_v: Dual,
    pub conv_taps: Vec<Dual>,
    pub conv_bias: Option<Dual>,
    pub w_o: Dual,
    pub ln2: LayerNorm,
    pub w1: Dual,
    pub b1: Dual,
    pub w2: Dual,
    pub b2: Dual,
    tape: Option<BlockTape>,
}

fn fan_in<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Dual {
    Dual::new(uniform_matrix(rows, cols, 1.0 / (rows as f64).sqrt(), rng))
}

impl SoftBlock {
    pub fn new<R: Rng>(cfg: BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.attn.validate(cfg.grid)?;
        let (d, de, hidden) = (cfg.d, cfg.attn.d_e, cfg.ffn_expansion * cfg.d);
        if d == 0 || hidden == 0 {
            return Err(Error::Config("block dimensions must be positive".into()));
        }
        let (conv_taps, conv_bias) = match cfg.attn.sampling {
            Sampling::Convolution { window } => {
                let s = ConvSampler::init(window, de, rng);
                (s.weights.into_iter().map(Dual::new).collect(), Some(Dual::new(s.bias)))
            }
            _ => (Vec::new(), None),
        };
        Ok(SoftBlock {
            ln1: LayerNorm::new(d),
            w_qk: fan_in(d, de, rng),
            w_v: fan_in(d, de, rng),
            conv_taps,
            conv_bias,
            w_o: fan_in(de, d, rng),
            ln2: LayerNorm::new(d),
            w1: fan_in(d, hidden, rng),
            b1: Dual::new(DMatrix::zeros(1, hidden)),
            w2: fan_in(hidden, d, rng),
            b2: Dual::new(DMatrix::zeros(1, d)),
            cfg,
            tape: None,
        })
    }

    /// The attention projections as a shared-key [`ProjectionSet`].
    pub fn projection(&self) -> ProjectionSet {
        ProjectionSet::shared(self.w_qk.value.clone(), self.w_v.value.clone()).expect("w_qk and w_v have equal shapes")
    }

    pub fn conv_sampler(&self) -> Option<ConvSampler> {
        let window = match self.cfg.attn.sampling {
            Sampling::Convolution { window } => window,
            _ => return None,
        };
        Some(ConvSampler {
            window,
            weights: self.conv_taps.iter().map(|t| t.value.clone()).collect(),
            bias: self.conv_bias.as_ref()?.value.clone(),
        })
    }

    /// Every learnable tensor with a stable name.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Dual)> {
        let mut out: Vec<(String, &mut Dual)> = vec![
            ("ln1.gamma".into(), &mut self.ln1.gamma),
            ("ln1.beta".into(), &mut self.ln1.beta),
            ("w_qk".into(), &mut self.w_qk),
            ("w_v".into(), &mut self.w_v),
        ];
        for (i, t) in self.conv_taps.iter_mut().enumerate() {
            out.push((format!("conv.tap{i}"), t));
        }
        if let Some(b) = self.conv_bias.as_mut() {
            out.push(("conv.bias".into(), b));
        }
        out.extend([
            ("w_o".to_string(), &mut self.w_o),
            ("ln2.gamma".to_string(), &mut self.ln2.gamma),
            ("ln2.beta".to_string(), &mut self.ln2.beta),
            ("ffn.w1".to_string(), &mut self.w1),
            ("ffn.b1".to_string(), &mut self.b1),
            ("ffn.w2".to_string(), &mut self.w2),
            ("ffn.b2".to_string(), &mut self.b2),
        ]);
        out
    }

    /// Forward pass that records the tape for [`SoftBlock::backward`].
    pub fn forward(&mut self, x: &TokenMatrix) -> Result<TokenMatrix> {
        let (z, tape) = self.forward_with_tape(x)?;
        self.tape = Some(tape);
        TokenMatrix::new(z)
    }

    /// Accumulates parameter adjoints and returns the input gradient, using the
    /// tape from the last [`SoftBlock::forward`].
    pub fn backward(&mut self, upstream: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let tape = self.tape.take().ok_or(Error::MissingTape)?;
        let dx = self.backward_with_tape(&tape, upstream);
        self.tape = Some(tape);
        dx
    }

    pub fn forward_with_tape(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, BlockTape)> {
        if x.nrows() != self.cfg.grid.n() || x.ncols() != self.cfg.d {
            return Err(Error::shape("SoftBlock::forward", format!("{}x{}", self.cfg.grid.n(), self.cfg.d), format!("{}x{}", x.nrows(), x.ncols())));
        }
        let (u, ln1) = self.ln1.forward(x);
        let q = &u * &self.w_qk.value;
        let v = &u * &self.w_v.value;
        let (o, attn, residuals) = match self.cfg.mode {
            AttentionMode::Soft => self.soft_forward(&q, &v)?,
            AttentionMode::Exact => self.exact_forward(&q, &v),
        };
        let y = x + &o * &self.w_o.value;
        let (v2, ln2) = self.ln2.forward(&y);
        let h1 = add_row(&(&v2 * &self.w1.value), &self.b1.value);
        let g = h1.map(gelu);
        let f = add_row(&(&g * &self.w2.value), &self.b2.value);
        let z = &y + f;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("SoftBlock::forward"));
        }
        let tape = BlockTape { ln1, u, q, attn, o, ln2, v2, h1, g, residuals };
        Ok((z, tape))
    }

    fn soft_forward(&self, q: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<(DMatrix<f64>, AttnTape, Vec<f64>)> {
        let cfg = &self.cfg.attn;
        let conv = self.conv_sampler();
        let sampled = sample_bottleneck(q, self.cfg.grid, &cfg.sampling, conv.as_ref())?;
        let dh = cfg.head_dim();
        let mut o = DMatrix::zeros(q.nrows(), cfg.d_e);
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut residuals = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = q.columns(h * dh, dh).into_owned();
            let qt = sampled.data.columns(h * dh, dh).into_owned();
            let vh = v.columns(h * dh, dh).into_owned();
            let a = gaussian_kernel(&qt, &qt);
            let p = gaussian_kernel(&qt, &qh);
            let inv = newton_pinv(&a, &cfg.pinv)?;
            residuals.push(inv.final_residual());
            let mid = middle_factor(&a, &inv.approx_inverse, cfg.normalized);
            let pv = &p * &vh;
            let c = &mid * &pv;
            o.columns_mut(h * dh, dh).copy_from(&p.tr_mul(&c));
            heads.push(SoftHead {
                qh,
                qt,
                vh,
                a,
                p,
                y: inv.approx_inverse,
                mid,
                pv,
                c,
                alpha: inv.alpha,
                iterations: inv.iterations_used,
            });
        }
        Ok((o, AttnTape::Soft { sampled, heads }, residuals))
    }

    fn exact_forward(&self, q: &DMatrix<f64>, v: &DMatrix<f64>) -> (DMatrix<f64>, AttnTape, Vec<f64>) {
        let dh = self.cfg.attn.head_dim();
        let mut o = DMatrix::zeros(q.nrows(), self.cfg.attn.d_e);
        let mut heads = Vec::new();
        for h in 0..self.cfg.attn.heads {
            let qh = q.columns(h * dh, dh).into_owned();
            let vh = v.columns(h * dh, dh).into_owned();
            let s = gaussian_kernel(&qh, &qh);
            o.columns_mut(h * dh, dh).copy_from(&(&s * &vh));
            heads.push(ExactHead { qh, vh, s });
        }
        (o, AttnTape::Exact { heads }, Vec::new())
    }

    pub fn backward_with_tape(&mut self, tape: &BlockTape, dz: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        // z = y + g W2 + b2
        self.w2.accumulate(&tape.g.tr_mul(dz));
        self.b2.accumulate(&col_sums(dz));
        let dg = dz * self.w2.value.transpose();
        let dh1 = dg.zip_map(&tape.h1, |d, x| d * gelu_grad(x));
        self.w1.accumulate(&tape.v2.tr_mul(&dh1));
        self.b1.accumulate(&col_sums(&dh1));
        let dv2 = &dh1 * self.w1.value.transpose();
        let dy = dz + self.ln2.backward(&tape.ln2, &dv2);

        // y = x + O W_o
        self.w_o.accumulate(&tape.o.tr_mul(&dy));
        let d_o = &dy * self.w_o.value.transpose();
        let (dq, dv) = match &tape.attn {
            AttnTape::Soft { sampled, heads } => self.soft_backward(&tape.q, sampled, heads, &d_o)?,
            AttnTape::Exact { heads } => self.exact_backward(heads, &d_o),
        };
        self.w_qk.accumulate(&tape.u.tr_mul(&dq));
        self.w_v.accumulate(&tape.u.tr_mul(&dv));
        let du = &dq * self.w_qk.value.transpose() + &dv * self.w_v.value.transpose();
        Ok(dy + self.ln1.backward(&tape.ln1, &du))
    }

    fn soft_backward(&mut self, q: &DMatrix<f64>, sampled: &BottleneckTokens, heads: &[SoftHead], d_o: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let cfg = self.cfg.attn.clone();
        let dh = cfg.head_dim();
        let mut dq = DMatrix::zeros(q.nrows(), q.ncols());
        let mut dv = DMatrix::zeros(q.nrows(), cfg.d_e);
        let mut d_sampled = DMatrix::zeros(sampled.data.nrows(), sampled.data.ncols());
        for (h, hd) in heads.iter().enumerate() {
            let doh = d_o.columns(h * dh, dh).into_owned();
            // O_h = P^T C, C = M (P V_h)
            let mut dp = &hd.c * doh.transpose();
            let dc = &hd.p * &doh;
            let dmid = &dc * hd.pv.transpose();
            let dpv = hd.mid.tr_mul(&dc);
            dp += &dpv * hd.vh.transpose();
            dv.columns_mut(h * dh, dh).copy_from(&hd.p.tr_mul(&dpv));

            let mut da = DMatrix::zeros(hd.a.nrows(), hd.a.ncols());
            let dy = if cfg.normalized {
                let w = degree_inv_sqrt(&hd.a);
                let m = w.len();
                let dy = DMatrix::from_fn(m, m, |i, j| w[i] * dmid[(i, j)] * w[j]);
                for k in 0..m {
                    let mut dw = 0.0;
                    for j in 0..m {
                        dw += dmid[(k, j)] * hd.y[(k, j)] * w[j] + dmid[(j, k)] * w[j] * hd.y[(j, k)];
                    }
                    let degree = hd.a.row(k).sum();
                    if degree > 1e-12 {
                        let ds = -0.5 * w[k].powi(3) * dw;
                        da.row_mut(k).add_scalar_mut(ds);
                    }
                }
                dy
            } else {
                dmid
            };
            da += match self.cfg.inverse_grad {
                InverseGrad::Closed => pinv_backward(&hd.y, &dy)?,
                InverseGrad::Unrolled => pinv_backward_unrolled(&hd.a, hd.alpha, hd.iterations, &dy)?,
            };

            let (da1, da2) = gaussian_kernel_backward(&hd.qt, &hd.qt, &hd.a, &da);
            let (dpt, dqh) = gaussian_kernel_backward(&hd.qt, &hd.qh, &hd.p, &dp);
            d_sampled.columns_mut(h * dh, dh).copy_from(&(da1 + da2 + dpt));
            let mut block = dq.columns_mut(h * dh, dh);
            block += dqh;
        }
        let conv = self.conv_sampler();
        let (dq_sample, dconv) = sample_bottleneck_backward(&d_sampled, q, self.cfg.grid, &cfg.sampling, sampled, conv.as_ref())?;
        dq += dq_sample;
        if let Some(dconv) = dconv {
            for (tap, g) in self.conv_taps.iter_mut().zip(&dconv.weights) {
                tap.accumulate(g);
            }
            if let Some(b) = self.conv_bias.as_mut() {
                b.accumulate(&dconv.bias);
            }
        }
        Ok((dq, dv))
    }

    fn exact_backward(&self, heads: &[ExactHead], d_o: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let dh = self.cfg.attn.head_dim();
        let n = d_o.nrows();
        let mut dq = DMatrix::zeros(n, self.cfg.attn.d_e);
        let mut dv = DMatrix::zeros(n, self.cfg.attn.d_e);
        for (h, hd) in heads.iter().enumerate() {
            let doh = d_o.columns(h * dh, dh).into_owned();
            let ds = &doh * hd.vh.transpose();
            dv.columns_mut(h * dh, dh).copy_from(&hd.s.tr_mul(&doh));
            let (d1, d2) = gaussian_kernel_backward(&hd.qh, &hd.qh, &hd.s, &ds);
            dq.columns_mut(h * dh, dh).copy_from(&(d1 + d2));
        }
        (dq, dv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use crate::nystrom::{materialize_shat, soft_attention};
    use crate::pinv::PinvConfig;
    use crate::synth::{gaussian_tokens, rng};

    fn block(grid: Grid, d: usize, de: usize, heads: usize, sampling: Sampling, normalized: bool, seed: u64) -> SoftBlock {
        let attn = AttentionConfig::new(de, heads, sampling, grid, normalized).unwrap().with_pinv(PinvConfig::fixed(40));
        let cfg = BlockConfig {
            d,
            attn,
            grid,
            ffn_expansion: 4,
            mode: AttentionMode::Soft,
            inverse_grad: InverseGrad::Closed,
        };
        SoftBlock::new(cfg, &mut rng(seed)).unwrap()
    }

    fn zero_all(b: &mut SoftBlock) {
        for (_, p) in b.params_mut() {
            p.value.fill(0.0);
        }
    }

    #[test]
    fn zero_weights_pass_input_through() {
        let mut b = block(Grid::new(2, 2), 4, 4, 2, Sampling::pool(1), true, 1);
        zero_all(&mut b);
        let x = TokenMatrix::new(gaussian_tokens(4, 4, 1.0, 2)).unwrap();
        assert_eq!(b.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_attention_output_leaves_ffn_path() {
        let mut b = block(Grid::new(2, 2), 4, 4, 1, Sampling::pool(2), false, 3);
        b.w_o.value.fill(0.0);
        let x = gaussian_tokens(4, 4, 1.0, 4);
        let (z, _) = b.forward_with_tape(&x).unwrap();
        let (v2, _) = b.ln2.forward(&x);
        let h1 = add_row(&(&v2 * &b.w1.value), &b.b1.value).map(gelu);
        let ffn = add_row(&(&h1 * &b.w2.value), &b.b2.value);
        assert!(max_abs_diff(&z, &(x + ffn)) < 1e-14);
    }

    /// Straight-line evaluation of the block with explicit loops and the dense
    /// reconstruction of the attention matrix.
    fn reference_forward(b: &SoftBlock, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, d) = x.shape();
        let ln = |x: &DMatrix<f64>, ln: &LayerNorm| {
            DMatrix::from_fn(n, d, |i, j| {
                let mean: f64 = (0..d).map(|t| x[(i, t)]).sum::<f64>() / d as f64;
                let var: f64 = (0..d).map(|t| (x[(i, t)] - mean).powi(2)).sum::<f64>() / d as f64;
                (x[(i, j)] - mean) / (var + LN_EPS).sqrt() * ln.gamma.value[(0, j)] + ln.beta.value[(0, j)]
            })
        };
        let matmul = |a: &DMatrix<f64>, b: &DMatrix<f64>| DMatrix::from_fn(a.nrows(), b.ncols(), |i, j| (0..a.ncols()).map(|t| a[(i, t)] * b[(t, j)]).sum::<f64>());
        let u = ln(x, &b.ln1);
        let q = matmul(&u, &b.w_qk.value);
        let v = matmul(&u, &b.w_v.value);
        let cfg = &b.cfg.attn;
        let shats = materialize_shat(&TokenMatrix::new(q).unwrap(), cfg, b.cfg.grid, b.conv_sampler().as_ref()).unwrap();
        let dh = cfg.head_dim();
        let mut o = DMatrix::zeros(n, cfg.d_e);
        for (h, s) in shats.iter().enumerate() {
            for i in 0..n {
                for c in 0..dh {
                    o[(i, h * dh + c)] = (0..n).map(|j| s[(i, j)] * v[(j, h * dh + c)]).sum();
                }
            }
        }
        let y = x + matmul(&o, &b.w_o.value);
        let v2 = ln(&y, &b.ln2);
        let hidden = b.w1.value.ncols();
        let g = DMatrix::from_fn(n, hidden, |i, j| gelu((0..d).map(|t| v2[(i, t)] * b.w1.value[(t, j)]).sum::<f64>() + b.b1.value[(0, j)]));
        DMatrix::from_fn(n, d, |i, j| y[(i, j)] + (0..hidden).map(|t| g[(i, t)] * b.w2.value[(t, j)]).sum::<f64>() + b.b2.value[(0, j)])
    }

    #[test]
    fn forward_matches_straight_line_reference() {
        for (normalized, sampling) in [(false, Sampling::pool(1)), (true, Sampling::pool(2)), (true, Sampling::conv(2))] {
            let b = block(Grid::new(2, 2), 3, 4, 2, sampling, normalized, 7);
            let x = gaussian_tokens(4, 3, 1.0, 8);
            let (z, _) = b.forward_with_tape(&x).unwrap();
            assert!(max_abs_diff(&z, &reference_forward(&b, &x)) < 1e-10);
        }
    }

    #[test]
    fn attention_path_agrees_with_library_soft_attention() {
        let grid = Grid::new(4, 4);
        let b = block(grid, 8, 8, 2, Sampling::pool(2), true, 9);
        let x = gaussian_tokens(16, 8, 1.0, 10);
        let (_, tape) = b.forward_with_tape(&x).unwrap();
        let q = TokenMatrix::new(tape.q.clone()).unwrap();
        let v = TokenMatrix::new(&tape.u * &b.w_v.value).unwrap();
        let (o, _) = soft_attention(&q, &v, &b.cfg.attn, grid, None).unwrap();
        assert!(max_abs_diff(&o, &tape.o) < 1e-12);
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut b = block(Grid::new(2, 2), 4, 4, 1, Sampling::pool(1), false, 1);
        assert!(matches!(b.backward(&DMatrix::zeros(4, 4)), Err(Error::MissingTape)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut b = block(Grid::new(2, 2), 4, 4, 2, Sampling::conv(2), true, 11);
        let x = TokenMatrix::new(gaussian_tokens(4, 4, 1.0, 12)).unwrap();
        b.forward(&x).unwrap();
        let dx = b.backward(&DMatrix::zeros(4, 4)).unwrap();
        assert!(dx.iter().all(|v| *v == 0.0));
        for (name, p) in b.params_mut() {
            assert!(p.adjoint.iter().all(|v| *v == 0.0), "{name}");
        }
    }

    fn sum_loss(b: &SoftBlock, x: &DMatrix<f64>) -> f64 {
        b.forward_with_tape(x).unwrap().0.sum()
    }

    /// Central differences of `sum(output)` for one parameter element.
    fn fd_param(b: &mut SoftBlock, x: &DMatrix<f64>, name: &str, i: usize, j: usize, h: f64) -> f64 {
        let orig = {
            let mut ps = b.params_mut();
            let p = ps.iter_mut().find(|(n, _)| n == name).unwrap();
            let v = p.1.value[(i, j)];
            p.1.value[(i, j)] = v + h;
            v
        };
        let plus = sum_loss(b, x);
        b.params_mut().into_iter().find(|(n, _)| n == name).unwrap().1.value[(i, j)] = orig - h;
        let minus = sum_loss(b, x);
        b.params_mut().into_iter().find(|(n, _)| n == name).unwrap().1.value[(i, j)] = orig;
        (plus - minus) / (2.0 * h)
    }

    fn analytic(b: &mut SoftBlock, x: &DMatrix<f64>) -> Vec<(String, DMatrix<f64>)> {
        let (z, tape) = b.forward_with_tape(x).unwrap();
        b.backward_with_tape(&tape, &DMatrix::from_element(z.nrows(), z.ncols(), 1.0)).unwrap();
        b.params_mut().into_iter().map(|(n, p)| (n, p.adjoint.clone())).collect()
    }

    #[test]
    fn ffn_gradients_match_finite_differences() {
        let mut b = block(Grid::new(2, 2), 4, 4, 2, Sampling::pool(2), true, 13);
        let x = gaussian_tokens(4, 4, 1.0, 14);
        let grads = analytic(&mut b, &x);
        for name in ["ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"] {
            let g = &grads.iter().find(|(n, _)| n == name).unwrap().1;
            for i in 0..g.nrows() {
                for j in 0..g.ncols() {
                    let fd = fd_param(&mut b, &x, name, i, j, 1e-5);
                    let a = g[(i, j)];
                    if a.abs().max(fd.abs()) > 1e-8 {
                        assert!((a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()), "{name}[{i},{j}]: {a} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn shared_projection_gradient_sums_both_paths() {
        let grid = Grid::new(2, 2);
        let mut b = block(grid, 4, 4, 1, Sampling::pool(1), false, 15);
        let x = gaussian_tokens(4, 4, 1.0, 16);
        let grads = analytic(&mut b, &x);
        let g = grads.iter().find(|(n, _)| n == "w_qk").unwrap().1.clone();
        for i in 0..4 {
            for j in 0..4 {
                let fd = fd_param(&mut b, &x, "w_qk", i, j, 1e-5);
                assert!((g[(i, j)] - fd).abs() <= 1e-3 * fd.abs().max(1e-6), "[{i},{j}] {} vs {fd}", g[(i, j)]);
            }
        }
    }

    #[test]
    fn exact_mode_gradients_match_finite_differences() {
        let grid = Grid::new(2, 2);
        let mut b = block(grid, 4, 4, 2, Sampling::pool(1), false, 17);
        b.cfg.mode = AttentionMode::Exact;
        let x = gaussian_tokens(4, 4, 1.0, 18);
        let grads = analytic(&mut b, &x);
        let g = grads.iter().find(|(n, _)| n == "w_qk").unwrap().1.clone();
        for i in 0..4 {
            for j in 0..4 {
                let fd = fd_param(&mut b, &x, "w_qk", i, j, 1e-5);
                assert!((g[(i, j)] - fd).abs() <= 1e-3 * fd.abs().max(1e-6));
            }
        }
    }
}
