//! Hierarchical single-step predictor:
//! residual conv → LSTM → multi-head attention → time-mean pooling → head.
//! Each encoder stage can be switched off, in which case it is the identity.

pub mod attention;
pub mod conv;
pub mod lstm;

use serde::{Deserialize, Serialize};

use crate::dense::{BlockKind, FeedForward, FeedForwardCache};
use crate::error::{ensure_finite, Error, Result};
use crate::kan::SplineGrid;
use crate::linalg::Mat;
use crate::params::{prefixed, Parameterized, SeededRng, TensorView};

pub use attention::MultiHeadAttention;
pub use conv::ResidualConv;
pub use lstm::Lstm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HlaConfig {
    pub feature_dim: usize,
    pub channels: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub head_units: usize,
    pub head_kind: BlockKind,
    pub micro: bool,
    pub medium: bool,
    pub macro_attention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hla {
    pub micro: Option<ResidualConv>,
    pub medium: Option<Lstm>,
    pub attention: Option<MultiHeadAttention>,
    pub head: FeedForward,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    micro: Option<conv::ResidualConvCache>,
    medium: Option<lstm::LstmCache>,
    attention: Option<attention::AttentionCache>,
    steps: usize,
}

impl Hla {
    pub fn init(cfg: &HlaConfig, grid: &SplineGrid, rng: &mut SeededRng) -> Result<Self> {
        if cfg.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                cfg.kernel
            )));
        }
        let mut width = cfg.feature_dim;
        let micro = cfg
            .micro
            .then(|| ResidualConv::init(cfg.kernel, width, cfg.channels, rng));
        if micro.is_some() {
            width = cfg.channels;
        }
        let medium = cfg.medium.then(|| Lstm::init(width, cfg.hidden, rng));
        if medium.is_some() {
            width = cfg.hidden;
        }
        let attention = if cfg.macro_attention {
            Some(MultiHeadAttention::init(
                width,
                cfg.heads,
                cfg.dropout,
                rng,
            )?)
        } else {
            None
        };
        let head = FeedForward::init(cfg.head_kind, &[width, cfg.head_units, 1], grid, rng);
        Ok(Hla {
            micro,
            medium,
            attention,
            head,
        })
    }

    /// Runs the encoder stages and pools over time.
    pub fn encode(&self, x: &Mat, dropout_rng: Option<&mut SeededRng>) -> (Vec<f64>, EncoderCache) {
        let mut h = x.clone();
        let mut cache = EncoderCache {
            micro: None,
            medium: None,
            attention: None,
            steps: x.rows(),
        };
        if let Some(m) = &self.micro {
            let (y, c) = m.forward(&h);
            cache.micro = Some(c);
            h = y;
        }
        if let Some(m) = &self.medium {
            let (y, c) = m.forward(&h);
            cache.medium = Some(c);
            h = y;
        }
        if let Some(a) = &self.attention {
            let (y, c) = a.forward(&h, dropout_rng);
            cache.attention = Some(c);
            h = y;
        }
        (h.mean_rows(), cache)
    }

    /// Backward through pooling and the encoder; accumulates into `grads`.
    pub fn encode_backward(&self, cache: &EncoderCache, dpooled: &[f64], grads: &mut Hla) {
        let n = cache.steps;
        let mut g = Mat::zeros(n, dpooled.len());
        for t in 0..n {
            for (v, d) in g.row_mut(t).iter_mut().zip(dpooled) {
                *v = d / n as f64;
            }
        }
        if let (Some(a), Some(c), Some(ga)) =
            (&self.attention, &cache.attention, grads.attention.as_mut())
        {
            g = a.backward(c, &g, ga);
        }
        if let (Some(m), Some(c), Some(gm)) = (&self.medium, &cache.medium, grads.medium.as_mut()) {
            g = m.backward(c, &g, gm);
        }
        if let (Some(m), Some(c), Some(gm)) = (&self.micro, &cache.micro, grads.micro.as_mut()) {
            m.backward(c, &g, gm);
        }
    }

    pub fn head_forward(&self, pooled: &Mat) -> (Mat, FeedForwardCache) {
        self.head.forward_batch(pooled)
    }

    /// Inference: deterministic, with finiteness checked at each stage.
    pub fn predict(&self, x: &Mat) -> Result<f64> {
        let mut h = x.clone();
        if let Some(m) = &self.micro {
            h = m.forward(&h).0;
            ensure_finite(h.as_slice(), "micro conv block")?;
        }
        if let Some(m) = &self.medium {
            h = m.forward(&h).0;
            ensure_finite(h.as_slice(), "lstm block")?;
        }
        if let Some(a) = &self.attention {
            h = a.forward(&h, None).0;
            ensure_finite(h.as_slice(), "attention block")?;
        }
        let pooled = Mat::from_vec(1, h.cols(), h.mean_rows());
        let y = self.head.forward_batch(&pooled).0.get(0, 0);
        ensure_finite(&[y], "transcendental head")?;
        Ok(y)
    }

    pub fn pooled_dim(&self) -> usize {
        match &self.head {
            FeedForward::Kan(s) => s.in_dim(),
            FeedForward::Mlp(m) => m.layers[0].in_dim(),
        }
    }

    /// Mean squared error over a batch of `(features, target)` pairs and its
    /// gradient, with an optional L2 penalty on convolution kernels.
    pub fn batch_loss_grad(
        &self,
        batch: &[(&Mat, f64)],
        conv_l2: f64,
        mut dropout_rng: Option<&mut SeededRng>,
        grads: &mut Hla,
    ) -> f64 {
        let b = batch.len();
        let d = self.pooled_dim();
        let mut pooled = Mat::zeros(b, d);
        let mut caches = Vec::with_capacity(b);
        for (i, (x, _)) in batch.iter().enumerate() {
            let (p, c) = self.encode(x, dropout_rng.as_deref_mut());
            pooled.row_mut(i).copy_from_slice(&p);
            caches.push(c);
        }
        let (y, hc) = self.head.forward_batch(&pooled);
        let mut gy = Mat::zeros(b, 1);
        let mut loss = 0.0;
        for (i, (_, t)) in batch.iter().enumerate() {
            let e = y.get(i, 0) - t;
            loss += e * e / b as f64;
            gy.set(i, 0, 2.0 * e / b as f64);
        }
        let dpooled = self.head.backward_batch(&hc, &gy, &mut grads.head);
        for (i, c) in caches.iter().enumerate() {
            self.encode_backward(c, dpooled.row(i), grads);
        }
        if let (Some(m), Some(gm)) = (&self.micro, grads.micro.as_mut()) {
            loss += conv_l2 * m.kernel_sq_norm();
            m.add_kernel_l2_grad(gm, conv_l2);
        }
        loss
    }
}

impl Parameterized for Hla {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut v = Vec::new();
        if let Some(m) = &self.micro {
            v.extend(prefixed("micro", m.tensors()));
        }
        if let Some(m) = &self.medium {
            v.extend(prefixed("medium", m.tensors()));
        }
        if let Some(a) = &self.attention {
            v.extend(prefixed("attention", a.tensors()));
        }
        v.extend(prefixed("head", self.head.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        if let Some(m) = &mut self.micro {
            v.extend(m.tensors_mut());
        }
        if let Some(m) = &mut self.medium {
            v.extend(m.tensors_mut());
        }
        if let Some(a) = &mut self.attention {
            v.extend(a.tensors_mut());
        }
        v.extend(self.head.tensors_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sigmoid, silu};
    use crate::params::{grad_check_model, seeded_rng, zeros_like};
    use rand::Rng;

    fn grid() -> SplineGrid {
        SplineGrid::clamped_uniform(3, 8, -3.0, 3.0).unwrap()
    }

    fn cfg() -> HlaConfig {
        HlaConfig {
            feature_dim: 3,
            channels: 4,
            kernel: 3,
            hidden: 4,
            heads: 2,
            dropout: 0.1,
            head_units: 3,
            head_kind: BlockKind::Kan,
            micro: true,
            medium: true,
            macro_attention: true,
        }
    }

    fn rand_x(rng: &mut SeededRng, n: usize, c: usize) -> Mat {
        Mat::from_vec(
            n,
            c,
            (0..n * c).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
    }

    #[test]
    fn constant_head_ignores_input() {
        let mut rng = seeded_rng(1);
        let mut m = Hla::init(&cfg(), &grid(), &mut rng).unwrap();
        let last = m.head.last_kan_mut().unwrap();
        last.alpha[0] = 0.0;
        last.bias[0] = 1.25;
        for _ in 0..3 {
            assert_eq!(m.predict(&rand_x(&mut rng, 6, 3)).unwrap(), 1.25);
        }
    }

    #[test]
    fn pooling_of_constant_rows() {
        let mut rng = seeded_rng(2);
        let mut c = cfg();
        c.micro = false;
        c.medium = false;
        c.macro_attention = false;
        let m = Hla::init(&c, &grid(), &mut rng).unwrap();
        let row = [0.3, -0.2, 0.9];
        let x = Mat::from_rows(&vec![row.to_vec(); 5]);
        let (p, _) = m.encode(&x, None);
        for (a, b) in p.iter().zip(row) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_pooling_is_permutation_invariant_without_lstm() {
        let mut rng = seeded_rng(3);
        let mut c = cfg();
        c.micro = false;
        c.medium = false;
        c.heads = 3;
        let m = Hla::init(&c, &grid(), &mut rng).unwrap();
        let x = rand_x(&mut rng, 6, 3);
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = Mat::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
        let (a, _) = m.encode(&x, None);
        let (b, _) = m.encode(&xp, None);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    /// Straight-line transcription of the whole predictor with scalar loops.
    fn monolithic(m: &Hla, x: &Mat) -> f64 {
        let n = x.rows();
        let conv = |c: &conv::Conv1d, inp: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let half = (c.taps / 2) as isize;
            (0..n as isize)
                .map(|t| {
                    (0..c.out_ch)
                        .map(|o| {
                            let mut s = c.bias[o];
                            for j in 0..c.taps as isize {
                                let src = t + j - half;
                                if src >= 0 && src < n as isize {
                                    for i in 0..c.in_ch {
                                        s += inp[src as usize][i]
                                            * c.weight[(j as usize * c.in_ch + i) * c.out_ch + o];
                                    }
                                }
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        };
        let xv: Vec<Vec<f64>> = (0..n).map(|t| x.row(t).to_vec()).collect();
        let mi = m.micro.as_ref().unwrap();
        let h1 = conv(&mi.first, &xv);
        let h2 = conv(&mi.second, &h1);
        let hs = conv(&mi.skip, &xv);
        let hm: Vec<Vec<f64>> = h2
            .iter()
            .zip(&hs)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
            .collect();

        let l = m.medium.as_ref().unwrap();
        let d = l.hidden;
        let (mut h, mut c) = (vec![0.0; d], vec![0.0; d]);
        let mut lo = Vec::new();
        for t in 0..n {
            let pre = |col: usize, h: &[f64]| {
                let mut s = l.bias[col];
                for i in 0..l.input_dim {
                    s += hm[t][i] * l.w_input[i * 4 * d + col];
                }
                for i in 0..d {
                    s += h[i] * l.w_hidden[i * 4 * d + col];
                }
                s
            };
            let mut nh = vec![0.0; d];
            for k in 0..d {
                let ig = sigmoid(pre(k, &h));
                let fg = sigmoid(pre(d + k, &h));
                let gg = pre(2 * d + k, &h).tanh();
                let og = sigmoid(pre(3 * d + k, &h));
                c[k] = fg * c[k] + ig * gg;
                nh[k] = og * c[k].tanh();
            }
            h = nh;
            lo.push(h.clone());
        }

        let a = m.attention.as_ref().unwrap();
        let aff = |p: &crate::dense::Affine, v: &[f64]| -> Vec<f64> {
            (0..p.out_dim())
                .map(|o| {
                    p.bias[o]
                        + (0..p.in_dim())
                            .map(|i| v[i] * p.weight[i * p.out_dim() + o])
                            .sum::<f64>()
                })
                .collect()
        };
        let q: Vec<Vec<f64>> = lo.iter().map(|r| aff(&a.query, r)).collect();
        let k: Vec<Vec<f64>> = lo.iter().map(|r| aff(&a.key, r)).collect();
        let v: Vec<Vec<f64>> = lo.iter().map(|r| aff(&a.value, r)).collect();
        let dh = d / a.heads;
        let mut z = vec![vec![0.0; d]; n];
        for hh in 0..a.heads {
            for i in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh)
                            .map(|c| q[i][hh * dh + c] * k[j][hh * dh + c])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|u| (u - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                for c in 0..dh {
                    z[i][hh * dh + c] = (0..n).map(|j| e[j] / tot * v[j][hh * dh + c]).sum();
                }
            }
        }
        let o: Vec<Vec<f64>> = z.iter().map(|r| aff(&a.output, r)).collect();
        let pooled: Vec<f64> = (0..d)
            .map(|c| o.iter().map(|r| r[c]).sum::<f64>() / n as f64)
            .collect();

        let crate::dense::FeedForward::Kan(stack) = &m.head else {
            unreachable!()
        };
        let mut u = pooled;
        for layer in &stack.layers {
            let kk = layer.grid().basis_count();
            u = (0..layer.out_dim())
                .map(|j| {
                    let s: f64 = (0..layer.in_dim())
                        .map(|mm| {
                            let b = layer.grid().eval(u[mm]);
                            let w = &layer.omega[(mm * layer.out_dim() + j) * kk..][..kk];
                            silu(u[mm]) + b.iter().zip(w).map(|(x, y)| x * y).sum::<f64>()
                        })
                        .sum();
                    layer.alpha[j] * s + layer.bias[j]
                })
                .collect();
        }
        u[0]
    }

    #[test]
    fn matches_monolithic_transcription() {
        let mut rng = seeded_rng(42);
        let m = Hla::init(&cfg(), &grid(), &mut rng).unwrap();
        let x = rand_x(&mut rng, 7, 3);
        let got = m.predict(&x).unwrap();
        let want = monolithic(&m, &x);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn end_to_end_gradient_passes_check() {
        let mut rng = seeded_rng(7);
        for kind in [BlockKind::Kan, BlockKind::Mlp] {
            let mut c = cfg();
            c.head_kind = kind;
            let m = Hla::init(&c, &grid(), &mut rng).unwrap();
            let xs = [rand_x(&mut rng, 5, 3), rand_x(&mut rng, 5, 3)];
            let batch: Vec<(&Mat, f64)> = vec![(&xs[0], 0.4), (&xs[1], -0.7)];
            let rep = grad_check_model(&m, 1e-5, None, |p: &Hla| {
                let mut g = zeros_like(p);
                let mut drng = seeded_rng(5);
                let l = p.batch_loss_grad(&batch, 1e-2, Some(&mut drng), &mut g);
                (l, g)
            })
            .unwrap();
            assert!(rep.max_rel_error <= 1e-4, "{kind:?} {rep:?}");
        }
    }

    #[test]
    fn deterministic_predictions() {
        let mut r1 = seeded_rng(9);
        let mut r2 = seeded_rng(9);
        let a = Hla::init(&cfg(), &grid(), &mut r1).unwrap();
        let b = Hla::init(&cfg(), &grid(), &mut r2).unwrap();
        let x = rand_x(&mut seeded_rng(1), 5, 3);
        assert_eq!(
            a.predict(&x).unwrap().to_bits(),
            b.predict(&x).unwrap().to_bits()
        );
    }
}
