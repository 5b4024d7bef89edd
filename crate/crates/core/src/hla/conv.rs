//! Residual 1-D convolution block: a 1×1 skip path plus two stacked
//! same-padded convolutions with no activation in between.

use serde::{Deserialize, Serialize};

use crate::linalg::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Mat};
use crate::params::{xavier_uniform, Parameterized, SeededRng, TensorView};

/// Kernel stored `[tap][in][out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub taps: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    pub fn zeroed(taps: usize, in_ch: usize, out_ch: usize) -> Self {
        assert!(taps % 2 == 1, "kernel size must be odd");
        Conv1d {
            taps,
            in_ch,
            out_ch,
            weight: vec![0.0; taps * in_ch * out_ch],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn init(taps: usize, in_ch: usize, out_ch: usize, rng: &mut SeededRng) -> Self {
        let mut c = Conv1d::zeroed(taps, in_ch, out_ch);
        xavier_uniform(rng, &mut c.weight, taps * in_ch, taps * out_ch, 1.0);
        c
    }

    fn tap(&self, j: usize) -> &[f64] {
        let sz = self.in_ch * self.out_ch;
        &self.weight[j * sz..(j + 1) * sz]
    }

    /// For tap `j`, the output rows `t` that read input row `t + j - half`.
    fn ranges(&self, n: usize, j: usize) -> Option<(usize, usize, usize)> {
        let half = self.taps / 2;
        let (out_lo, in_lo) = if j < half {
            (half - j, 0)
        } else {
            (0, j - half)
        };
        let len = n.checked_sub(out_lo.max(in_lo))?;
        if len == 0 {
            None
        } else {
            Some((out_lo, in_lo, len))
        }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        assert_eq!(x.cols(), self.in_ch, "conv input channels");
        let n = x.rows();
        let mut y = Mat::zeros(n, self.out_ch);
        for t in 0..n {
            y.row_mut(t).copy_from_slice(&self.bias);
        }
        for j in 0..self.taps {
            if let Some((out_lo, in_lo, len)) = self.ranges(n, j) {
                let xs = &x.as_slice()[in_lo * self.in_ch..(in_lo + len) * self.in_ch];
                let ys = &mut y.as_mut_slice()[out_lo * self.out_ch..(out_lo + len) * self.out_ch];
                gemm_acc(xs, len, self.in_ch, self.tap(j), self.out_ch, ys);
            }
        }
        y
    }

    pub fn backward(&self, x: &Mat, gy: &Mat, grads: &mut Conv1d) -> Mat {
        let n = x.rows();
        let mut dx = Mat::zeros(n, self.in_ch);
        for t in 0..n {
            for (b, g) in grads.bias.iter_mut().zip(gy.row(t)) {
                *b += g;
            }
        }
        let sz = self.in_ch * self.out_ch;
        for j in 0..self.taps {
            if let Some((out_lo, in_lo, len)) = self.ranges(n, j) {
                let xs = &x.as_slice()[in_lo * self.in_ch..(in_lo + len) * self.in_ch];
                let gs = &gy.as_slice()[out_lo * self.out_ch..(out_lo + len) * self.out_ch];
                gemm_tn_acc(
                    xs,
                    len,
                    self.in_ch,
                    gs,
                    self.out_ch,
                    &mut grads.weight[j * sz..(j + 1) * sz],
                );
                let dxs = &mut dx.as_mut_slice()[in_lo * self.in_ch..(in_lo + len) * self.in_ch];
                gemm_nt_acc(gs, len, self.out_ch, self.tap(j), self.in_ch, dxs);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualConv {
    pub first: Conv1d,
    pub second: Conv1d,
    pub skip: Conv1d,
}

#[derive(Debug, Clone)]
pub struct ResidualConvCache {
    input: Mat,
    hidden: Mat,
}

impl ResidualConv {
    pub fn init(taps: usize, in_ch: usize, channels: usize, rng: &mut SeededRng) -> Self {
        ResidualConv {
            first: Conv1d::init(taps, in_ch, channels, rng),
            second: Conv1d::init(taps, channels, channels, rng),
            skip: Conv1d::init(1, in_ch, channels, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.skip.out_ch
    }

    pub fn forward(&self, x: &Mat) -> (Mat, ResidualConvCache) {
        let hidden = self.first.forward(x);
        let mut y = self.second.forward(&hidden);
        let s = self.skip.forward(x);
        for (a, b) in y.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *a += b;
        }
        (
            y,
            ResidualConvCache {
                input: x.clone(),
                hidden,
            },
        )
    }

    pub fn backward(&self, cache: &ResidualConvCache, gy: &Mat, grads: &mut ResidualConv) -> Mat {
        let gh = self.second.backward(&cache.hidden, gy, &mut grads.second);
        let mut dx = self.first.backward(&cache.input, &gh, &mut grads.first);
        let ds = self.skip.backward(&cache.input, gy, &mut grads.skip);
        for (a, b) in dx.as_mut_slice().iter_mut().zip(ds.as_slice()) {
            *a += b;
        }
        dx
    }

    /// Sum of squared kernel entries (biases excluded), for the L2 penalty.
    pub fn kernel_sq_norm(&self) -> f64 {
        [&self.first, &self.second, &self.skip]
            .iter()
            .map(|c| c.weight.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    /// Adds `coef · ∂/∂W Σ W²` to the kernel gradients.
    pub fn add_kernel_l2_grad(&self, grads: &mut ResidualConv, coef: f64) {
        for (c, g) in [&self.first, &self.second, &self.skip].into_iter().zip([
            &mut grads.first,
            &mut grads.second,
            &mut grads.skip,
        ]) {
            for (gw, w) in g.weight.iter_mut().zip(&c.weight) {
                *gw += 2.0 * coef * w;
            }
        }
    }
}

impl Parameterized for ResidualConv {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut v = Vec::new();
        for (name, c) in [
            ("conv1", &self.first),
            ("conv2", &self.second),
            ("skip", &self.skip),
        ] {
            v.push(TensorView::new(
                format!("{name}.weight"),
                vec![c.taps, c.in_ch, c.out_ch],
                &c.weight,
            ));
            v.push(TensorView::new(
                format!("{name}.bias"),
                vec![c.out_ch],
                &c.bias,
            ));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for c in [&mut self.first, &mut self.second, &mut self.skip] {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{grad_check_model, seeded_rng, zeros_like};
    use rand::Rng;

    /// Nested-loop same-padded convolution.
    fn naive_conv(c: &Conv1d, x: &Mat) -> Mat {
        let n = x.rows() as isize;
        let half = (c.taps / 2) as isize;
        let mut y = Mat::zeros(x.rows(), c.out_ch);
        for t in 0..n {
            for o in 0..c.out_ch {
                let mut s = c.bias[o];
                for j in 0..c.taps as isize {
                    let src = t + j - half;
                    if src < 0 || src >= n {
                        continue;
                    }
                    for i in 0..c.in_ch {
                        s += x.get(src as usize, i)
                            * c.weight[(j as usize * c.in_ch + i) * c.out_ch + o];
                    }
                }
                y.set(t as usize, o, s);
            }
        }
        y
    }

    fn random_x(rng: &mut SeededRng, n: usize, c: usize) -> Mat {
        Mat::from_vec(
            n,
            c,
            (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn identity_skip_passes_input() {
        let mut r = ResidualConv {
            first: Conv1d::zeroed(3, 2, 2),
            second: Conv1d::zeroed(3, 2, 2),
            skip: Conv1d::zeroed(1, 2, 2),
        };
        r.skip.weight = vec![1.0, 0.0, 0.0, 1.0];
        let x = Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(r.forward(&x).0, x);
        r.skip.weight = vec![0.0; 4];
        assert_eq!(r.forward(&x).0, Mat::zeros(3, 2));
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = seeded_rng(2);
        let r = ResidualConv::init(3, 2, 3, &mut rng);
        let x = random_x(&mut rng, 5, 2);
        let h = naive_conv(&r.first, &x);
        let mut want = naive_conv(&r.second, &h);
        let s = naive_conv(&r.skip, &x);
        for (a, b) in want.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *a += b;
        }
        let got = r.forward(&x).0;
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_kernel_on_short_input() {
        let mut rng = seeded_rng(8);
        let c = Conv1d::init(5, 2, 2, &mut rng);
        let x = random_x(&mut rng, 2, 2);
        let got = c.forward(&x);
        let want = naive_conv(&c, &x);
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_pass_check() {
        let mut rng = seeded_rng(21);
        let r = ResidualConv::init(3, 2, 3, &mut rng);
        let x = random_x(&mut rng, 6, 2);
        let rep = grad_check_model(&r, 1e-5, None, |m: &ResidualConv| {
            let (y, c) = m.forward(&x);
            let gy = Mat::from_vec(
                y.rows(),
                y.cols(),
                y.as_slice().iter().map(|v| 2.0 * v).collect(),
            );
            let mut g = zeros_like(m);
            m.backward(&c, &gy, &mut g);
            (y.frobenius_sq(), g)
        })
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }
}
