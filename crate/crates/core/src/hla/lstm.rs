//! Single-layer LSTM over the rows of a sequence, zero initial state.
//! Gate blocks are packed `[i | f | g | o]`.

use serde::{Deserialize, Serialize};

use crate::linalg::{gemm_acc, gemm_nt_acc, gemm_tn_acc, sigmoid, Mat};
use crate::params::{xavier_uniform, Parameterized, SeededRng, TensorView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub input_dim: usize,
    pub hidden: usize,
    /// `[input][4·hidden]`
    pub w_input: Vec<f64>,
    /// `[hidden][4·hidden]`
    pub w_hidden: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    input: Mat,
    /// Post-activation gates per step, `[N × 4d]`.
    gates: Mat,
    cells: Mat,
    cell_tanh: Mat,
    hiddens: Mat,
}

impl Lstm {
    pub fn zeroed(input_dim: usize, hidden: usize) -> Self {
        Lstm {
            input_dim,
            hidden,
            w_input: vec![0.0; input_dim * 4 * hidden],
            w_hidden: vec![0.0; hidden * 4 * hidden],
            bias: vec![0.0; 4 * hidden],
        }
    }

    /// Xavier weights, forget-gate bias 1.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let mut l = Lstm::zeroed(input_dim, hidden);
        xavier_uniform(rng, &mut l.w_input, input_dim, hidden, 1.0);
        xavier_uniform(rng, &mut l.w_hidden, hidden, hidden, 1.0);
        l.bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        l
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LstmCache) {
        assert_eq!(x.cols(), self.input_dim, "lstm input width");
        let (n, d) = (x.rows(), self.hidden);
        let g4 = 4 * d;
        let mut gates = Mat::zeros(n, g4);
        for t in 0..n {
            gates.row_mut(t).copy_from_slice(&self.bias);
        }
        gemm_acc(
            x.as_slice(),
            n,
            self.input_dim,
            &self.w_input,
            g4,
            gates.as_mut_slice(),
        );
        let mut cells = Mat::zeros(n, d);
        let mut cell_tanh = Mat::zeros(n, d);
        let mut hiddens = Mat::zeros(n, d);
        let mut h_prev = vec![0.0; d];
        let mut c_prev = vec![0.0; d];
        for t in 0..n {
            let z = gates.row_mut(t);
            gemm_acc(&h_prev, 1, d, &self.w_hidden, g4, z);
            for k in 0..d {
                z[k] = sigmoid(z[k]);
                z[d + k] = sigmoid(z[d + k]);
                z[2 * d + k] = z[2 * d + k].tanh();
                z[3 * d + k] = sigmoid(z[3 * d + k]);
            }
            let z = gates.row(t).to_vec();
            for k in 0..d {
                let c = z[d + k] * c_prev[k] + z[k] * z[2 * d + k];
                let tc = c.tanh();
                cells.set(t, k, c);
                cell_tanh.set(t, k, tc);
                hiddens.set(t, k, z[3 * d + k] * tc);
            }
            h_prev.copy_from_slice(hiddens.row(t));
            c_prev.copy_from_slice(cells.row(t));
        }
        let out = hiddens.clone();
        (
            out,
            LstmCache {
                input: x.clone(),
                gates,
                cells,
                cell_tanh,
                hiddens,
            },
        )
    }

    pub fn backward(&self, cache: &LstmCache, gy: &Mat, grads: &mut Lstm) -> Mat {
        let (n, d) = (gy.rows(), self.hidden);
        let g4 = 4 * d;
        let mut dz = Mat::zeros(n, g4);
        let mut dh_next = vec![0.0; d];
        let mut dc_next = vec![0.0; d];
        for t in (0..n).rev() {
            let z = cache.gates.row(t);
            let tc = cache.cell_tanh.row(t);
            let dzr = dz.row_mut(t);
            for k in 0..d {
                let (i, f, g, o) = (z[k], z[d + k], z[2 * d + k], z[3 * d + k]);
                let dh = gy.get(t, k) + dh_next[k];
                let c_prev = if t > 0 {
                    cache.cells.get(t - 1, k)
                } else {
                    0.0
                };
                let dc = dh * o * (1.0 - tc[k] * tc[k]) + dc_next[k];
                dzr[k] = dc * g * i * (1.0 - i);
                dzr[d + k] = dc * c_prev * f * (1.0 - f);
                dzr[2 * d + k] = dc * i * (1.0 - g * g);
                dzr[3 * d + k] = dh * tc[k] * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            gemm_nt_acc(dz.row(t), 1, g4, &self.w_hidden, d, &mut dh_next);
            if t > 0 {
                gemm_tn_acc(
                    cache.hiddens.row(t - 1),
                    1,
                    d,
                    dz.row(t),
                    g4,
                    &mut grads.w_hidden,
                );
            }
        }
        gemm_tn_acc(
            cache.input.as_slice(),
            n,
            self.input_dim,
            dz.as_slice(),
            g4,
            &mut grads.w_input,
        );
        for t in 0..n {
            for (b, g) in grads.bias.iter_mut().zip(dz.row(t)) {
                *b += g;
            }
        }
        let mut dx = Mat::zeros(n, self.input_dim);
        gemm_nt_acc(
            dz.as_slice(),
            n,
            g4,
            &self.w_input,
            self.input_dim,
            dx.as_mut_slice(),
        );
        dx
    }
}

impl Parameterized for Lstm {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let g4 = 4 * self.hidden;
        vec![
            TensorView::new("w_input", vec![self.input_dim, g4], &self.w_input),
            TensorView::new("w_hidden", vec![self.hidden, g4], &self.w_hidden),
            TensorView::new("bias", vec![g4], &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w_input, &mut self.w_hidden, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{grad_check_model, seeded_rng, zeros_like};
    use rand::Rng;

    #[test]
    fn zero_weights_give_zero_hidden() {
        let l = Lstm::zeroed(2, 3);
        let x = Mat::from_vec(4, 2, vec![1.0, -2.0, 3.0, 0.5, 9.0, 9.0, -1.0, 0.0]);
        assert!(l.forward(&x).0.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn closed_input_gate_keeps_state_at_zero() {
        let mut rng = seeded_rng(3);
        let mut l = Lstm::init(2, 2, &mut rng);
        // input gate pre-activation pinned far negative, forget gate saturated open
        for k in 0..2 {
            l.bias[k] = -1e3;
            l.bias[2 + k] = 1e3;
        }
        for r in 0..2 {
            for k in 0..2 {
                l.w_input[r * 8 + k] = 0.0;
                l.w_hidden[r * 8 + k] = 0.0;
            }
        }
        let x = Mat::from_vec(3, 2, vec![5.0, -5.0, 1.0, 2.0, -3.0, 4.0]);
        assert!(l.forward(&x).0.as_slice().iter().all(|v| v.abs() < 1e-300));
    }

    /// Hand-unrolled gate equations, one scalar at a time.
    fn unrolled(l: &Lstm, x: &Mat) -> Vec<Vec<f64>> {
        let d = l.hidden;
        let mut h = vec![0.0; d];
        let mut c = vec![0.0; d];
        let mut out = Vec::new();
        for t in 0..x.rows() {
            let pre = |gate: usize, k: usize, h: &[f64]| -> f64 {
                let col = gate * d + k;
                let mut s = l.bias[col];
                for m in 0..l.input_dim {
                    s += x.get(t, m) * l.w_input[m * 4 * d + col];
                }
                for m in 0..d {
                    s += h[m] * l.w_hidden[m * 4 * d + col];
                }
                s
            };
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let mut nh = vec![0.0; d];
            for k in 0..d {
                let i = sig(pre(0, k, &h));
                let f = sig(pre(1, k, &h));
                let g = pre(2, k, &h).tanh();
                let o = sig(pre(3, k, &h));
                c[k] = f * c[k] + i * g;
                nh[k] = o * c[k].tanh();
            }
            h = nh;
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn matches_unrolled_oracle() {
        let mut rng = seeded_rng(17);
        let l = Lstm::init(2, 2, &mut rng);
        let x = Mat::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let got = l.forward(&x).0;
        let want = unrolled(&l, &x);
        for t in 0..3 {
            for k in 0..2 {
                assert!((got.get(t, k) - want[t][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_pass_check() {
        let mut rng = seeded_rng(29);
        let l = Lstm::init(3, 4, &mut rng);
        let x = Mat::from_vec(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect());
        let w: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rep = grad_check_model(&l, 1e-5, None, |m: &Lstm| {
            let (y, c) = m.forward(&x);
            let loss: f64 = y.as_slice().iter().zip(&w).map(|(a, b)| a * b).sum();
            let gy = Mat::from_vec(5, 4, w.clone());
            let mut g = zeros_like(m);
            m.backward(&c, &gy, &mut g);
            (loss, g)
        })
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }
}
