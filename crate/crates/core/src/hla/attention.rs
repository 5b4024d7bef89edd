//! Multi-head scaled dot-product self-attention with an output projection.
//! Dropout, when a generator is supplied, masks attention weights only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dense::Affine;
use crate::error::{Error, Result};
use crate::linalg::{softmax_backward_in_place, softmax_in_place, Mat};
use crate::params::{prefixed, Parameterized, SeededRng, TensorView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dropout: f64,
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per head, `[N × N]` softmax weights before dropout.
    probs: Vec<Mat>,
    /// Per head dropout multipliers (`None` in inference).
    masks: Option<Vec<Mat>>,
    concat: Mat,
}

impl MultiHeadAttention {
    pub fn init(dim: usize, heads: usize, dropout: f64, rng: &mut SeededRng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            heads,
            dropout,
            query: Affine::init(dim, dim, rng),
            key: Affine::init(dim, dim, rng),
            value: Affine::init(dim, dim, rng),
            output: Affine::init(dim, dim, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.query.in_dim()
    }

    fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    /// Attention weights per head for inspection.
    pub fn weights(&self, x: &Mat) -> Vec<Mat> {
        self.forward(x, None).1.probs
    }

    pub fn forward(
        &self,
        x: &Mat,
        mut dropout_rng: Option<&mut SeededRng>,
    ) -> (Mat, AttentionCache) {
        let n = x.rows();
        let dh = self.head_dim();
        let scale = (dh as f64).sqrt();
        let q = self.query.forward_batch(x);
        let k = self.key.forward_batch(x);
        let v = self.value.forward_batch(x);
        let mut concat = Mat::zeros(n, self.dim());
        let mut probs = Vec::with_capacity(self.heads);
        let mut masks = dropout_rng.as_ref().map(|_| Vec::with_capacity(self.heads));
        let keep = 1.0 - self.dropout;
        for h in 0..self.heads {
            let off = h * dh;
            let mut p = Mat::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[off..off + dh];
                let row = p.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.row(j)[off..off + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / scale;
                }
                softmax_in_place(row);
            }
            let mut weights = p.clone();
            if let (Some(rng), Some(ms)) = (dropout_rng.as_deref_mut(), masks.as_mut()) {
                let mut m = Mat::zeros(n, n);
                for (mv, w) in m.as_mut_slice().iter_mut().zip(weights.as_mut_slice()) {
                    *mv = if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    };
                    *w *= *mv;
                }
                ms.push(m);
            }
            for i in 0..n {
                for j in 0..n {
                    let a = weights.get(i, j);
                    if a == 0.0 {
                        continue;
                    }
                    let vj = &v.row(j)[off..off + dh];
                    let out = &mut concat.row_mut(i)[off..off + dh];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += a * vv;
                    }
                }
            }
            probs.push(p);
        }
        let out = self.output.forward_batch(&concat);
        (
            out,
            AttentionCache {
                input: x.clone(),
                q,
                k,
                v,
                probs,
                masks,
                concat,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        gy: &Mat,
        grads: &mut MultiHeadAttention,
    ) -> Mat {
        let n = gy.rows();
        let dh = self.head_dim();
        let scale = (dh as f64).sqrt();
        let dconcat = self
            .output
            .backward_batch(&cache.concat, gy, &mut grads.output);
        let mut dq = Mat::zeros(n, self.dim());
        let mut dk = Mat::zeros(n, self.dim());
        let mut dv = Mat::zeros(n, self.dim());
        for h in 0..self.heads {
            let off = h * dh;
            let p = &cache.probs[h];
            let mask = cache.masks.as_ref().map(|m| &m[h]);
            for i in 0..n {
                let dzi = &dconcat.row(i)[off..off + dh];
                // dA[i,j] = dz_i · v_j, then through dropout and softmax
                let mut da: Vec<f64> = (0..n)
                    .map(|j| {
                        let vj = &cache.v.row(j)[off..off + dh];
                        dzi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect();
                for j in 0..n {
                    let w = p.get(i, j) * mask.map_or(1.0, |m| m.get(i, j));
                    if w != 0.0 {
                        let dvj = &mut dv.row_mut(j)[off..off + dh];
                        for (d, z) in dvj.iter_mut().zip(dzi) {
                            *d += w * z;
                        }
                    }
                }
                if let Some(m) = mask {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d *= m.get(i, j);
                    }
                }
                softmax_backward_in_place(p.row(i), &mut da);
                let qi: Vec<f64> = cache.q.row(i)[off..off + dh].to_vec();
                for (j, &ds) in da.iter().enumerate() {
                    if ds == 0.0 {
                        continue;
                    }
                    let s = ds / scale;
                    let kj: Vec<f64> = cache.k.row(j)[off..off + dh].to_vec();
                    let dqi = &mut dq.row_mut(i)[off..off + dh];
                    for (d, kk) in dqi.iter_mut().zip(&kj) {
                        *d += s * kk;
                    }
                    let dkj = &mut dk.row_mut(j)[off..off + dh];
                    for (d, qq) in dkj.iter_mut().zip(&qi) {
                        *d += s * qq;
                    }
                }
            }
        }
        let mut dx = self
            .query
            .backward_batch(&cache.input, &dq, &mut grads.query);
        for (proj, d, g) in [
            (&self.key, &dk, &mut grads.key),
            (&self.value, &dv, &mut grads.value),
        ] {
            let part = proj.backward_batch(&cache.input, d, g);
            for (a, b) in dx.as_mut_slice().iter_mut().zip(part.as_slice()) {
                *a += b;
            }
        }
        dx
    }
}

impl Parameterized for MultiHeadAttention {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut v = prefixed("query", self.query.tensors());
        v.extend(prefixed("key", self.key.tensors()));
        v.extend(prefixed("value", self.value.tensors()));
        v.extend(prefixed("output", self.output.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.query.tensors_mut();
        v.extend(self.key.tensors_mut());
        v.extend(self.value.tensors_mut());
        v.extend(self.output.tensors_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{grad_check_model, seeded_rng, zeros_like};

    fn rand_mat(rng: &mut SeededRng, r: usize, c: usize) -> Mat {
        Mat::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn zero_query_key_gives_uniform_average() {
        let mut rng = seeded_rng(1);
        let mut a = MultiHeadAttention::init(4, 2, 0.1, &mut rng).unwrap();
        a.query = Affine::zeroed(4, 4);
        a.key = Affine::zeroed(4, 4);
        let x = rand_mat(&mut rng, 5, 4);
        let v = a.value.forward_batch(&x);
        let mean = Mat::from_vec(1, 4, v.mean_rows());
        let want = a.output.forward_batch(&mean);
        let got = a.forward(&x, None).0;
        for i in 0..5 {
            for c in 0..4 {
                assert!((got.get(i, c) - want.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_returns_projected_value() {
        let mut rng = seeded_rng(2);
        let a = MultiHeadAttention::init(4, 4, 0.1, &mut rng).unwrap();
        let x = rand_mat(&mut rng, 1, 4);
        let want = a.output.forward_batch(&a.value.forward_batch(&x));
        assert_eq!(a.forward(&x, None).0, want);
    }

    #[test]
    fn matches_per_head_loop() {
        let mut rng = seeded_rng(3);
        let a = MultiHeadAttention::init(4, 2, 0.0, &mut rng).unwrap();
        let x = rand_mat(&mut rng, 3, 4);
        let q = a.query.forward_batch(&x);
        let k = a.key.forward_batch(&x);
        let v = a.value.forward_batch(&x);
        let mut concat = Mat::zeros(3, 4);
        for h in 0..2 {
            for i in 0..3 {
                let mut s: Vec<f64> = (0..3)
                    .map(|j| {
                        (0..2)
                            .map(|c| q.get(i, 2 * h + c) * k.get(j, 2 * h + c))
                            .sum::<f64>()
                            / 2f64.sqrt()
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                s.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
                for c in 0..2 {
                    concat.set(
                        i,
                        2 * h + c,
                        (0..3).map(|j| s[j] * v.get(j, 2 * h + c)).sum(),
                    );
                }
            }
        }
        let want = a.output.forward_batch(&concat);
        let got = a.forward(&x, None).0;
        for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_are_distributions() {
        let mut rng = seeded_rng(4);
        let a = MultiHeadAttention::init(8, 4, 0.1, &mut rng).unwrap();
        let x = rand_mat(&mut rng, 7, 8);
        for p in a.weights(&x) {
            for i in 0..7 {
                let r = p.row(i);
                assert!(r.iter().all(|v| *v >= 0.0));
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = seeded_rng(5);
        assert!(MultiHeadAttention::init(6, 4, 0.1, &mut rng).is_err());
    }

    #[test]
    fn gradients_pass_check_with_and_without_dropout() {
        let mut rng = seeded_rng(6);
        let a = MultiHeadAttention::init(4, 2, 0.3, &mut rng).unwrap();
        let x = rand_mat(&mut rng, 4, 4);
        for use_dropout in [false, true] {
            let rep = grad_check_model(&a, 1e-5, None, |m: &MultiHeadAttention| {
                let mut drng = seeded_rng(99);
                let (y, c) = m.forward(&x, use_dropout.then_some(&mut drng));
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
}
