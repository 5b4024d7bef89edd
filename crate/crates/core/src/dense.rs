//! Affine layers, small MLPs, and a KAN/MLP switch used wherever the
//! ablation rows swap one block kind for the other.

use serde::{Deserialize, Serialize};

use crate::kan::{KanCache, KanStack, SplineGrid};
use crate::linalg::{gemm_acc, gemm_nt_acc, gemm_tn_acc, silu, silu_grad, Mat};
use crate::params::{prefixed, xavier_uniform, Parameterized, SeededRng, TensorView};

/// `y = x·W + b` with `W` stored `[in][out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    in_dim: usize,
    out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Affine {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn init(in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let mut a = Affine::zeroed(in_dim, out_dim);
        xavier_uniform(rng, &mut a.weight, in_dim, out_dim, 1.0);
        a
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward_batch(&self, x: &Mat) -> Mat {
        assert_eq!(x.cols(), self.in_dim, "affine input width");
        let mut y = Mat::zeros(x.rows(), self.out_dim);
        for r in 0..x.rows() {
            y.row_mut(r).copy_from_slice(&self.bias);
        }
        gemm_acc(
            x.as_slice(),
            x.rows(),
            self.in_dim,
            &self.weight,
            self.out_dim,
            y.as_mut_slice(),
        );
        y
    }

    /// Accumulates into `grads`; returns dL/dx.
    pub fn backward_batch(&self, x: &Mat, gy: &Mat, grads: &mut Affine) -> Mat {
        let n = x.rows();
        gemm_tn_acc(
            x.as_slice(),
            n,
            self.in_dim,
            gy.as_slice(),
            self.out_dim,
            &mut grads.weight,
        );
        for r in 0..n {
            for (gb, g) in grads.bias.iter_mut().zip(gy.row(r)) {
                *gb += g;
            }
        }
        let mut dx = Mat::zeros(n, self.in_dim);
        gemm_nt_acc(
            gy.as_slice(),
            n,
            self.out_dim,
            &self.weight,
            self.in_dim,
            dx.as_mut_slice(),
        );
        dx
    }
}

impl Parameterized for Affine {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            TensorView::new("weight", vec![self.in_dim, self.out_dim], &self.weight),
            TensorView::new("bias", vec![self.out_dim], &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Affine layers with SiLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Affine>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
}

impl Mlp {
    pub fn init(dims: &[usize], rng: &mut SeededRng) -> Self {
        Mlp {
            layers: dims
                .windows(2)
                .map(|w| Affine::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn forward_batch(&self, x: &Mat) -> (Mat, MlpCache) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward_batch(&h);
            cache.inputs.push(h);
            h = if i < last {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = silu(*v));
                a
            } else {
                z.clone()
            };
            cache.pre.push(z);
        }
        (h, cache)
    }

    pub fn backward_batch(&self, cache: &MlpCache, gy: &Mat, grads: &mut Mlp) -> Mat {
        let mut g = gy.clone();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                for (gv, z) in g.as_mut_slice().iter_mut().zip(cache.pre[i].as_slice()) {
                    *gv *= silu_grad(*z);
                }
            }
            g = self.layers[i].backward_batch(&cache.inputs[i], &g, &mut grads.layers[i]);
        }
        g
    }
}

impl Parameterized for Mlp {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(prefixed(&format!("l{i}"), l.tensors()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Kan,
    Mlp,
}

/// A stack that is either KAN or MLP, chosen by configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeedForward {
    Kan(KanStack),
    Mlp(Mlp),
}

#[derive(Debug, Clone)]
pub enum FeedForwardCache {
    Kan(Vec<KanCache>),
    Mlp(MlpCache),
}

impl FeedForward {
    pub fn init(kind: BlockKind, dims: &[usize], grid: &SplineGrid, rng: &mut SeededRng) -> Self {
        match kind {
            BlockKind::Kan => FeedForward::Kan(KanStack::init(dims, grid, rng)),
            BlockKind::Mlp => FeedForward::Mlp(Mlp::init(dims, rng)),
        }
    }

    pub fn forward_batch(&self, x: &Mat) -> (Mat, FeedForwardCache) {
        match self {
            FeedForward::Kan(s) => {
                let (y, c) = s.forward_batch(x);
                (y, FeedForwardCache::Kan(c))
            }
            FeedForward::Mlp(m) => {
                let (y, c) = m.forward_batch(x);
                (y, FeedForwardCache::Mlp(c))
            }
        }
    }

    pub fn backward_batch(
        &self,
        cache: &FeedForwardCache,
        gy: &Mat,
        grads: &mut FeedForward,
    ) -> Mat {
        match (self, cache, grads) {
            (FeedForward::Kan(s), FeedForwardCache::Kan(c), FeedForward::Kan(g)) => {
                s.backward_batch(c, gy, g)
            }
            (FeedForward::Mlp(m), FeedForwardCache::Mlp(c), FeedForward::Mlp(g)) => {
                m.backward_batch(c, gy, g)
            }
            _ => panic!("feed-forward kind mismatch between params, cache and grads"),
        }
    }

    /// Mutable access to the last KAN layer, if this is a KAN stack.
    pub fn last_kan_mut(&mut self) -> Option<&mut crate::kan::KanLayer> {
        match self {
            FeedForward::Kan(s) => s.layers.last_mut(),
            FeedForward::Mlp(_) => None,
        }
    }
}

impl Parameterized for FeedForward {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        match self {
            FeedForward::Kan(s) => s.tensors(),
            FeedForward::Mlp(m) => m.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            FeedForward::Kan(s) => s.tensors_mut(),
            FeedForward::Mlp(m) => m.tensors_mut(),
        }
    }
}
