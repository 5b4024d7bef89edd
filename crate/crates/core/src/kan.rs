//! B-spline bases and Kolmogorov–Arnold layers.
//!
//! A layer maps `x ∈ R^in` to `R^out` with
//!
//! ```text
//! out_j = α_j · Σ_m [ SiLU(x_m) + Σ_k ω_{m,j,k} B_{k,p}(x_m) ] + b_j
//! ```
//!
//! where `B_{k,p}` are degree-`p` B-splines on a clamped knot vector shared by
//! every edge of the layer. Inputs outside the knot range are clamped for the
//! spline term (the SiLU term sees the raw value).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{silu, silu_grad, Mat};
use crate::params::{xavier_uniform, Parameterized, SeededRng, TensorView};

/// Highest supported spline degree; keeps per-evaluation scratch on the stack.
pub const MAX_DEGREE: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    degree: usize,
    knots: Vec<f64>,
}

/// Non-zero basis values (and first derivatives) at one point.
///
/// Entries `vals[r]` belong to basis index `first + r`, `r = 0..=degree`.
#[derive(Debug, Clone, Copy)]
pub struct LocalBasis {
    pub first: usize,
    pub vals: [f64; MAX_DEGREE + 1],
    pub ders: [f64; MAX_DEGREE + 1],
}

impl SplineGrid {
    pub fn new(degree: usize, knots: Vec<f64>) -> Result<Self> {
        if degree > MAX_DEGREE {
            return Err(Error::InvalidGrid(format!(
                "degree {degree} exceeds {MAX_DEGREE}"
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidGrid("non-finite knot".into()));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidGrid("knots must be non-decreasing".into()));
        }
        if knots.len() < degree + 2 {
            return Err(Error::InvalidGrid(format!(
                "{} knots cannot carry a degree-{degree} basis",
                knots.len()
            )));
        }
        let n = knots.len();
        let lo = knots[0];
        let hi = knots[n - 1];
        if knots[..=degree].iter().any(|&k| k != lo)
            || knots[n - 1 - degree..].iter().any(|&k| k != hi)
        {
            return Err(Error::InvalidGrid(format!(
                "end knots must each be repeated {} times",
                degree + 1
            )));
        }
        if hi <= lo {
            return Err(Error::InvalidGrid("empty knot range".into()));
        }
        Ok(SplineGrid { degree, knots })
    }

    /// Clamped knots on `[lo, hi]` with uniformly spaced interior knots and
    /// `basis_count` basis functions.
    pub fn clamped_uniform(degree: usize, basis_count: usize, lo: f64, hi: f64) -> Result<Self> {
        if basis_count < degree + 1 {
            return Err(Error::InvalidGrid(format!(
                "need at least {} basis functions for degree {degree}",
                degree + 1
            )));
        }
        let intervals = basis_count - degree;
        let step = (hi - lo) / intervals as f64;
        let mut knots = vec![lo; degree + 1];
        knots.extend((1..intervals).map(|i| lo + step * i as f64));
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        SplineGrid::new(degree, knots)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn basis_count(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    /// Index `s` of the knot span with `t_s ≤ x < t_{s+1}`; the right end maps
    /// to the last non-empty span.
    fn span(&self, x: f64) -> usize {
        let n = self.basis_count();
        let p = self.degree;
        if x >= self.knots[n] {
            // last non-empty interval ending at the right boundary
            let mut s = n - 1;
            while s > p && self.knots[s] == self.knots[n] {
                s -= 1;
            }
            return s;
        }
        // largest s in [p, n-1] with knots[s] <= x
        let (mut lo, mut hi) = (p, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.knots[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Evaluates the `degree + 1` non-zero basis functions at `x` (clamped to
    /// the domain), with their derivatives. The derivative is zero when `x` lies
    /// outside the domain since the clamped map is locally constant there.
    pub fn local_basis(&self, x: f64) -> LocalBasis {
        let p = self.degree;
        let (lo, hi) = self.domain();
        let outside = !(lo..=hi).contains(&x);
        let xc = x.clamp(lo, hi);
        let s = self.span(xc);
        let t = &self.knots;

        let mut n = [0.0; MAX_DEGREE + 1];
        let mut prev = [0.0; MAX_DEGREE + 1];
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        n[0] = 1.0;
        for j in 1..=p {
            if j == p {
                prev = n;
            }
            left[j] = xc - t[s + 1 - j];
            right[j] = t[s + j] - xc;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }

        let first = s - p;
        let mut ders = [0.0; MAX_DEGREE + 1];
        if p > 0 && !outside {
            // B'_{k,p} = p/(t_{k+p}-t_k) N_{k,p-1} - p/(t_{k+p+1}-t_{k+1}) N_{k+1,p-1};
            // prev[r'] holds N_{first+1+r', p-1}.
            let pf = p as f64;
            for (r, d) in ders.iter_mut().enumerate().take(p + 1) {
                let k = first + r;
                let mut v = 0.0;
                if r >= 1 {
                    let den = t[k + p] - t[k];
                    if den > 0.0 {
                        v += pf / den * prev[r - 1];
                    }
                }
                if r < p {
                    let den = t[k + p + 1] - t[k + 1];
                    if den > 0.0 {
                        v -= pf / den * prev[r];
                    }
                }
                *d = v;
            }
        }
        LocalBasis {
            first,
            vals: n,
            ders,
        }
    }

    /// All `basis_count` basis values at `x`.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.basis_count()];
        let lb = self.local_basis(x);
        for r in 0..=self.degree {
            out[lb.first + r] = lb.vals[r];
        }
        out
    }
}

/// One Kolmogorov–Arnold layer. `omega` is laid out `[in][out][basis]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanLayer {
    grid: SplineGrid,
    in_dim: usize,
    out_dim: usize,
    pub omega: Vec<f64>,
    pub alpha: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct KanCache {
    input: Mat,
    basis: Vec<LocalBasis>,
    inner: Mat,
}

impl KanLayer {
    /// Zero spline weights, unit outer scale, zero bias.
    pub fn zeroed(in_dim: usize, out_dim: usize, grid: SplineGrid) -> Self {
        let k = grid.basis_count();
        KanLayer {
            grid,
            in_dim,
            out_dim,
            omega: vec![0.0; in_dim * out_dim * k],
            alpha: vec![1.0; out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Xavier-uniform spline weights; `α = 1/in_dim` so the unweighted SiLU sum
    /// starts as a mean and stacks do not blow up with width; `b = 0`.
    pub fn init(in_dim: usize, out_dim: usize, grid: SplineGrid, rng: &mut SeededRng) -> Self {
        let mut layer = KanLayer::zeroed(in_dim, out_dim, grid);
        xavier_uniform(rng, &mut layer.omega, in_dim, out_dim, 1.0);
        let a = 1.0 / in_dim.max(1) as f64;
        layer.alpha.iter_mut().for_each(|v| *v = a);
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn grid(&self) -> &SplineGrid {
        &self.grid
    }

    #[inline]
    fn omega_at(&self, m: usize, j: usize) -> &[f64] {
        let k = self.grid.basis_count();
        let base = (m * self.out_dim + j) * k;
        &self.omega[base..base + k]
    }

    /// Single-vector forward.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::contract(format!(
                "KAN layer expects {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        let (out, _) = self.forward_batch(&Mat::from_vec(1, self.in_dim, x.to_vec()));
        Ok(out.into_vec())
    }

    pub fn forward_batch(&self, x: &Mat) -> (Mat, KanCache) {
        assert_eq!(x.cols(), self.in_dim, "KAN layer input width");
        let p = self.grid.degree();
        let rows = x.rows();
        let mut basis = Vec::with_capacity(rows * self.in_dim);
        let mut inner = Mat::zeros(rows, self.out_dim);
        let mut out = Mat::zeros(rows, self.out_dim);
        for b in 0..rows {
            let xr = x.row(b);
            let acc = inner.row_mut(b);
            let mut silu_sum = 0.0;
            for (m, &xm) in xr.iter().enumerate() {
                silu_sum += silu(xm);
                let lb = self.grid.local_basis(xm);
                for (j, a) in acc.iter_mut().enumerate() {
                    let w = &self.omega_at(m, j)[lb.first..=lb.first + p];
                    let mut s = 0.0;
                    for r in 0..=p {
                        s += w[r] * lb.vals[r];
                    }
                    *a += s;
                }
                basis.push(lb);
            }
            for a in acc.iter_mut() {
                *a += silu_sum;
            }
            let o = out.row_mut(b);
            for j in 0..self.out_dim {
                o[j] = self.alpha[j] * inner.get(b, j) + self.bias[j];
            }
        }
        (
            out,
            KanCache {
                input: x.clone(),
                basis,
                inner,
            },
        )
    }

    /// Accumulates parameter gradients into `grads` and returns dL/dx.
    pub fn backward_batch(&self, cache: &KanCache, grad_out: &Mat, grads: &mut KanLayer) -> Mat {
        let p = self.grid.degree();
        let k = self.grid.basis_count();
        let rows = grad_out.rows();
        let mut dx = Mat::zeros(rows, self.in_dim);
        let mut h = vec![0.0; self.out_dim];
        for b in 0..rows {
            let g = grad_out.row(b);
            let mut hsum = 0.0;
            for j in 0..self.out_dim {
                grads.alpha[j] += g[j] * cache.inner.get(b, j);
                grads.bias[j] += g[j];
                h[j] = g[j] * self.alpha[j];
                hsum += h[j];
            }
            let xr = cache.input.row(b);
            let dxr = dx.row_mut(b);
            for m in 0..self.in_dim {
                let lb = &cache.basis[b * self.in_dim + m];
                let mut dxm = silu_grad(xr[m]) * hsum;
                for (j, &hj) in h.iter().enumerate() {
                    let base = (m * self.out_dim + j) * k + lb.first;
                    let w = &self.omega[base..=base + p];
                    let gw = &mut grads.omega[base..=base + p];
                    let mut s = 0.0;
                    for r in 0..=p {
                        gw[r] += hj * lb.vals[r];
                        s += w[r] * lb.ders[r];
                    }
                    dxm += hj * s;
                }
                dxr[m] = dxm;
            }
        }
        dx
    }
}

impl Parameterized for KanLayer {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let k = self.grid.basis_count();
        vec![
            TensorView::new("omega", vec![self.in_dim, self.out_dim, k], &self.omega),
            TensorView::new("alpha", vec![self.out_dim], &self.alpha),
            TensorView::new("bias", vec![self.out_dim], &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.omega, &mut self.alpha, &mut self.bias]
    }
}

/// Left-to-right composition of KAN layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanStack {
    pub layers: Vec<KanLayer>,
}

impl KanStack {
    pub fn new(layers: Vec<KanLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("KAN stack needs at least one layer"));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::contract(format!(
                    "KAN stack break between layers {i} and {}: {} -> {}",
                    i + 1,
                    w[0].out_dim,
                    w[1].in_dim
                )));
            }
        }
        Ok(KanStack { layers })
    }

    /// Builds an initialized stack through `dims` (`dims.len() - 1` layers).
    pub fn init(dims: &[usize], grid: &SplineGrid, rng: &mut SeededRng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| KanLayer::init(w[0], w[1], grid.clone(), rng))
            .collect();
        KanStack { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward_batch(&self, x: &Mat) -> (Mat, Vec<KanCache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (o, c) = layer.forward_batch(&h);
            caches.push(c);
            h = o;
        }
        (h, caches)
    }

    pub fn backward_batch(&self, caches: &[KanCache], grad_out: &Mat, grads: &mut KanStack) -> Mat {
        let mut g = grad_out.clone();
        for ((layer, cache), lg) in self
            .layers
            .iter()
            .zip(caches)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            g = layer.backward_batch(cache, &g, lg);
        }
        g
    }
}

impl Parameterized for KanStack {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(crate::params::prefixed(&format!("l{i}"), l.tensors()));
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
