//! Trainable-parameter plumbing shared by every model in the crate.
//!
//! Each model exposes its tensors through [`Parameterized`] in a fixed order.
//! Gradients are stored in a value of the same type (see [`zeros_like`]), so an
//! optimizer only has to walk two parallel tensor lists.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named component from a base seed.
pub fn derived_rng(seed: u64, stream: &str) -> SeededRng {
    // FNV-1a over the stream label.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// A borrowed, named view of one parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl<'a> TensorView<'a> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: &'a [f64]) -> Self {
        TensorView {
            name: name.into(),
            shape,
            data,
        }
    }
}

pub trait Parameterized {
    /// All trainable tensors, in a stable order.
    fn tensors(&self) -> Vec<TensorView<'_>>;

    /// Mutable access in the same order as [`Parameterized::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

/// Re-labels `views` under `prefix.`.
pub fn prefixed<'a>(prefix: &str, views: Vec<TensorView<'a>>) -> Vec<TensorView<'a>> {
    views
        .into_iter()
        .map(|mut v| {
            v.name = format!("{prefix}.{}", v.name);
            v
        })
        .collect()
}

pub fn flatten<P: Parameterized + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.param_count());
    for t in p.tensors() {
        out.extend_from_slice(t.data);
    }
    out
}

pub fn unflatten<P: Parameterized + ?Sized>(p: &mut P, flat: &[f64]) -> Result<()> {
    let mut offset = 0;
    for t in p.tensors_mut() {
        let end = offset + t.len();
        if end > flat.len() {
            return Err(Error::contract("flat parameter vector too short"));
        }
        t.copy_from_slice(&flat[offset..end]);
        offset = end;
    }
    if offset != flat.len() {
        return Err(Error::contract("flat parameter vector too long"));
    }
    Ok(())
}

/// A copy of `p` with every tensor zeroed; used as a gradient accumulator.
pub fn zeros_like<P: Parameterized + Clone>(p: &P) -> P {
    let mut g = p.clone();
    zero(&mut g);
    g
}

pub fn zero<P: Parameterized + ?Sized>(p: &mut P) {
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Per-tensor flags: `true` where the tensor name starts with one of `prefixes`.
pub fn mask_by_prefix<P: Parameterized + ?Sized>(p: &P, prefixes: &[&str]) -> Vec<bool> {
    p.tensors()
        .iter()
        .map(|t| prefixes.iter().any(|pre| t.name.starts_with(pre)))
        .collect()
}

/// Concatenates the tensors selected by `mask`.
pub fn gather<P: Parameterized + ?Sized>(p: &P, mask: &[bool]) -> Vec<f64> {
    let mut out = Vec::new();
    for (t, &on) in p.tensors().iter().zip(mask) {
        if on {
            out.extend_from_slice(t.data);
        }
    }
    out
}

/// Inverse of [`gather`].
pub fn scatter<P: Parameterized + ?Sized>(p: &mut P, mask: &[bool], flat: &[f64]) {
    let mut offset = 0;
    for (t, &on) in p.tensors_mut().into_iter().zip(mask) {
        if on {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
    }
    assert_eq!(offset, flat.len(), "scatter length mismatch");
}

/// `dst += alpha · src`, tensor by tensor.
pub fn accumulate<P: Parameterized + ?Sized>(dst: &mut P, src: &P, alpha: f64) {
    let src_t = src.tensors();
    for (d, s) in dst.tensors_mut().into_iter().zip(src_t) {
        for (a, b) in d.iter_mut().zip(s.data) {
            *a += alpha * b;
        }
    }
}

pub fn scale<P: Parameterized + ?Sized>(p: &mut P, alpha: f64) {
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= alpha);
    }
}

/// Xavier/Glorot uniform fill: U(−a, a) with a = gain·sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(
    rng: &mut SeededRng,
    out: &mut [f64],
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) {
    let a = gain * (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    for v in out.iter_mut() {
        *v = rng.random_range(-a..a);
    }
}

/// Adam with bias correction over a flat view of a [`Parameterized`] model.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// Applies one update. `mask`, when given, freezes tensors whose entry is `false`.
    pub fn step<P: Parameterized + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &P,
        mask: Option<&[bool]>,
    ) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        let grad_views = grads.tensors();
        let mut idx = 0;
        for (ti, (p, g)) in params.tensors_mut().into_iter().zip(grad_views).enumerate() {
            let frozen = mask.is_some_and(|m| !m[ti]);
            if frozen {
                idx += p.len();
                continue;
            }
            for (w, &gw) in p.iter_mut().zip(g.data) {
                let m = &mut self.m[idx];
                let v = &mut self.v[idx];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gw;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gw * gw;
                let mhat = *m / b1t;
                let vhat = *v / b2t;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                idx += 1;
            }
        }
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − central| / max(1, |central|) over the checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_name: Option<String>,
    pub checked: usize,
}

/// Compares an analytic gradient with central differences.
///
/// `f` maps a flat parameter vector to `(loss, gradient)`. When `max_coords` is
/// set, an evenly strided subset of that many coordinates is checked.
pub fn grad_check<F>(
    params: &[f64],
    h: f64,
    max_coords: Option<usize>,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if h <= 0.0 {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let (loss0, analytic) = f(params);
    if !loss0.is_finite() {
        return Err(Error::non_finite(
            "grad_check: forward value at the base point",
        ));
    }
    if analytic.len() != params.len() {
        return Err(Error::contract(
            "gradient length differs from parameter count",
        ));
    }
    let n = params.len();
    let stride = match max_coords {
        Some(k) if k > 0 && k < n => n.div_ceil(k),
        _ => 1,
    };
    let mut theta = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_name: None,
        checked: 0,
    };
    for i in (0..n).step_by(stride) {
        let orig = theta[i];
        theta[i] = orig + h;
        let (lp, _) = f(&theta);
        theta[i] = orig - h;
        let (lm, _) = f(&theta);
        theta[i] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::non_finite(format!(
                "grad_check: forward value perturbing parameter {i}"
            )));
        }
        let central = (lp - lm) / (2.0 * h);
        let rel = (analytic[i] - central).abs() / central.abs().max(1.0);
        if report.checked == 0 || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// [`grad_check`] over a [`Parameterized`] model; the report names the worst tensor.
pub fn grad_check_model<P, F>(
    model: &P,
    h: f64,
    max_coords: Option<usize>,
    mut loss_and_grad: F,
) -> Result<GradCheckReport>
where
    P: Parameterized + Clone,
    F: FnMut(&P) -> (f64, P),
{
    let base = flatten(model);
    let mut scratch = model.clone();
    let mut report = grad_check(&base, h, max_coords, |theta| {
        unflatten(&mut scratch, theta).expect("same layout");
        let (loss, g) = loss_and_grad(&scratch);
        (loss, flatten(&g))
    })?;
    let mut offset = 0;
    for t in model.tensors() {
        if report.worst_index < offset + t.data.len() {
            report.worst_name = Some(t.name.clone());
            break;
        }
        offset += t.data.len();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_check_square() {
        let r = grad_check(&[3.0], 1e-5, None, |w| (w[0] * w[0], vec![2.0 * w[0]])).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
    }

    #[test]
    fn grad_check_constant_is_exact() {
        let r = grad_check(&[1.0, -2.0], 1e-5, None, |_| (7.0, vec![0.0, 0.0])).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn grad_check_flags_wrong_gradient() {
        let r = grad_check(&[1.0], 1e-5, None, |w| (w[0] * w[0], vec![0.0])).unwrap();
        assert!((r.max_rel_error - 1.0).abs() < 1e-9);
    }

    #[test]
    fn grad_check_rejects_non_finite_forward() {
        let err = grad_check(&[0.0], 1e-5, None, |w| ((w[0]).ln(), vec![1.0])).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn derived_streams_differ() {
        let a: u64 = derived_rng(42, "hla").random();
        let b: u64 = derived_rng(42, "dam").random();
        let c: u64 = derived_rng(42, "hla").random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn unflatten_checks_length() {
        #[derive(Clone)]
        struct Two(Vec<f64>);
        impl Parameterized for Two {
            fn tensors(&self) -> Vec<TensorView<'_>> {
                vec![TensorView::new("w", vec![2], &self.0)]
            }
            fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
                vec![&mut self.0]
            }
        }
        let mut t = Two(vec![0.0; 2]);
        assert!(unflatten(&mut t, &[1.0]).is_err());
        assert!(unflatten(&mut t, &[1.0, 2.0, 3.0]).is_err());
        unflatten(&mut t, &[1.0, 2.0]).unwrap();
        assert_eq!(flatten(&t), vec![1.0, 2.0]);
        assert_eq!(mask_by_prefix(&t, &["w"]), vec![true]);
        assert_eq!(mask_by_prefix(&t, &["x"]), vec![false]);
    }
}
