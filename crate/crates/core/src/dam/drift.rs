//! Drift tests on the reconstruction module's embedding stream.
//!
//! Embeddings are projected onto their top principal directions. The
//! divergence of the most recent `m` projected embeddings from the baseline is
//! a closed-form Gaussian KL, compared against `χ²_{d,1−α} / (2m)`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::linalg::{quantile, Mat};

/// `χ²_{d}(1 − α) / (2m)`.
pub fn kl_threshold(dims: usize, alpha: f64, window: usize) -> Result<f64> {
    if dims == 0 || window == 0 || !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Config(format!(
            "KL threshold needs d ≥ 1, m ≥ 1 and 0 < α < 1 (got d={dims}, m={window}, α={alpha})"
        )));
    }
    let chi = ChiSquared::new(dims as f64).map_err(|e| Error::Config(e.to_string()))?;
    Ok(chi.inverse_cdf(1.0 - alpha) / (2.0 * window as f64))
}

const RIDGE: f64 = 1e-6;

fn to_dmatrix(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Cholesky factor, adding `1e-6·I` when the matrix is not positive definite.
/// The flag reports whether the ridge was needed.
fn robust_cholesky(cov: &DMatrix<f64>) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, bool)> {
    if let Some(c) = cov.clone().cholesky() {
        return Ok((c, false));
    }
    let n = cov.nrows();
    let ridged = cov + DMatrix::identity(n, n) * RIDGE;
    ridged
        .cholesky()
        .map(|c| (c, true))
        .ok_or_else(|| Error::non_finite("covariance (not positive definite after ridge)"))
}

/// `KL(N(μ₁, Σ₁) ‖ N(μ₀, Σ₀))`.
pub fn gaussian_kl(mean1: &[f64], cov1: &Mat, mean0: &[f64], cov0: &Mat) -> Result<f64> {
    let d = mean0.len();
    if mean1.len() != d || cov1.shape() != (d, d) || cov0.shape() != (d, d) {
        return Err(Error::contract("KL dimensions disagree"));
    }
    let (c0, _) = robust_cholesky(&to_dmatrix(cov0))?;
    let (c1, _) = robust_cholesky(&to_dmatrix(cov1))?;
    let s1 = to_dmatrix(cov1);
    let trace = c0.solve(&s1).trace();
    let diff = DVector::from_iterator(d, mean0.iter().zip(mean1).map(|(a, b)| a - b));
    let maha = diff.dot(&c0.solve(&diff));
    let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    };
    let kl = 0.5 * (trace + maha - d as f64 + logdet(&c0) - logdet(&c1));
    Ok(kl.max(0.0))
}

/// `KL(N(μ₁, Σ₀) ‖ N(μ₀, Σ₀)) = ½ (μ₁−μ₀)ᵀ Σ₀⁻¹ (μ₁−μ₀)`.
pub fn mean_shift_kl(mean1: &[f64], mean0: &[f64], cov0: &Mat) -> Result<f64> {
    let d = mean0.len();
    if mean1.len() != d || cov0.shape() != (d, d) {
        return Err(Error::contract("KL dimensions disagree"));
    }
    let (c0, _) = robust_cholesky(&to_dmatrix(cov0))?;
    let diff = DVector::from_iterator(d, mean1.iter().zip(mean0).map(|(a, b)| a - b));
    Ok(0.5 * diff.dot(&c0.solve(&diff)))
}

fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= rows.len() as f64);
    m
}

/// Sample covariance (n − 1 denominator).
fn cov_of(rows: &[Vec<f64>], mean: &[f64]) -> Mat {
    let d = mean.len();
    let mut c = Mat::zeros(d, d);
    for r in rows {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in 0..d {
                let v = c.get(i, j) + di * (r[j] - mean[j]);
                c.set(i, j, v);
            }
        }
    }
    let denom = (rows.len().max(2) - 1) as f64;
    c.as_mut_slice().iter_mut().for_each(|v| *v /= denom);
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// Mean shift against the long-run covariance of window means.
    MeanShift,
    /// Full Gaussian KL with a covariance fitted on the recent windows.
    FullGaussian,
}

/// Normative profile of the embedding stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftBaseline {
    pub mode: KlMode,
    /// Row-major `[dims × embed]` projection.
    pub components: Mat,
    pub center: Vec<f64>,
    pub mean: Vec<f64>,
    pub cov: Mat,
}

impl DriftBaseline {
    /// Fits the profile from per-curve embedding sequences (`[steps × embed]`).
    ///
    /// `MeanShift` uses `m·Cov(block means)` over blocks of `window`
    /// consecutive embeddings taken every `stride` steps, which absorbs the
    /// autocorrelation of overlapping sliding windows.
    pub fn fit(
        curves: &[Mat],
        dims: usize,
        window: usize,
        stride: usize,
        mode: KlMode,
    ) -> Result<Self> {
        let all: Vec<Vec<f64>> = curves
            .iter()
            .flat_map(|c| (0..c.rows()).map(move |r| c.row(r).to_vec()))
            .collect();
        if all.len() < 2 {
            return Err(Error::Data(
                "too few embeddings to fit a drift baseline".into(),
            ));
        }
        let embed = all[0].len();
        let dims = dims.min(embed).max(1);
        let center = mean_of(&all);
        let full_cov = cov_of(&all, &center);
        let eig = SymmetricEigen::new(to_dmatrix(&full_cov));
        let mut order: Vec<usize> = (0..embed).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let mut components = Mat::zeros(dims, embed);
        for (k, &idx) in order.iter().take(dims).enumerate() {
            let col = eig.eigenvectors.column(idx);
            // fix the sign so the largest-magnitude entry is positive
            let pivot = col
                .iter()
                .cloned()
                .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for j in 0..embed {
                components.set(k, j, sign * col[j]);
            }
        }
        let mut base = DriftBaseline {
            mode,
            components,
            center,
            mean: vec![0.0; dims],
            cov: Mat::zeros(dims, dims),
        };
        let projected: Vec<Vec<Vec<f64>>> = curves
            .iter()
            .map(|c| (0..c.rows()).map(|r| base.project(c.row(r))).collect())
            .collect();
        let flat: Vec<Vec<f64>> = projected.iter().flatten().cloned().collect();
        base.mean = mean_of(&flat);
        base.cov = match mode {
            KlMode::FullGaussian => cov_of(&flat, &base.mean),
            KlMode::MeanShift => {
                let stride = stride.max(1);
                let mut blocks = Vec::new();
                for seq in &projected {
                    let mut start = 0;
                    while start + window <= seq.len() {
                        blocks.push(mean_of(&seq[start..start + window]));
                        start += stride;
                    }
                }
                if blocks.len() <= dims {
                    return Err(Error::Data(format!(
                        "need more than {dims} blocks of {window} windows to fit the drift baseline, got {}",
                        blocks.len()
                    )));
                }
                let bm = mean_of(&blocks);
                let mut c = cov_of(&blocks, &bm);
                c.as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v *= window as f64);
                c
            }
        };
        Ok(base)
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, embedding: &[f64]) -> Vec<f64> {
        (0..self.components.rows())
            .map(|k| {
                self.components
                    .row(k)
                    .iter()
                    .zip(embedding.iter().zip(&self.center))
                    .map(|(w, (x, c))| w * (x - c))
                    .sum()
            })
            .collect()
    }

    /// Divergence of recent projected embeddings from the profile.
    pub fn divergence(&self, recent: &[Vec<f64>]) -> Result<f64> {
        if recent.len() < 2 {
            return Err(Error::Precondition(
                "divergence needs at least two recent windows".into(),
            ));
        }
        let mu = mean_of(recent);
        match self.mode {
            KlMode::MeanShift => mean_shift_kl(&mu, &self.mean, &self.cov),
            KlMode::FullGaussian => gaussian_kl(&mu, &cov_of(recent, &mu), &self.mean, &self.cov),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Equilibrium,
    Drift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    None,
    EnteredDrift,
    Recovered,
}

/// Thresholds, baseline and the equilibrium/drift state machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftState {
    pub baseline: DriftBaseline,
    pub eps_rec: f64,
    pub tau: f64,
    pub alpha: f64,
    pub window: usize,
    pub mode: Mode,
    pub last_divergence: Option<f64>,
    calm_steps: usize,
    #[serde(skip)]
    recent: VecDeque<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub drift: bool,
    /// `None` until `window` embeddings have been seen.
    pub divergence: Option<f64>,
}

impl DriftState {
    pub fn new(baseline: DriftBaseline, eps_rec: f64, alpha: f64, window: usize) -> Result<Self> {
        if !(eps_rec >= 0.0) {
            return Err(Error::Config(
                "reconstruction threshold must be non-negative".into(),
            ));
        }
        let tau = kl_threshold(baseline.dims(), alpha, window)?;
        Ok(DriftState {
            baseline,
            eps_rec,
            tau,
            alpha,
            window,
            mode: Mode::Equilibrium,
            last_divergence: None,
            calm_steps: 0,
            recent: VecDeque::with_capacity(window),
        })
    }

    /// Clears the recent-embedding history and returns to equilibrium.
    pub fn restart(&mut self) {
        self.recent.clear();
        self.mode = Mode::Equilibrium;
        self.calm_steps = 0;
        self.last_divergence = None;
    }

    /// Drift verdict for a given recent set and reconstruction loss. The KL
    /// branch requires exactly `window` recent projected embeddings.
    pub fn detect(&self, recent: &[Vec<f64>], l_rec: f64) -> Result<Verdict> {
        if recent.len() != self.window {
            return Err(Error::Precondition(format!(
                "drift test needs {} recent windows, got {}",
                self.window,
                recent.len()
            )));
        }
        let d = self.baseline.divergence(recent)?;
        Ok(Verdict {
            drift: l_rec > self.eps_rec || d > self.tau,
            divergence: Some(d),
        })
    }

    /// Pushes one embedding and tests: reconstruction only until the history
    /// is full, then both tests.
    pub fn observe(&mut self, embedding: &[f64], l_rec: f64) -> Result<Verdict> {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(self.baseline.project(embedding));
        let verdict = if self.recent.len() == self.window {
            let recent: Vec<Vec<f64>> = self.recent.iter().cloned().collect();
            self.detect(&recent, l_rec)?
        } else {
            Verdict {
                drift: l_rec > self.eps_rec,
                divergence: None,
            }
        };
        self.last_divergence = verdict.divergence;
        Ok(verdict)
    }

    /// Advances the mode machine: any drift enters drift mode; `window`
    /// consecutive calm verdicts return to equilibrium.
    pub fn advance(&mut self, drift: bool) -> Transition {
        match (self.mode, drift) {
            (Mode::Equilibrium, true) => {
                self.mode = Mode::Drift;
                self.calm_steps = 0;
                Transition::EnteredDrift
            }
            (Mode::Equilibrium, false) => Transition::None,
            (Mode::Drift, true) => {
                self.calm_steps = 0;
                Transition::None
            }
            (Mode::Drift, false) => {
                self.calm_steps += 1;
                if self.calm_steps >= self.window {
                    self.mode = Mode::Equilibrium;
                    self.calm_steps = 0;
                    Transition::Recovered
                } else {
                    Transition::None
                }
            }
        }
    }
}

/// Reconstruction threshold: the given quantile of calibration losses.
pub fn reconstruction_threshold(losses: &[f64], q: f64) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::Data("no calibration losses".into()));
    }
    Ok(quantile(losses, q))
}

/// `sqrt(2·d·σ²·ln(2d/δ))`.
pub fn equilibrium_radius(dims: usize, sigma: f64, delta: f64) -> f64 {
    let d = dims as f64;
    (2.0 * d * sigma * sigma * (2.0 * d / delta).ln()).sqrt()
}

/// Whether `‖φ − μ‖` is inside the equilibrium radius.
pub fn equilibrium_check(phi: &[f64], mu: &[f64], sigma: f64, delta: f64) -> Result<bool> {
    if phi.len() != mu.len() || phi.is_empty() {
        return Err(Error::contract("state and reference dimensions differ"));
    }
    if !(sigma > 0.0) || !(0.0 < delta && delta < 1.0) {
        return Err(Error::contract("need σ > 0 and 0 < δ < 1"));
    }
    let dist = phi
        .iter()
        .zip(mu)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(dist < equilibrium_radius(phi.len(), sigma, delta))
}
