//! Seeded Monte-Carlo checks of the optimizer's regret and contraction bounds
//! and of the sub-Gaussian tail bound used by the equilibrium test.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dam::AdaptiveOpt;
use crate::error::{Error, Result};
use crate::params::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    /// Every loss is identically zero.
    Zero,
    /// Targets alternate sign every step so the gradient flips each round.
    Alternating,
    /// Random slopes and targets.
    Random,
    /// Targets jump to a new level every few hundred steps.
    Switching,
}

/// Streams of absolute losses `ℓ_t(θ) = |a_t·θ − b_t|` on `θ ∈ [−D/2, D/2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretConfig {
    pub horizon: usize,
    pub diameter: f64,
    /// Bound on `|a_t|`, hence on the subgradient.
    pub grad_bound: f64,
    pub momentum_beta: f64,
    pub ema_lambda: f64,
}

impl Default for RegretConfig {
    fn default() -> Self {
        RegretConfig {
            horizon: 10_000,
            diameter: 2.0,
            grad_bound: 1.0,
            momentum_beta: 0.27,
            ema_lambda: 0.1,
        }
    }
}

impl RegretConfig {
    pub fn step_size(&self) -> f64 {
        self.diameter
            / ((1.0 + self.momentum_beta) * self.grad_bound * (self.horizon as f64).sqrt())
    }

    pub fn bound(&self) -> f64 {
        self.diameter * self.grad_bound * (1.0 + self.momentum_beta) * (self.horizon as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretTrial {
    pub seed: u64,
    pub kind: StreamKind,
    pub regret: f64,
    pub bound: f64,
    pub best_theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub config: RegretConfig,
    pub trials: Vec<RegretTrial>,
    pub violations: Vec<u64>,
    /// Smallest `bound − regret` over trials.
    pub min_slack: f64,
}

fn stream(kind: StreamKind, cfg: &RegretConfig, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = derived_rng(seed, "regret-stream");
    let g = cfg.grad_bound;
    let r = cfg.diameter / 2.0;
    let mut level = 0.0;
    (0..cfg.horizon)
        .map(|t| match kind {
            StreamKind::Zero => (0.0, 0.0),
            StreamKind::Alternating => {
                let a = g * rng.random_range(0.5..=1.0);
                let b = if t % 2 == 0 { a * r } else { -a * r };
                (a, b)
            }
            StreamKind::Random => {
                let a = rng.random_range(-g..=g);
                (a, rng.random_range(-1.5 * r..=1.5 * r) * a.abs().max(0.1))
            }
            StreamKind::Switching => {
                if t % 500 == 0 {
                    level = rng.random_range(-r..=r);
                }
                let a = g * rng.random_range(0.2..=1.0);
                (a, a * level)
            }
        })
        .collect()
}

fn cumulative_loss(stream: &[(f64, f64)], theta: f64) -> f64 {
    stream.iter().map(|(a, b)| (a * theta - b).abs()).sum()
}

/// Minimizer of `Σ|a·θ − b|` over `[lo, hi]`: the `|a|`-weighted median of
/// `b/a`, clamped (the objective is convex and piecewise linear).
pub fn best_fixed(stream: &[(f64, f64)], lo: f64, hi: f64) -> f64 {
    let mut pts: Vec<(f64, f64)> = stream
        .iter()
        .filter(|(a, _)| *a != 0.0)
        .map(|(a, b)| (b / a, a.abs()))
        .collect();
    if pts.is_empty() {
        return 0.0f64.clamp(lo, hi);
    }
    pts.sort_by(|x, y| x.0.total_cmp(&y.0));
    let half = pts.iter().map(|p| p.1).sum::<f64>() / 2.0;
    let mut acc = 0.0;
    for (x, w) in &pts {
        acc += w;
        if acc >= half {
            return x.clamp(lo, hi);
        }
    }
    pts.last().unwrap().0.clamp(lo, hi)
}

/// Runs projected descent with EMA momentum on one stream and returns the
/// regret against the best fixed parameter.
pub fn regret_trial(kind: StreamKind, cfg: &RegretConfig, seed: u64) -> Result<RegretTrial> {
    let s = stream(kind, cfg, seed);
    let r = cfg.diameter / 2.0;
    let mut opt = AdaptiveOpt::new(
        vec![0.0],
        cfg.step_size(),
        cfg.momentum_beta,
        cfg.ema_lambda,
        r,
    )?;
    let mut theta = vec![0.0];
    let mut online = 0.0;
    for (a, b) in &s {
        let resid = a * theta[0] - b;
        online += resid.abs();
        let grad = if resid > 0.0 {
            *a
        } else if resid < 0.0 {
            -a
        } else {
            0.0
        };
        opt.step(&mut theta, &[grad])?;
    }
    let best = best_fixed(&s, -r, r);
    Ok(RegretTrial {
        seed,
        kind,
        regret: online - cumulative_loss(&s, best),
        bound: cfg.bound(),
        best_theta: best,
    })
}

pub fn regret_suite(cfg: &RegretConfig, trials: usize, seed: u64) -> Result<RegretReport> {
    if cfg.horizon == 0 || !(cfg.diameter > 0.0) || !(cfg.grad_bound > 0.0) {
        return Err(Error::Config(
            "regret suite needs positive horizon, diameter and gradient bound".into(),
        ));
    }
    let kinds = [
        StreamKind::Alternating,
        StreamKind::Random,
        StreamKind::Switching,
    ];
    let mut out = Vec::with_capacity(trials);
    for i in 0..trials {
        let s = seed + i as u64;
        out.push(regret_trial(kinds[i % kinds.len()], cfg, s)?);
    }
    let violations = out
        .iter()
        .filter(|t| t.regret > t.bound)
        .map(|t| t.seed)
        .collect();
    let min_slack = out
        .iter()
        .map(|t| t.bound - t.regret)
        .fold(f64::INFINITY, f64::min);
    Ok(RegretReport {
        config: *cfg,
        trials: out,
        violations,
        min_slack,
    })
}

/// Noisy gradients on `½·θᵀHθ` with `H = diag(μ … L)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionConfig {
    pub dim: usize,
    pub mu: f64,
    pub lipschitz: f64,
    /// Total gradient-noise variance `E‖ξ‖²`.
    pub sigma2: f64,
    pub eta: f64,
    pub momentum_beta: f64,
    pub ema_lambda: f64,
    pub steps: usize,
    pub init_norm: f64,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        ContractionConfig {
            dim: 4,
            mu: 0.5,
            lipschitz: 2.0,
            sigma2: 0.04,
            eta: 0.5,
            momentum_beta: 0.05,
            ema_lambda: 0.5,
            steps: 200,
            init_norm: 2.0,
        }
    }
}

impl ContractionConfig {
    pub fn rho(&self) -> f64 {
        1.0 - self.eta * self.mu + self.momentum_beta * (self.lipschitz / self.mu).sqrt()
    }

    pub fn floor(&self) -> f64 {
        self.eta * (1.0 + self.momentum_beta).powi(2) * self.sigma2 / self.mu
    }

    pub fn bound(&self, t: usize) -> f64 {
        self.rho().powi(t as i32) * self.init_norm.powi(2) + self.floor()
    }

    fn curvatures(&self) -> Vec<f64> {
        if self.dim == 1 {
            return vec![self.mu];
        }
        (0..self.dim)
            .map(|i| self.mu + (self.lipschitz - self.mu) * i as f64 / (self.dim - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub config: ContractionConfig,
    pub seeds: usize,
    pub rho: f64,
    /// Seed-averaged `‖e_t‖²` for `t = 0…steps`.
    pub mean_sq_error: Vec<f64>,
    pub bound: Vec<f64>,
    /// Steps where the average exceeded the bound.
    pub violations: Vec<usize>,
}

pub fn contraction_suite(
    cfg: &ContractionConfig,
    seeds: usize,
    seed: u64,
) -> Result<ContractionReport> {
    if cfg.dim == 0 || !(cfg.mu > 0.0) || cfg.lipschitz < cfg.mu || seeds == 0 {
        return Err(Error::Config(
            "contraction suite needs dim ≥ 1, 0 < μ ≤ L and at least one seed".into(),
        ));
    }
    if cfg.eta > 1.0 / cfg.lipschitz + 1e-15 {
        return Err(Error::Config(format!(
            "step {} exceeds 1/L = {}",
            cfg.eta,
            1.0 / cfg.lipschitz
        )));
    }
    let h = cfg.curvatures();
    let coord_sd = (cfg.sigma2 / cfg.dim as f64).sqrt();
    let mut sums = vec![0.0; cfg.steps + 1];
    for s in 0..seeds {
        let mut rng = derived_rng(seed + s as u64, "contraction");
        // random direction scaled to the configured starting distance
        let mut theta: Vec<f64> = (0..cfg.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        theta.iter_mut().for_each(|v| *v *= cfg.init_norm / norm);
        let mut opt = AdaptiveOpt::new(
            vec![0.0; cfg.dim],
            cfg.eta,
            cfg.momentum_beta,
            cfg.ema_lambda,
            f64::INFINITY,
        )?;
        sums[0] += theta.iter().map(|v| v * v).sum::<f64>();
        for t in 1..=cfg.steps {
            let grad: Vec<f64> = theta
                .iter()
                .zip(&h)
                .map(|(x, hh)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    hh * x + coord_sd * z
                })
                .collect();
            opt.step(&mut theta, &grad)?;
            sums[t] += theta.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let mean: Vec<f64> = sums.iter().map(|v| v / seeds as f64).collect();
    let bound: Vec<f64> = (0..=cfg.steps).map(|t| cfg.bound(t)).collect();
    let violations = (0..=cfg.steps)
        .filter(|&t| mean[t] > bound[t] * (1.0 + 1e-12))
        .collect();
    Ok(ContractionReport {
        config: *cfg,
        seeds,
        rho: cfg.rho(),
        mean_sq_error: mean,
        bound,
        violations,
    })
}

/// `2d·exp(−ε²/(2dσ²))`.
pub fn tail_bound(d: usize, sigma: f64, eps: f64) -> f64 {
    2.0 * d as f64 * (-(eps * eps) / (2.0 * d as f64 * sigma * sigma)).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub eps: f64,
    pub empirical: f64,
    pub bound: f64,
    /// Three Monte-Carlo standard errors.
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub dim: usize,
    pub sigma: f64,
    pub draws: usize,
    pub points: Vec<TailPoint>,
    pub violations: Vec<f64>,
}

/// Empirical `Pr(‖Φ − μ‖ ≥ ε)` for Gaussian `Φ` against the union bound.
pub fn tail_bound_suite(
    d: usize,
    sigma: f64,
    eps_grid: &[f64],
    draws: usize,
    seed: u64,
) -> Result<TailReport> {
    if d == 0 || !(sigma > 0.0) || draws == 0 {
        return Err(Error::Config(
            "tail suite needs d ≥ 1, σ > 0 and draws > 0".into(),
        ));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = derived_rng(seed, "tail");
    let norms: Vec<f64> = (0..draws)
        .map(|_| {
            (0..d)
                .map(|_| normal.sample(&mut rng).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let points: Vec<TailPoint> = eps_grid
        .iter()
        .map(|&eps| {
            let hits = norms.iter().filter(|&&r| r >= eps).count();
            let p = hits as f64 / draws as f64;
            TailPoint {
                eps,
                empirical: p,
                bound: tail_bound(d, sigma, eps),
                tolerance: 3.0 * (p * (1.0 - p) / draws as f64).sqrt(),
            }
        })
        .collect();
    let violations = points
        .iter()
        .filter(|p| p.empirical - p.tolerance > p.bound)
        .map(|p| p.eps)
        .collect();
    Ok(TailReport {
        dim: d,
        sigma,
        draws,
        points,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_median_matches_grid() {
        let cfg = RegretConfig {
            horizon: 300,
            ..RegretConfig::default()
        };
        for kind in [
            StreamKind::Alternating,
            StreamKind::Random,
            StreamKind::Switching,
        ] {
            let s = stream(kind, &cfg, 3);
            let best = best_fixed(&s, -1.0, 1.0);
            let f_best = cumulative_loss(&s, best);
            for i in 0..=4000 {
                let th = -1.0 + 2.0 * i as f64 / 4000.0;
                assert!(cumulative_loss(&s, th) >= f_best - 1e-9, "{kind:?} at {th}");
            }
        }
    }

    #[test]
    fn zero_stream_has_zero_regret() {
        let t = regret_trial(StreamKind::Zero, &RegretConfig::default(), 1).unwrap();
        assert_eq!(t.regret, 0.0);
        assert!(t.regret <= t.bound);
    }

    #[test]
    fn plain_descent_bound() {
        let cfg = RegretConfig {
            momentum_beta: 0.0,
            horizon: 2000,
            ..RegretConfig::default()
        };
        assert!((cfg.bound() - 2.0 * 2000f64.sqrt()).abs() < 1e-12);
        let r = regret_suite(&cfg, 6, 10).unwrap();
        assert!(r.violations.is_empty(), "{:?}", r.violations);
    }

    #[test]
    fn noiseless_descent_contracts() {
        let cfg = ContractionConfig {
            sigma2: 0.0,
            momentum_beta: 0.0,
            steps: 30,
            ..ContractionConfig::default()
        };
        let r = contraction_suite(&cfg, 3, 1).unwrap();
        let rate = (1.0 - cfg.eta * cfg.mu).powi(2);
        for t in 0..=30 {
            assert!(r.mean_sq_error[t] <= rate.powi(t as i32) * 4.0 * (1.0 + 1e-9));
        }
        assert!(r.violations.is_empty());
    }

    #[test]
    fn isotropic_unit_step_lands_on_optimum() {
        let cfg = ContractionConfig {
            mu: 1.0,
            lipschitz: 1.0,
            eta: 1.0,
            sigma2: 0.0,
            momentum_beta: 0.0,
            steps: 1,
            ..ContractionConfig::default()
        };
        let r = contraction_suite(&cfg, 5, 2).unwrap();
        assert!(r.mean_sq_error[1] < 1e-24);
        assert!(r.violations.is_empty());
    }

    #[test]
    fn near_limit_momentum_keeps_rho_below_one_when_isotropic() {
        let cfg = ContractionConfig {
            mu: 1.0,
            lipschitz: 1.0,
            eta: 1.0,
            momentum_beta: 0.99,
            ..ContractionConfig::default()
        };
        assert!(cfg.rho() < 1.0);
        assert!((cfg.rho() - 0.99).abs() < 1e-12);
    }

    #[test]
    fn tail_examples() {
        assert!((tail_bound(1, 1.0, 3.0) - 2.0 * (-4.5f64).exp()).abs() < 1e-15);
        assert!(tail_bound(3, 1.0, 0.0) >= 1.0);
        assert!(tail_bound(2, 2.0, 3.0) > tail_bound(2, 1.0, 3.0));
        let r = tail_bound_suite(1, 1.0, &[0.0, 1.0, 2.0, 3.0], 100_000, 5).unwrap();
        assert!(r.violations.is_empty());
        let p3 = &r.points[3];
        assert!((p3.empirical - 0.0027).abs() < 0.0008, "{}", p3.empirical);
        assert!((p3.bound - 0.0222).abs() < 1e-4);
    }
}
