//! Projected descent with an exponential moving average of past gradients:
//!
//! ```text
//! m ← λ·g + (1−λ)·m
//! θ ← Π_ball(θ − η·(g + β·m))
//! ```
//!
//! The ball is centred on the parameters the optimizer was created with.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveOpt {
    pub eta: f64,
    pub momentum_beta: f64,
    pub ema_lambda: f64,
    /// Radius of the feasible ball; `f64::INFINITY` disables projection.
    pub radius: f64,
    anchor: Vec<f64>,
    ema: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient had a NaN/Inf entry; nothing changed.
    Skipped,
}

impl AdaptiveOpt {
    pub fn new(
        anchor: Vec<f64>,
        eta: f64,
        momentum_beta: f64,
        ema_lambda: f64,
        radius: f64,
    ) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::Config(format!(
                "step size must be positive, got {eta}"
            )));
        }
        if !(momentum_beta >= 0.0) {
            return Err(Error::Config(format!(
                "momentum must be non-negative, got {momentum_beta}"
            )));
        }
        if !(ema_lambda > 0.0 && ema_lambda <= 1.0) {
            return Err(Error::Config(format!(
                "EMA weight must lie in (0, 1], got {ema_lambda}"
            )));
        }
        if !(radius > 0.0) {
            return Err(Error::Config(format!(
                "projection radius must be positive, got {radius}"
            )));
        }
        let ema = vec![0.0; anchor.len()];
        Ok(AdaptiveOpt {
            eta,
            momentum_beta,
            ema_lambda,
            radius,
            anchor,
            ema,
        })
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn ema(&self) -> &[f64] {
        &self.ema
    }

    /// Diameter of the feasible set.
    pub fn diameter(&self) -> f64 {
        2.0 * self.radius
    }

    pub fn reset_ema(&mut self) {
        self.ema.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Euclidean projection onto the ball around the anchor.
    pub fn project(&self, theta: &mut [f64]) {
        if !self.radius.is_finite() {
            return;
        }
        let dist = theta
            .iter()
            .zip(&self.anchor)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist > self.radius {
            let s = self.radius / dist;
            for (t, a) in theta.iter_mut().zip(&self.anchor) {
                *t = a + (*t - a) * s;
            }
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<StepOutcome> {
        if theta.len() != self.anchor.len() || grad.len() != self.anchor.len() {
            return Err(Error::contract(
                "parameter/gradient length differs from the optimizer's",
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Ok(StepOutcome::Skipped);
        }
        let lam = self.ema_lambda;
        for ((t, m), &g) in theta.iter_mut().zip(self.ema.iter_mut()).zip(grad) {
            *m = lam * g + (1.0 - lam) * *m;
            *t -= self.eta * (g + self.momentum_beta * *m);
        }
        self.project(theta);
        Ok(StepOutcome::Applied)
    }

    pub fn ema_norm(&self) -> f64 {
        norm2(&self.ema)
    }
}
