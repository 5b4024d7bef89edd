//! The self-feeding reconstruction loop.
//!
//! Window `[j−N, j)` predicts the value at `j`. While `j` is observed the
//! training target blends prediction and observation; afterwards the
//! prediction itself is appended to the series and fed back.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Featurizer, Model};
use crate::config::{AdaptScope, BetaShape, PrivateReset, RunConfig};
use crate::dam::{AdaptiveOpt, Dam, DamConfig, DriftState, Mode, Transition};
use crate::data::{generate_curve, SyntheticCurveSpec};
use crate::dense::FeedForward;
use crate::error::{Error, Result};
use crate::kan::SplineGrid;
use crate::linalg::{sigmoid, Mat};
use crate::params::{derived_rng, gather, mask_by_prefix, scatter, zeros_like, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub shape: BetaShape,
}

impl FusionSchedule {
    pub fn new(beta_min: f64, beta_max: f64, shape: BetaShape) -> Result<Self> {
        if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "fusion weights need 0 < min < max < 1, got {beta_min} and {beta_max}"
            )));
        }
        Ok(FusionSchedule {
            beta_min,
            beta_max,
            shape,
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Self::new(cfg.beta_min, cfg.beta_max, cfg.beta_shape)
    }

    /// Weight on the prediction for target index `j` when `observed` samples
    /// are known; rises across the observed range and holds at the maximum after.
    pub fn beta(&self, j: usize, observed: usize) -> f64 {
        if observed < 2 || j + 1 >= observed {
            return self.beta_max;
        }
        let u = j as f64 / (observed - 1) as f64;
        let ramp = match self.shape {
            BetaShape::Linear => u,
            BetaShape::Sigmoid => {
                let s = |v: f64| sigmoid(10.0 * (v - 0.5));
                (s(u) - s(0.0)) / (s(1.0) - s(0.0))
            }
        };
        self.beta_min + (self.beta_max - self.beta_min) * ramp
    }
}

/// `β·ŷ + (1−β)·y` when the target index is observed, else `ŷ`.
pub fn fusion_target(beta: f64, y_hat: f64, y_obs: Option<f64>, next_in_obs: bool) -> Result<f64> {
    if !next_in_obs {
        return Ok(y_hat);
    }
    let y = y_obs.ok_or_else(|| Error::contract("observed target index without an observation"))?;
    Ok(beta * y_hat + (1.0 - beta) * y)
}

/// `max(0, δ − (γ + λ))` with negative gains clamped to zero.
pub fn update_delta(prev: f64, gamma: f64, lambda: f64) -> f64 {
    (prev - (gamma.max(0.0) + lambda.max(0.0))).max(0.0)
}

/// Fixed-capacity FIFO.
#[derive(Debug, Clone, PartialEq)]
pub struct RingBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
}

impl<T> RingBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring buffer capacity must be positive");
        RingBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    /// Appends `item`, returning the evicted oldest item when full.
    pub fn push(&mut self, item: T) -> Option<T> {
        let evicted = if self.items.len() == self.capacity {
            self.items.pop_front()
        } else {
            None
        };
        self.items.push_back(item);
        evicted
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.items.iter_mut()
    }
}

/// One buffered window.
#[derive(Debug, Clone)]
pub struct BufferItem {
    pub features: Mat,
    pub pooled: Vec<f64>,
    pub anchor: f64,
    pub fused: f64,
    pub row_loss: f64,
}

#[derive(Debug, Clone)]
pub struct OnlineState {
    pub buffer: RingBuffer<BufferItem>,
    /// `δ₀, δ₁, …`, one entry per predicted step after the first.
    pub delta: Vec<f64>,
    pub gains: Vec<(f64, f64)>,
    pub position: usize,
}

impl OnlineState {
    pub fn new(capacity: usize, delta0: f64) -> Self {
        OnlineState {
            buffer: RingBuffer::new(capacity),
            delta: vec![delta0.max(0.0)],
            gains: Vec::new(),
            position: 0,
        }
    }

    pub fn record(&mut self, gamma: f64, lambda: f64) {
        let (g, l) = (gamma.max(0.0), lambda.max(0.0));
        let prev = *self.delta.last().expect("delta starts non-empty");
        self.delta.push(update_delta(prev, g, l));
        self.gains.push((g, l));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub timestamp: f64,
    pub observed: Option<f64>,
    pub predicted: Option<f64>,
    pub fused: f64,
    pub is_prediction: bool,
    pub drift_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub step: usize,
    #[serde(rename = "L_rec")]
    pub l_rec: f64,
    pub divergence: Option<f64>,
    pub tau: f64,
    pub eps_rec: f64,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub curve: Vec<f64>,
    pub observed_len: usize,
    pub steps: Vec<StepRecord>,
    pub drift_events: Vec<DriftEvent>,
    /// First step at which the buffer was full and drift tests ran.
    pub armed_from: Option<usize>,
    pub delta: Vec<f64>,
    pub gains: Vec<(f64, f64)>,
    /// Largest `|g(X) − g(X′)| / ‖X − X′‖` over sampled buffer pairs.
    pub lipschitz: f64,
    /// Running sum of `(1 + β)·L̂·δ` per predicted step.
    pub bound_trace: Vec<f64>,
    /// `Σ|ŷ − y|` over steps whose target was observed.
    pub observed_abs_error: f64,
    /// Largest gradient norm seen by an online head step.
    pub grad_bound: f64,
}

impl ReconstructionResult {
    pub fn predictions(&self) -> &[f64] {
        &self.curve[self.observed_len..]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        let map = |e: csv::Error| Error::Data(e.to_string());
        w.write_record([
            "step",
            "timestamp",
            "observed",
            "predicted",
            "fused",
            "is_prediction",
            "drift_flag",
        ])
        .map_err(map)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.timestamp.to_string(),
                opt(s.observed),
                opt(s.predicted),
                s.fused.to_string(),
                s.is_prediction.to_string(),
                s.drift_flag.to_string(),
            ])
            .map_err(map)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_events(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.drift_events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Live copy of the reconstruction module plus its drift machinery.
struct Adaptation<'a> {
    live: Dam,
    pretrained: &'a Dam,
    state: DriftState,
    mask: Vec<bool>,
    opt: AdaptiveOpt,
    dam_cfg: DamConfig,
    grid: SplineGrid,
    reset_kind: PrivateReset,
    seed: u64,
    resets: usize,
    lr: f64,
    ema_lambda: f64,
    radius: f64,
    beta_drift: f64,
}

impl<'a> Adaptation<'a> {
    fn new(model: &'a Model) -> Result<Option<Self>> {
        let (Some(dam), Some(state)) = (&model.dam, &model.drift) else {
            return Ok(None);
        };
        let cfg = &model.config;
        let mut state = state.clone();
        state.restart();
        let mask = mask_by_prefix(dam, &["private.", "memory"]);
        let opt = AdaptiveOpt::new(
            gather(dam, &mask),
            cfg.dam_online_lr,
            0.0,
            cfg.ema_lambda,
            cfg.online_radius,
        )?;
        Ok(Some(Adaptation {
            live: dam.clone(),
            pretrained: dam,
            state,
            mask,
            opt,
            dam_cfg: cfg.dam_config(model.features.width()),
            grid: cfg.grid()?,
            reset_kind: cfg.private_reset,
            seed: cfg.seed,
            resets: 0,
            lr: cfg.dam_online_lr,
            ema_lambda: cfg.ema_lambda,
            radius: cfg.online_radius,
            beta_drift: cfg.momentum_beta_drift,
        }))
    }

    fn row(&self, features: &Mat) -> Result<(f64, Vec<f64>)> {
        let x = Mat::from_vec(1, features.as_slice().len(), features.as_slice().to_vec());
        let (out, _) = self.live.forward(&x)?;
        Ok((out.row_losses[0], out.query.row(0).to_vec()))
    }

    fn stack(buffer: &RingBuffer<BufferItem>) -> Mat {
        let width = buffer
            .iter()
            .next()
            .map_or(0, |b| b.features.as_slice().len());
        let mut data = Vec::with_capacity(buffer.len() * width);
        for b in buffer.iter() {
            data.extend_from_slice(b.features.as_slice());
        }
        Mat::from_vec(buffer.len(), width, data)
    }

    fn refresh_losses(&self, buffer: &mut RingBuffer<BufferItem>) -> Result<()> {
        let (out, _) = self.live.forward(&Self::stack(buffer))?;
        for (b, l) in buffer.iter_mut().zip(out.row_losses) {
            b.row_loss = l;
        }
        Ok(())
    }

    /// Shared stack from the checkpoint, private stack per `reset_kind`,
    /// memory cleared, fresh optimizer in drift mode.
    fn reset(&mut self) -> Result<()> {
        self.resets += 1;
        self.live.shared = self.pretrained.shared.clone();
        self.live.private = match self.reset_kind {
            PrivateReset::Pretrained => self.pretrained.private.clone(),
            PrivateReset::Seeded => {
                let mut rng = derived_rng(self.seed, &format!("dam-reset-{}", self.resets));
                Dam::init(&self.dam_cfg, &self.grid, &mut rng)?.private
            }
        };
        if let Some(m) = self.live.memory.as_mut() {
            m.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        self.opt = AdaptiveOpt::new(
            gather(&self.live, &self.mask),
            self.lr,
            self.beta_drift,
            self.ema_lambda,
            self.radius,
        )?;
        Ok(())
    }

    fn adapt(&mut self, buffer: &RingBuffer<BufferItem>) -> Result<()> {
        let x = Self::stack(buffer);
        let mut grads = zeros_like(&self.live);
        self.live.loss_grad(&x, &mut grads)?;
        let mut theta = gather(&self.live, &self.mask);
        self.opt.step(&mut theta, &gather(&grads, &self.mask))?;
        scatter(&mut self.live, &self.mask, &theta);
        Ok(())
    }
}

fn head_values(head: &FeedForward, pooled: &Mat) -> Vec<f64> {
    let (y, _) = head.forward_batch(pooled);
    y.as_slice().to_vec()
}

/// One projected EMA step of the head on the buffer; returns the max error
/// over the buffer before and after, in value units.
fn head_step(
    head: &mut FeedForward,
    mask: &[bool],
    opt: &mut AdaptiveOpt,
    buffer: &RingBuffer<BufferItem>,
    model: &Model,
) -> Result<(f64, f64, f64)> {
    let b = buffer.len();
    let d = buffer.iter().next().map_or(0, |i| i.pooled.len());
    let mut pooled = Mat::zeros(b, d);
    for (r, item) in buffer.iter().enumerate() {
        pooled.row_mut(r).copy_from_slice(&item.pooled);
    }
    let max_err = |ys: &[f64]| {
        buffer
            .iter()
            .zip(ys)
            .map(|(item, &z)| (model.target.decode(z, item.anchor) - item.fused).abs())
            .fold(0.0f64, f64::max)
    };
    let (y, cache) = head.forward_batch(&pooled);
    let before = max_err(y.as_slice());
    let mut gy = Mat::zeros(b, 1);
    for (r, item) in buffer.iter().enumerate() {
        let t = model.target.encode(item.fused, item.anchor);
        gy.set(r, 0, 2.0 * (y.get(r, 0) - t) / b as f64);
    }
    let mut grads = zeros_like(head);
    head.backward_batch(&cache, &gy, &mut grads);
    let mut theta = gather(head, mask);
    let g = gather(&grads, mask);
    let g_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    opt.step(&mut theta, &g)?;
    scatter(head, mask, &theta);
    let after = max_err(&head_values(head, &pooled));
    Ok((before, after, g_norm))
}

fn scope_mask(head: &FeedForward, scope: AdaptScope) -> Vec<bool> {
    let names: Vec<String> = head.tensors().iter().map(|t| t.name.clone()).collect();
    let last = names
        .last()
        .and_then(|n| n.split('.').next())
        .unwrap_or("")
        .to_string();
    names
        .iter()
        .map(|n| match scope {
            AdaptScope::Head => true,
            AdaptScope::LastLayer => n.starts_with(&format!("{last}.")),
            AdaptScope::OutputBias => *n == format!("{last}.bias"),
        })
        .collect()
}

fn lipschitz_estimate(head: &FeedForward, buffer: &RingBuffer<BufferItem>, model: &Model) -> f64 {
    let items: Vec<&BufferItem> = buffer.iter().collect();
    if items.len() < 2 {
        return 0.0;
    }
    let d = items[0].pooled.len();
    let mut pooled = Mat::zeros(items.len(), d);
    for (r, item) in items.iter().enumerate() {
        pooled.row_mut(r).copy_from_slice(&item.pooled);
    }
    let g: Vec<f64> = head_values(head, &pooled)
        .iter()
        .zip(&items)
        .map(|(&z, item)| model.target.decode(z, item.anchor))
        .collect();
    let mut rng = derived_rng(model.config.seed, "lipschitz");
    let mut best: f64 = 0.0;
    for _ in 0..256 {
        let a = rng.random_range(0..items.len());
        let b = rng.random_range(0..items.len());
        if a == b {
            continue;
        }
        let dist = items[a]
            .features
            .as_slice()
            .iter()
            .zip(items[b].features.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        if dist > 0.0 {
            best = best.max((g[a] - g[b]).abs() / dist);
        }
    }
    best
}

fn run_loop(model: &Model, timestamps: &[f64], observed: &[f64]) -> Result<ReconstructionResult> {
    let cfg = &model.config;
    let n = cfg.window;
    let m = observed.len();
    let total = timestamps.len();
    let feat: Featurizer = model.featurizer();
    let schedule = FusionSchedule::from_config(cfg)?;

    let mut series: Vec<f64> = observed.to_vec();
    series.reserve(total - m);
    let mut steps = Vec::with_capacity(total);
    for j in 0..n {
        steps.push(StepRecord {
            step: j,
            timestamp: timestamps[j],
            observed: Some(observed[j]),
            predicted: None,
            fused: observed[j],
            is_prediction: false,
            drift_flag: false,
        });
    }

    let mut state = OnlineState::new(cfg.buffer, model.delta0);
    let mut head = model.hla.head.clone();
    let mask = scope_mask(&head, cfg.adapt_scope);
    let mut opt = AdaptiveOpt::new(
        gather(&head, &mask),
        cfg.online_lr,
        0.0,
        cfg.ema_lambda,
        cfg.online_radius,
    )?;
    let mut adaptation = Adaptation::new(model)?;
    let mut events = Vec::new();
    let mut armed_from = None;
    let mut betas = Vec::new();
    let mut observed_abs_error = 0.0;
    let mut grad_bound: f64 = 0.0;

    for j in n..total {
        state.position = j;
        let x = feat.scaled(&timestamps[j - n..j], &series[j - n..j])?;
        let (pooled, _) = model.hla.encode(&x, None);
        let anchor = series[j - 1];
        let z = head_values(&head, &Mat::from_vec(1, pooled.len(), pooled.clone()))[0];
        let y_hat = model.target.decode(z, anchor);
        if !y_hat.is_finite() {
            return Err(Error::non_finite(format!("prediction at step {j}")));
        }
        let in_obs = j < m;
        let y_obs = in_obs.then(|| observed[j]);
        let beta = schedule.beta(j, m);
        betas.push(beta);
        let fused = if cfg.fusion {
            fusion_target(beta, y_hat, y_obs, in_obs)?
        } else {
            y_hat
        };
        if let Some(y) = y_obs {
            observed_abs_error += (y_hat - y).abs();
        } else {
            series.push(y_hat);
        }

        let (row_loss, query) = match &adaptation {
            Some(a) => {
                let (l, q) = a.row(&x)?;
                (l, Some(q))
            }
            None => (0.0, None),
        };
        state.buffer.push(BufferItem {
            features: x,
            pooled,
            anchor,
            fused,
            row_loss,
        });

        let mut flag = false;
        let mut reset = false;
        if state.buffer.is_full() {
            armed_from.get_or_insert(j);
            if let (Some(a), Some(q)) = (adaptation.as_mut(), query) {
                let l_rec = state.buffer.iter().map(|b| b.row_loss).sum::<f64>()
                    / state.buffer.len() as f64;
                let verdict = a.state.observe(&q, l_rec)?;
                flag = verdict.drift;
                let action = match a.state.advance(verdict.drift) {
                    Transition::EnteredDrift => {
                        a.reset()?;
                        a.refresh_losses(&mut state.buffer)?;
                        opt.momentum_beta = cfg.momentum_beta_drift;
                        opt.reset_ema();
                        reset = true;
                        "reset"
                    }
                    Transition::Recovered => {
                        opt.momentum_beta = 0.0;
                        "recover"
                    }
                    Transition::None if a.state.mode == Mode::Drift => {
                        a.adapt(&state.buffer)?;
                        a.refresh_losses(&mut state.buffer)?;
                        "adapt"
                    }
                    Transition::None => "none",
                };
                if flag || action != "none" {
                    events.push(DriftEvent {
                        step: j,
                        l_rec,
                        divergence: verdict.divergence,
                        tau: a.state.tau,
                        eps_rec: a.state.eps_rec,
                        action: action.to_string(),
                    });
                }
            }
        }
        if (state.buffer.is_full() || cfg.adapt_early) && !reset && cfg.online_adapt {
            let (before, after, g_norm) =
                head_step(&mut head, &mask, &mut opt, &state.buffer, model)?;
            grad_bound = grad_bound.max(g_norm);
            state.record(before - after, after - before);
        } else {
            state.record(0.0, 0.0);
        }

        steps.push(StepRecord {
            step: j,
            timestamp: timestamps[j],
            observed: y_obs,
            predicted: Some(y_hat),
            fused,
            is_prediction: !in_obs,
            drift_flag: flag,
        });
    }

    let lipschitz = lipschitz_estimate(&head, &state.buffer, model);
    let mut bound_trace = Vec::with_capacity(betas.len());
    let mut acc = 0.0;
    for (i, beta) in betas.iter().enumerate() {
        acc += (1.0 + beta) * lipschitz * state.delta[i];
        bound_trace.push(acc);
    }

    Ok(ReconstructionResult {
        curve: series,
        observed_len: m,
        steps,
        drift_events: events,
        armed_from,
        delta: state.delta,
        gains: state.gains,
        lipschitz,
        bound_trace,
        observed_abs_error,
        grad_bound,
    })
}

/// Reconstructs a curve of `timestamps.len()` samples from an observed prefix.
pub fn reconstruct(
    model: &Model,
    timestamps: &[f64],
    prefix: &[f64],
) -> Result<ReconstructionResult> {
    let n = model.config.window;
    if prefix.len() < n {
        return Err(Error::Precondition(format!(
            "insufficient prefix: {} observed samples, the window needs {n}",
            prefix.len()
        )));
    }
    if timestamps.len() < prefix.len() {
        return Err(Error::Precondition(format!(
            "target length {} is shorter than the observed prefix {}",
            timestamps.len(),
            prefix.len()
        )));
    }
    if timestamps.windows(2).any(|w| w[1] <= w[0]) || timestamps.iter().any(|t| !t.is_finite()) {
        return Err(Error::Data(
            "timestamps must be finite and strictly increasing".into(),
        ));
    }
    if let Some(i) = prefix.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "observed value at step {i} is not finite"
        )));
    }
    run_loop(model, timestamps, prefix)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRunReport {
    pub seed: u64,
    pub t_star: Option<usize>,
    pub window: usize,
    pub armed_from: Option<usize>,
    /// Armed tests before the switch (all armed tests without one).
    pub armed_before: usize,
    pub false_positives: usize,
    pub false_positive_rate: f64,
    pub flagged_steps: Vec<usize>,
    /// First flag in `[t*, t* + window]`.
    pub detection_step: Option<usize>,
    pub delay: Option<usize>,
    pub detected: bool,
}

/// Streams a fully observed synthetic curve through the loop and scores the
/// per-step drift verdicts against the known switch.
pub fn simulate_drift_run(
    model: &Model,
    spec: &SyntheticCurveSpec,
    seed: u64,
) -> Result<(DriftRunReport, ReconstructionResult)> {
    if model.dam.is_none() {
        return Err(Error::Precondition(
            "drift simulation needs the adaptation module".into(),
        ));
    }
    let curve = generate_curve(spec, seed)?;
    if curve.len() <= model.config.window {
        return Err(Error::Precondition(
            "simulated stream is shorter than the window".into(),
        ));
    }
    let result = run_loop(model, &curve.timestamps, &curve.values)?;
    let window = model.config.drift_window;
    let t_star = spec.drift.map(|d| d.step);
    let flagged: Vec<usize> = result
        .steps
        .iter()
        .filter(|s| s.drift_flag)
        .map(|s| s.step)
        .collect();
    let limit = t_star.unwrap_or(curve.len());
    let armed_before = result.armed_from.map_or(0, |a| limit.saturating_sub(a));
    let false_positives = flagged.iter().filter(|&&s| s < limit).count();
    let detection_step =
        t_star.and_then(|t| flagged.iter().copied().find(|&s| s >= t && s <= t + window));
    let report = DriftRunReport {
        seed,
        t_star,
        window,
        armed_from: result.armed_from,
        armed_before,
        false_positives,
        false_positive_rate: if armed_before > 0 {
            false_positives as f64 / armed_before as f64
        } else {
            0.0
        },
        flagged_steps: flagged,
        detection_step,
        delay: detection_step.zip(t_star).map(|(d, t)| d - t),
        detected: detection_step.is_some(),
    };
    Ok((report, result))
}
