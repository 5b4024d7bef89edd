//! Flat run configuration, `--set` overrides, and the ablation switch table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dam::{DamConfig, KlMode};
use crate::data::{DriftSwitch, SuiteSpec};
use crate::dense::BlockKind;
use crate::error::{Error, Result};
use crate::hla::HlaConfig;
use crate::kan::SplineGrid;
use crate::mdfe::{FeatureConfig, PeriodConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaShape {
    Linear,
    Sigmoid,
}

/// Which head parameters the online step may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptScope {
    Head,
    LastLayer,
    OutputBias,
}

/// What the private stack is restored to when drift resets the module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrivateReset {
    /// The pretrained weights.
    Pretrained,
    /// A fresh draw from the seeded initializer.
    Seeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Window length in samples.
    pub window: usize,
    /// Buffer capacity for online adaptation and reconstruction loss.
    pub buffer: usize,
    pub lookback_fraction: f64,

    pub periodic: bool,
    pub period_count: usize,
    /// Bin width of the first period in seconds; `None` uses the median sample interval.
    pub period_length: Option<f64>,
    pub period_bins: usize,
    pub frequency: bool,
    pub deriv_orders: usize,

    pub micro: bool,
    pub medium: bool,
    pub macro_attention: bool,
    pub channels: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub head_units: usize,
    pub head_kind: BlockKind,
    pub spline_basis: usize,
    pub spline_degree: usize,
    pub spline_lo: f64,
    pub spline_hi: f64,
    /// Predict the step-to-step increment instead of the level.
    pub predict_increment: bool,

    pub dam: bool,
    pub dam_kind: BlockKind,
    pub memory: bool,
    pub decoder_kind: BlockKind,
    pub shared_width: usize,
    pub shared_layers: usize,
    pub embed: usize,
    pub slots: usize,
    pub mem_width: usize,
    pub private_width: usize,
    pub private_layers: usize,
    pub decoder_layers: usize,

    pub lr: f64,
    pub batch: usize,
    pub conv_l2: f64,
    pub epochs: usize,
    pub train_stride: usize,
    pub dam_lr: f64,
    pub dam_epochs: usize,
    /// Share of training curves held out to calibrate the drift thresholds.
    pub calibration_fraction: f64,

    pub fusion: bool,
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta_shape: BetaShape,

    pub alpha: f64,
    pub drift_window: usize,
    pub eps_rec_quantile: f64,
    pub momentum_beta_drift: f64,
    pub kl_dims: usize,
    pub kl_mode: KlMode,
    pub kl_stride: usize,
    pub private_reset: PrivateReset,

    pub online_adapt: bool,
    pub adapt_scope: AdaptScope,
    /// Adapt from the first buffered window instead of waiting for a full buffer.
    pub adapt_early: bool,
    pub online_lr: f64,
    pub ema_lambda: f64,
    pub online_radius: f64,
    pub dam_online_lr: f64,

    pub folds: usize,
    pub fold_seeds: Vec<u64>,

    pub suite: SuiteSpec,
    pub drift: Option<DriftSwitch>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            window: 50,
            buffer: 50,
            lookback_fraction: 0.45,
            periodic: true,
            period_count: 1,
            period_length: None,
            period_bins: 60,
            frequency: true,
            deriv_orders: 4,
            micro: true,
            medium: true,
            macro_attention: true,
            channels: 64,
            kernel: 3,
            hidden: 64,
            heads: 4,
            dropout: 0.1,
            head_units: 64,
            head_kind: BlockKind::Kan,
            spline_basis: 8,
            spline_degree: 3,
            spline_lo: -3.0,
            spline_hi: 3.0,
            predict_increment: true,
            dam: true,
            dam_kind: BlockKind::Kan,
            memory: true,
            decoder_kind: BlockKind::Mlp,
            shared_width: 256,
            shared_layers: 3,
            embed: 64,
            slots: 64,
            mem_width: 128,
            private_width: 128,
            private_layers: 3,
            decoder_layers: 3,
            lr: 1e-3,
            batch: 64,
            conv_l2: 1e-5,
            epochs: 30,
            train_stride: 1,
            dam_lr: 1e-3,
            dam_epochs: 20,
            calibration_fraction: 0.25,
            fusion: true,
            beta_min: 0.1,
            beta_max: 0.9,
            beta_shape: BetaShape::Linear,
            alpha: 0.01,
            drift_window: 100,
            eps_rec_quantile: 0.99,
            momentum_beta_drift: 0.27,
            kl_dims: 8,
            kl_mode: KlMode::MeanShift,
            kl_stride: 5,
            private_reset: PrivateReset::Pretrained,
            online_adapt: true,
            adapt_scope: AdaptScope::Head,
            adapt_early: false,
            online_lr: 0.05,
            ema_lambda: 0.1,
            online_radius: 1.0,
            dam_online_lr: 1e-3,
            folds: 5,
            fold_seeds: vec![42, 43, 44, 45, 46],
            suite: SuiteSpec::default(),
            drift: None,
        }
    }
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            count: 20,
            length: 300,
            sample_interval: 1.0,
            amplitude: (40.0, 80.0),
            rate: (0.04, 0.08),
            onset: (40.0, 80.0),
            noise_fraction: 0.02,
            rhythm_fraction: 0.03,
            rhythm_period: 60.0,
        }
    }
}

/// Names of the twelve ablation rows, indexed from 1.
pub const ABLATION_ROWS: [&str; 12] = [
    "full model",
    "frequency operator off",
    "periodic operator off",
    "medium and macro blocks off",
    "medium block off",
    "macro block off",
    "MLP prediction head",
    "memory matrix off",
    "MLP adaptation stacks",
    "MLP adaptation stacks, memory off",
    "adaptation module off",
    "fusion off",
];

impl RunConfig {
    /// Reads TOML; unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides. Values are parsed as JSON, falling back
    /// to a bare string; dotted keys reach into tables.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        for set in sets {
            let set = set.as_ref();
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{set}' is not key=value")))?;
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut value;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = slot
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("'{key}' does not name a table entry")))?;
                if i + 1 == parts.len() {
                    if !obj.contains_key(*part) {
                        return Err(Error::Config(format!("unknown config key '{key}'")));
                    }
                    obj.insert(part.to_string(), parsed.clone());
                    break;
                }
                slot = obj
                    .get_mut(*part)
                    .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
                if slot.is_null() {
                    return Err(Error::Config(format!("'{key}': parent is unset")));
                }
            }
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the switch pattern of ablation row `row` (1–12).
    pub fn ablate(&self, row: usize) -> Result<Self> {
        let mut c = self.clone();
        match row {
            1 => {}
            2 => c.frequency = false,
            3 => c.periodic = false,
            4 => {
                c.medium = false;
                c.macro_attention = false;
            }
            5 => c.medium = false,
            6 => c.macro_attention = false,
            7 => c.head_kind = BlockKind::Mlp,
            8 => c.memory = false,
            9 => c.dam_kind = BlockKind::Mlp,
            10 => {
                c.dam_kind = BlockKind::Mlp;
                c.memory = false;
            }
            11 => {
                c.dam = false;
                c.memory = false;
            }
            12 => c.fusion = false,
            _ => {
                return Err(Error::Config(format!(
                    "ablation row must be 1-12, got {row}"
                )))
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.window < 2 {
            return fail(format!("window must be at least 2, got {}", self.window));
        }
        if self.buffer == 0 {
            return fail("buffer must be positive".into());
        }
        if !(self.lookback_fraction > 0.0 && self.lookback_fraction < 1.0) {
            return fail(format!(
                "lookback_fraction must lie in (0,1), got {}",
                self.lookback_fraction
            ));
        }
        if self.periodic && (self.period_count == 0 || self.period_bins == 0) {
            return fail("periodic features need period_count and period_bins above zero".into());
        }
        if let Some(p) = self.period_length {
            if !(p > 0.0) {
                return fail("period_length must be positive".into());
            }
        }
        if self.frequency && self.deriv_orders == 0 {
            return fail("frequency features need deriv_orders above zero".into());
        }
        if !(0.0 < self.beta_min && self.beta_min < self.beta_max && self.beta_max < 1.0) {
            return fail(format!(
                "fusion weights need 0 < beta_min < beta_max < 1, got {} and {}",
                self.beta_min, self.beta_max
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0,1), got {}", self.alpha));
        }
        if !(self.eps_rec_quantile > 0.0 && self.eps_rec_quantile <= 1.0) {
            return fail("eps_rec_quantile must lie in (0,1]".into());
        }
        if !(self.ema_lambda > 0.0 && self.ema_lambda <= 1.0) {
            return fail("ema_lambda must lie in (0,1]".into());
        }
        if !(self.online_lr > 0.0 && self.online_radius > 0.0 && self.dam_online_lr > 0.0) {
            return fail("online rates and radius must be positive".into());
        }
        if self.momentum_beta_drift < 0.0 {
            return fail("momentum_beta_drift must be non-negative".into());
        }
        if !(self.lr > 0.0 && self.dam_lr > 0.0) || self.batch == 0 || self.train_stride == 0 {
            return fail("learning rates, batch and stride must be positive".into());
        }
        if !(0.0..1.0).contains(&self.calibration_fraction) {
            return fail("calibration_fraction must lie in [0,1)".into());
        }
        if self.dam
            && (self.shared_layers == 0 || self.private_layers == 0 || self.decoder_layers == 0)
        {
            return fail("adaptation stacks need at least one layer each".into());
        }
        if self.drift_window < 2 || self.kl_dims == 0 || self.kl_stride == 0 {
            return fail("drift_window must be at least 2, kl_dims and kl_stride positive".into());
        }
        if self.folds == 0 {
            return fail("folds must be positive".into());
        }
        if self.macro_attention && self.encoder_width() % self.heads.max(1) != 0 {
            return fail(format!(
                "attention width {} is not divisible by {} heads",
                self.encoder_width(),
                self.heads
            ));
        }
        self.grid()?;
        Ok(())
    }

    fn encoder_width(&self) -> usize {
        if self.medium {
            self.hidden
        } else if self.micro {
            self.channels
        } else {
            self.feature_config(1.0).map(|f| f.width()).unwrap_or(2)
        }
    }

    pub fn grid(&self) -> Result<SplineGrid> {
        SplineGrid::clamped_uniform(
            self.spline_degree,
            self.spline_basis,
            self.spline_lo,
            self.spline_hi,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    /// Feature layout given the sampling interval used for phase bins.
    pub fn feature_config(&self, interval: f64) -> Result<FeatureConfig> {
        let periods = if self.periodic {
            let base = self.period_length.unwrap_or(interval);
            let list = (0..self.period_count)
                .map(|i| crate::mdfe::Period {
                    length: base * (i + 1) as f64,
                    bins: self.period_bins,
                })
                .collect();
            Some(PeriodConfig::new(list).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            None
        };
        Ok(FeatureConfig {
            periods,
            orders: if self.frequency { self.deriv_orders } else { 0 },
        })
    }

    pub fn hla_config(&self, feature_dim: usize) -> HlaConfig {
        HlaConfig {
            feature_dim,
            channels: self.channels,
            kernel: self.kernel,
            hidden: self.hidden,
            heads: self.heads,
            dropout: self.dropout,
            head_units: self.head_units,
            head_kind: self.head_kind,
            micro: self.micro,
            medium: self.medium,
            macro_attention: self.macro_attention,
        }
    }

    pub fn dam_config(&self, feature_dim: usize) -> DamConfig {
        DamConfig {
            input_dim: self.window * feature_dim,
            shared: vec![self.shared_width; self.shared_layers],
            embed: self.embed,
            slots: self.slots,
            combine: self.mem_width,
            private: vec![self.private_width; self.private_layers],
            decoder: vec![self.private_width; self.decoder_layers - 1],
            block_kind: self.dam_kind,
            decoder_kind: self.decoder_kind,
            memory: self.memory,
        }
    }

    /// A reduced configuration that keeps every component and trains in a
    /// few minutes on one core.
    pub fn compact() -> Self {
        RunConfig {
            channels: 16,
            hidden: 16,
            heads: 2,
            head_units: 16,
            shared_width: 32,
            embed: 16,
            slots: 16,
            mem_width: 32,
            private_width: 32,
            lr: 3e-3,
            epochs: 40,
            dam_epochs: 10,
            kl_dims: 2,
            ..RunConfig::default()
        }
    }
}
