//! Offline pretraining and the online reconstruction loop.

pub mod online;
mod pretrain;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dam::{Dam, DriftState};
use crate::error::{Error, Result};
use crate::hla::Hla;
use crate::linalg::{median, Mat};
use crate::mdfe::{
    assemble_with, FeatureConfig, FeatureMatrix, FeatureScaler, SampleWindow, SpectralPlan,
};

pub use online::{
    fusion_target, reconstruct, simulate_drift_run, update_delta, DriftEvent, DriftRunReport,
    FusionSchedule, OnlineState, ReconstructionResult, RingBuffer, StepRecord,
};
pub use pretrain::{calibrate_drift, pretrain, PretrainReport};

/// How the head's scalar output maps back to a value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    /// The head predicts `next − last` rather than `next`.
    pub increment: bool,
    pub mean: f64,
    pub std: f64,
}

impl TargetScale {
    pub fn encode(&self, value: f64, anchor: f64) -> f64 {
        let raw = if self.increment {
            value - anchor
        } else {
            value
        };
        (raw - self.mean) / self.std
    }

    pub fn decode(&self, z: f64, anchor: f64) -> f64 {
        let raw = z * self.std + self.mean;
        if self.increment {
            anchor + raw
        } else {
            raw
        }
    }
}

/// Everything needed to run the online loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: RunConfig,
    pub features: FeatureConfig,
    pub scaler: FeatureScaler,
    pub target: TargetScale,
    pub hla: Hla,
    pub dam: Option<Dam>,
    pub drift: Option<DriftState>,
    /// Largest absolute one-step error over the training windows.
    pub delta0: f64,
}

/// Builds standardized feature blocks for one model.
#[derive(Debug, Clone)]
pub struct Featurizer {
    cfg: FeatureConfig,
    scaler: FeatureScaler,
    plan: SpectralPlan,
}

impl Featurizer {
    pub fn new(cfg: FeatureConfig, scaler: FeatureScaler, window: usize) -> Self {
        Featurizer {
            cfg,
            scaler,
            plan: SpectralPlan::new(window),
        }
    }

    pub fn raw(&self, timestamps: &[f64], values: &[f64]) -> Result<FeatureMatrix> {
        let w = SampleWindow::new(timestamps.to_vec(), values.to_vec())?;
        Ok(assemble_with(&w, &self.cfg, &self.plan))
    }

    pub fn scaled(&self, timestamps: &[f64], values: &[f64]) -> Result<Mat> {
        let mut f = self.raw(timestamps, values)?;
        self.scaler.apply(&mut f);
        Ok(f.data)
    }
}

impl Model {
    pub fn featurizer(&self) -> Featurizer {
        Featurizer::new(
            self.features.clone(),
            self.scaler.clone(),
            self.config.window,
        )
    }

    /// One-step prediction of the value following `values`.
    pub fn predict_next(
        &self,
        featurizer: &Featurizer,
        timestamps: &[f64],
        values: &[f64],
    ) -> Result<f64> {
        let x = featurizer.scaled(timestamps, values)?;
        let z = self.hla.predict(&x)?;
        Ok(self
            .target
            .decode(z, *values.last().expect("non-empty window")))
    }
}

/// Median spacing over all curves' timestamps.
pub(crate) fn median_interval<'a, I: IntoIterator<Item = &'a [f64]>>(series: I) -> Result<f64> {
    let diffs: Vec<f64> = series
        .into_iter()
        .flat_map(|ts| ts.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>())
        .collect();
    if diffs.is_empty() {
        return Err(Error::Data("cannot infer a sampling interval".into()));
    }
    Ok(median(&diffs))
}
