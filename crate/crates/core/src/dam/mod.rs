//! Reconstruction-based drift detection and adaptation.

pub mod adapt;
pub mod drift;
pub mod model;

pub use adapt::{AdaptiveOpt, StepOutcome};
pub use drift::{DriftBaseline, DriftState, KlMode, Mode, Transition, Verdict};
pub use model::{Dam, DamConfig, DamOutput};
