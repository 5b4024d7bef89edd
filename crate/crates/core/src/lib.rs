pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dam;
pub mod data;
pub mod dense;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod evaluate;
pub mod hla;
pub mod kan;
pub mod linalg;
pub mod mdfe;
pub mod metrics;
pub mod params;
pub mod theory;

pub use error::{Error, Result};
