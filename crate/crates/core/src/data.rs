//! Synthetic clot-strength curves, CSV ingestion, and subject-level folds.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::seeded_rng;

/// A time series with an optional subject label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub subject_id: Option<String>,
    pub timestamps: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn label(&self) -> &str {
        self.subject_id.as_deref().unwrap_or("?")
    }
}

/// Parameters switched to at `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSwitch {
    pub step: usize,
    pub amplitude: f64,
    pub rate: f64,
    pub onset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCurveSpec {
    pub amplitude: f64,
    pub rate: f64,
    pub onset: f64,
    pub noise_sigma: f64,
    pub length: usize,
    pub sample_interval: f64,
    /// Amplitude of an additive `sin(2πt / rhythm_period)` term (0 disables it).
    #[serde(default)]
    pub rhythm_amplitude: f64,
    #[serde(default = "default_rhythm_period")]
    pub rhythm_period: f64,
    #[serde(default)]
    pub drift: Option<DriftSwitch>,
}

fn default_rhythm_period() -> f64 {
    60.0
}

impl SyntheticCurveSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.amplitude > 0.0) {
            return bad("amplitude must be positive");
        }
        if !(self.rate > 0.0) {
            return bad("rate must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative");
        }
        if self.length < 2 {
            return bad("curve length must be at least 2");
        }
        if !(self.sample_interval > 0.0) {
            return bad("sample interval must be positive");
        }
        if !(self.rhythm_period > 0.0) {
            return bad("rhythm period must be positive");
        }
        if let Some(d) = &self.drift {
            if !(d.amplitude > 0.0 && d.rate > 0.0) {
                return bad("drift amplitude and rate must be positive");
            }
        }
        Ok(())
    }

    /// Noise-free value at step `i`.
    pub fn clean_value(&self, i: usize) -> f64 {
        let t = i as f64 * self.sample_interval;
        let (a, k, t0) = match &self.drift {
            Some(d) if i >= d.step => (d.amplitude, d.rate, d.onset),
            _ => (self.amplitude, self.rate, self.onset),
        };
        let rhythm = self.rhythm_amplitude * (std::f64::consts::TAU * t / self.rhythm_period).sin();
        a / (1.0 + (-k * (t - t0)).exp()) + rhythm
    }
}

/// `y(t) = A / (1 + exp(−k(t − t0))) + rhythm + N(0, σ²)`, deterministic per seed.
pub fn generate_curve(spec: &SyntheticCurveSpec, seed: u64) -> Result<Curve> {
    spec.validate()?;
    let mut rng = seeded_rng(seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let timestamps: Vec<f64> = (0..spec.length)
        .map(|i| i as f64 * spec.sample_interval)
        .collect();
    let values = (0..spec.length)
        .map(|i| {
            let eps = noise.sample(&mut rng);
            spec.clean_value(i) + eps
        })
        .collect();
    Ok(Curve {
        subject_id: None,
        timestamps,
        values,
    })
}

/// Ranges the per-curve parameters are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub count: usize,
    pub length: usize,
    pub sample_interval: f64,
    pub amplitude: (f64, f64),
    pub rate: (f64, f64),
    pub onset: (f64, f64),
    /// Noise standard deviation as a fraction of each curve's amplitude.
    pub noise_fraction: f64,
    /// Rhythm amplitude as a fraction of each curve's amplitude.
    pub rhythm_fraction: f64,
    pub rhythm_period: f64,
}

impl SuiteSpec {
    /// Draws the parameters for curve `index` (deterministic in `seed`).
    pub fn curve_spec(&self, seed: u64, index: usize) -> SyntheticCurveSpec {
        let mut rng = seeded_rng(seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
        let draw = |rng: &mut crate::params::SeededRng, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let amplitude = draw(&mut rng, self.amplitude);
        let rate = draw(&mut rng, self.rate);
        let onset = draw(&mut rng, self.onset);
        SyntheticCurveSpec {
            amplitude,
            rate,
            onset,
            noise_sigma: self.noise_fraction * amplitude,
            length: self.length,
            sample_interval: self.sample_interval,
            rhythm_amplitude: self.rhythm_fraction * amplitude,
            rhythm_period: self.rhythm_period,
            drift: None,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<Curve>> {
        (0..self.count)
            .map(|i| {
                let spec = self.curve_spec(seed, i);
                let mut c = generate_curve(&spec, seed.wrapping_add(7919 * (i as u64 + 1)))?;
                c.subject_id = Some(format!("S{i:03}"));
                Ok(c)
            })
            .collect()
    }
}

fn data_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::DataAt {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads `time,value[,subject_id]`. Line numbers in errors are 1-based and
/// count the header.
pub fn load_csv(path: &Path) -> Result<Curve> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| data_err(path, 1, e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (ti, vi) = match (col("time"), col("value")) {
        (Some(t), Some(v)) => (t, v),
        _ => return Err(data_err(path, 1, "header must contain 'time' and 'value'")),
    };
    let si = col("subject_id");
    let mut curve = Curve {
        subject_id: None,
        timestamps: Vec::new(),
        values: Vec::new(),
    };
    for (idx, rec) in reader.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| data_err(path, line, e.to_string()))?;
        let field = |i: usize, what: &str| -> Result<f64> {
            let raw = rec
                .get(i)
                .ok_or_else(|| data_err(path, line, format!("missing {what}")))?;
            let v: f64 = raw
                .parse()
                .map_err(|_| data_err(path, line, format!("cannot parse {what} '{raw}'")))?;
            if !v.is_finite() {
                return Err(data_err(path, line, format!("non-finite {what} '{raw}'")));
            }
            Ok(v)
        };
        let t = field(ti, "time")?;
        let v = field(vi, "value")?;
        if let Some(&prev) = curve.timestamps.last() {
            if t <= prev {
                return Err(data_err(
                    path,
                    line,
                    format!("time {t} does not increase (previous {prev})"),
                ));
            }
        }
        if let Some(s) = si.and_then(|i| rec.get(i)) {
            match &curve.subject_id {
                None => curve.subject_id = Some(s.to_string()),
                Some(prev) if prev != s => {
                    return Err(data_err(
                        path,
                        line,
                        format!("subject '{s}' differs from '{prev}'"),
                    ));
                }
                _ => {}
            }
        }
        curve.timestamps.push(t);
        curve.values.push(v);
    }
    Ok(curve)
}

/// Writes `time,value[,subject_id]` with shortest round-trip formatting.
pub fn save_csv(curve: &Curve, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let map = |e: csv::Error| Error::Data(e.to_string());
    match &curve.subject_id {
        Some(s) => {
            w.write_record(["time", "value", "subject_id"])
                .map_err(map)?;
            for (t, v) in curve.timestamps.iter().zip(&curve.values) {
                w.write_record([t.to_string(), v.to_string(), s.clone()])
                    .map_err(map)?;
            }
        }
        None => {
            w.write_record(["time", "value"]).map_err(map)?;
            for (t, v) in curve.timestamps.iter().zip(&curve.values) {
                w.write_record([t.to_string(), v.to_string()])
                    .map_err(map)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub path: PathBuf,
}

/// Curves by subject plus an optional fold assignment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub curves: Vec<ManifestEntry>,
    #[serde(default)]
    pub folds: BTreeMap<String, Vec<String>>,
}

impl DatasetManifest {
    /// Reads a manifest; relative curve paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for c in &mut m.curves {
            if c.path.is_relative() {
                c.path = base.join(&c.path);
            }
        }
        Ok(m)
    }

    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<String> = self.curves.iter().map(|c| c.subject_id.clone()).collect();
        set.into_iter().collect()
    }

    pub fn load_curves(&self) -> Result<Vec<Curve>> {
        self.curves
            .iter()
            .map(|e| {
                let mut c = load_csv(&e.path)?;
                c.subject_id = Some(e.subject_id.clone());
                Ok(c)
            })
            .collect()
    }
}

/// Reads a fold file `{"fold_1": ["A4", "A9"], …}`.
pub fn load_fold_file(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Checks that `folds` partition `subjects` into non-empty groups.
pub fn validate_folds(subjects: &[String], folds: &BTreeMap<String, Vec<String>>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (name, members) in folds {
        if members.is_empty() {
            return Err(Error::Data(format!("fold '{name}' is empty")));
        }
        for s in members {
            if !seen.insert(s.clone()) {
                return Err(Error::Data(format!(
                    "subject '{s}' appears in more than one fold"
                )));
            }
        }
    }
    let all: BTreeSet<String> = subjects.iter().cloned().collect();
    if let Some(missing) = all.difference(&seen).next() {
        return Err(Error::Data(format!(
            "subject '{missing}' is not assigned to a fold"
        )));
    }
    if let Some(extra) = seen.difference(&all).next() {
        return Err(Error::Data(format!(
            "fold file names unknown subject '{extra}'"
        )));
    }
    Ok(())
}

/// Assigns subjects to `k` folds. An explicit assignment wins; otherwise the
/// subjects are shuffled with `seed` and dealt round-robin.
pub fn split_folds(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
    explicit: Option<BTreeMap<String, Vec<String>>>,
) -> Result<DatasetManifest> {
    let subjects = manifest.subjects();
    let folds = match explicit {
        Some(f) => {
            validate_folds(&subjects, &f)?;
            f
        }
        None => {
            if k == 0 || subjects.len() < k {
                return Err(Error::Data(format!(
                    "{} subjects cannot fill {k} folds",
                    subjects.len()
                )));
            }
            let mut order = subjects.clone();
            order.shuffle(&mut seeded_rng(seed));
            let mut folds: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for (i, s) in order.into_iter().enumerate() {
                folds
                    .entry(format!("fold_{}", i % k + 1))
                    .or_default()
                    .push(s);
            }
            folds
        }
    };
    Ok(DatasetManifest {
        curves: manifest.curves.clone(),
        folds,
    })
}
