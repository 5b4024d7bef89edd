//! Look-back scoring and subject-level k-fold evaluation.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Curve;
use crate::engine::{pretrain, reconstruct, Model};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, FoldReport, Metrics, MetricsReport};

/// Observed prefix length for a curve of `total` samples: `round(f·total)`,
/// which must leave at least one sample to predict and fill one window.
pub fn prefix_len(total: usize, lookback: f64, window: usize) -> Result<usize> {
    if !(lookback > 0.0 && lookback < 1.0) {
        return Err(Error::Config(format!(
            "look-back fraction must lie in (0,1), got {lookback}"
        )));
    }
    let m = (lookback * total as f64).round() as usize;
    if m >= total {
        return Err(Error::Precondition(format!(
            "look-back {lookback} observes all {total} samples; nothing is left to reconstruct"
        )));
    }
    if m < window {
        return Err(Error::Precondition(format!(
            "look-back {lookback} of {total} samples gives a prefix of {m}, shorter than the window {window}"
        )));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveScore {
    pub label: String,
    pub observed: usize,
    pub metrics: Metrics,
}

/// Reconstructs every curve from its look-back prefix and scores the full
/// reconstruction against the recorded curve.
pub fn score_curves(model: &Model, curves: &[Curve], lookback: f64) -> Result<Vec<CurveScore>> {
    curves
        .iter()
        .map(|c| {
            let m = prefix_len(c.len(), lookback, model.config.window)?;
            let r = reconstruct(model, &c.timestamps, &c.values[..m])?;
            Ok(CurveScore {
                label: c.label().to_string(),
                observed: m,
                metrics: compute_metrics(&c.values, &r.curve)?,
            })
        })
        .collect()
}

/// Metrics pooled over all samples of all curves.
fn pooled(
    model: &Model,
    curves: &[Curve],
    lookback: f64,
) -> Result<(Metrics, Vec<CurveScore>, usize)> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    let mut scores = Vec::new();
    let mut steps = 0;
    for c in curves {
        let m = prefix_len(c.len(), lookback, model.config.window)?;
        let r = reconstruct(model, &c.timestamps, &c.values[..m])?;
        steps += c.len() - model.config.window;
        scores.push(CurveScore {
            label: c.label().to_string(),
            observed: m,
            metrics: compute_metrics(&c.values, &r.curve)?,
        });
        truth.extend_from_slice(&c.values);
        pred.extend(r.curve);
    }
    Ok((compute_metrics(&truth, &pred)?, scores, steps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub curves: Vec<CurveScore>,
}

/// Trains on all folds but one and scores the held-out fold, for each fold.
/// Folds run on up to `jobs` threads; results do not depend on `jobs`.
pub fn cross_validate(
    curves: &[Curve],
    folds: &BTreeMap<String, Vec<String>>,
    cfg: &RunConfig,
    lookback: f64,
    jobs: usize,
) -> Result<Evaluation> {
    if folds.len() < 2 {
        return Err(Error::Data(
            "cross-validation needs at least two folds".into(),
        ));
    }
    let subject = |c: &Curve| {
        c.subject_id
            .clone()
            .unwrap_or_else(|| c.label().to_string())
    };
    let names: Vec<&String> = folds.keys().collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(FoldReport, Vec<CurveScore>, usize, f64)>>>> =
        Mutex::new((0..names.len()).map(|_| None).collect());

    let run_fold = |i: usize| -> Result<(FoldReport, Vec<CurveScore>, usize, f64)> {
        let members = &folds[names[i]];
        let (test, train): (Vec<Curve>, Vec<Curve>) = curves
            .iter()
            .cloned()
            .partition(|c| members.contains(&subject(c)));
        if test.is_empty() || train.is_empty() {
            return Err(Error::Data(format!(
                "fold '{}' leaves an empty train or test split",
                names[i]
            )));
        }
        let mut fold_cfg = cfg.clone();
        if let Some(&s) = cfg.fold_seeds.get(i) {
            fold_cfg.seed = s;
        }
        let (model, _) = pretrain(&train, &fold_cfg)?;
        let start = Instant::now();
        let (metrics, scores, steps) = pooled(&model, &test, lookback)?;
        let secs = start.elapsed().as_secs_f64();
        Ok((
            FoldReport {
                subjects: members.clone(),
                metrics,
            },
            scores,
            steps,
            secs,
        ))
    };

    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, names.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= names.len() {
                    break;
                }
                let r = run_fold(i);
                results.lock().expect("fold results lock")[i] = Some(r);
            });
        }
    });

    let mut reports = BTreeMap::new();
    let mut all_scores = Vec::new();
    let (mut steps, mut secs) = (0, 0.0);
    for (name, r) in names
        .iter()
        .zip(results.into_inner().expect("fold results lock"))
    {
        let (fold, scores, n, t) = r.expect("every fold ran")?;
        reports.insert((*name).clone(), fold);
        all_scores.extend(scores);
        steps += n;
        secs += t;
    }
    let per_step = (steps > 0).then(|| secs / steps as f64);
    Ok(Evaluation {
        report: MetricsReport::from_folds(reports, per_step)?,
        curves: all_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_lengths() {
        assert_eq!(prefix_len(300, 0.45, 50).unwrap(), 135);
        assert_eq!(prefix_len(300, 0.55, 50).unwrap(), 165);
        assert!(matches!(
            prefix_len(100, 0.3, 50),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            prefix_len(10, 0.99, 2),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(prefix_len(100, 1.0, 2), Err(Error::Config(_))));
        assert!(matches!(prefix_len(100, 0.0, 2), Err(Error::Config(_))));
    }
}
