//! Error metrics, fold aggregation, CV, Wilcoxon signed-rank, and step timing.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    /// `-inf` when the truth is constant but the prediction is not.
    pub r2: f64,
}

impl Metrics {
    pub fn r2_display(&self) -> String {
        if self.r2.is_finite() {
            format!("{:.4}", self.r2)
        } else {
            "undefined".to_string()
        }
    }
}

pub fn compute_metrics(truth: &[f64], pred: &[f64]) -> Result<Metrics> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::contract(format!(
            "metric inputs must have equal nonzero length ({} vs {})",
            truth.len(),
            pred.len()
        )));
    }
    let n = truth.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (t, p) in truth.iter().zip(pred) {
        let e = p - t;
        abs += e.abs();
        sq += e * e;
    }
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - sq / ss_tot
    } else if sq == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    Ok(Metrics {
        mae: abs / n,
        mse: sq / n,
        r2,
    })
}

/// Unweighted mean of the per-fold triples.
pub fn aggregate_folds(per_fold: &[Metrics]) -> Result<Metrics> {
    if per_fold.is_empty() {
        return Err(Error::contract("cannot aggregate zero folds"));
    }
    let n = per_fold.len() as f64;
    Ok(Metrics {
        mae: per_fold.iter().map(|m| m.mae).sum::<f64>() / n,
        mse: per_fold.iter().map(|m| m.mse).sum::<f64>() / n,
        r2: per_fold.iter().map(|m| m.r2).sum::<f64>() / n,
    })
}

/// Sample standard deviation over the mean, in percent. `None` for a zero
/// mean or fewer than two values.
pub fn coefficient_of_variation(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return None;
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some(var.sqrt() / mean * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// min(W+, W−).
    pub statistic: f64,
    pub p_value: f64,
    /// Nonzero differences used.
    pub n: usize,
    pub exact: bool,
}

/// Largest sample size handled by the exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Average ranks of `|d|`, 1-based.
fn average_ranks(abs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0.0; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided signed-rank test on `a − b`. Zero differences are dropped; all
/// zero gives `p = 1`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::contract("wilcoxon inputs differ in length"));
    }
    if a.len() < 5 {
        return Err(Error::contract("wilcoxon needs at least 5 pairs"));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            n: 0,
            exact: true,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let n = diffs.len();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);

    if n <= WILCOXON_EXACT_MAX {
        // Ranks are multiples of 1/2, so doubled ranks index the distribution.
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; max + 1];
        counts[0] = 1.0;
        let mut reach = 0;
        for &r in &doubled {
            for s in (0..=reach).rev() {
                let c = counts[s];
                if c != 0.0 {
                    counts[s + r] += c;
                }
            }
            reach += r;
        }
        let cutoff = (w * 2.0).round() as usize;
        let tail: f64 = counts[..=cutoff].iter().sum();
        let p = (2.0 * tail / 2f64.powi(n as i32)).min(1.0);
        return Ok(WilcoxonResult {
            statistic: w,
            p_value: p,
            n,
            exact: true,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * (1.0 - std_normal.cdf(z))).min(1.0);
    Ok(WilcoxonResult {
        statistic: w,
        p_value: p,
        n,
        exact: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub steps: usize,
    pub seconds_per_step: f64,
    /// Resident-set growth over the run in bytes, when the platform reports it.
    pub rss_delta_bytes: Option<i64>,
}

/// Resident set size from `/proc/self/status`, Linux only.
pub fn resident_bytes() -> Option<i64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: i64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Times `steps` calls of `step` after `warmup` untimed calls.
pub fn profile_inference<F>(warmup: usize, steps: usize, mut step: F) -> Result<Profile>
where
    F: FnMut(usize) -> Result<()>,
{
    if steps == 0 {
        return Err(Error::contract("profile needs at least one step"));
    }
    for i in 0..warmup {
        step(i)?;
    }
    let rss0 = resident_bytes();
    let start = Instant::now();
    for i in 0..steps {
        step(warmup + i)?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    let rss1 = resident_bytes();
    Ok(Profile {
        steps,
        seconds_per_step: elapsed / steps as f64,
        rss_delta_bytes: rss0.zip(rss1).map(|(a, b)| b - a),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub subjects: Vec<String>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: BTreeMap<String, FoldReport>,
    pub overall: Metrics,
    pub cv_mae_percent: Option<f64>,
    pub cv_mse_percent: Option<f64>,
    pub seconds_per_step: Option<f64>,
}

impl MetricsReport {
    pub fn from_folds(
        folds: BTreeMap<String, FoldReport>,
        seconds_per_step: Option<f64>,
    ) -> Result<Self> {
        let triples: Vec<Metrics> = folds.values().map(|f| f.metrics).collect();
        let overall = aggregate_folds(&triples)?;
        let maes: Vec<f64> = triples.iter().map(|m| m.mae).collect();
        let mses: Vec<f64> = triples.iter().map(|m| m.mse).collect();
        Ok(MetricsReport {
            folds,
            overall,
            cv_mae_percent: coefficient_of_variation(&maes),
            cv_mse_percent: coefficient_of_variation(&mses),
            seconds_per_step,
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Fold | Subjects | MAE | MSE | R² |\n|---|---|---|---|---|\n");
        for (name, f) in &self.folds {
            s.push_str(&format!(
                "| {name} | {} | {:.4} | {:.4} | {} |\n",
                f.subjects.join(", "),
                f.metrics.mae,
                f.metrics.mse,
                f.metrics.r2_display()
            ));
        }
        s.push_str(&format!(
            "| Overall | | {:.4} | {:.4} | {} |\n",
            self.overall.mae,
            self.overall.mse,
            self.overall.r2_display()
        ));
        s
    }
}
