//! Multi-domain features for one sliding window: raw time and value columns,
//! sin/cos phase bins for each configured period, and real parts of the
//! DFT multiplied by successive powers of `i·2π·n/N`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    timestamps: Vec<f64>,
    values: Vec<f64>,
}

impl SampleWindow {
    pub fn new(timestamps: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::contract("timestamps and values differ in length"));
        }
        if timestamps.len() < 2 {
            return Err(Error::contract("a window needs at least two samples"));
        }
        if timestamps.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::non_finite("sample window"));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::contract("timestamps must be strictly increasing"));
        }
        Ok(SampleWindow { timestamps, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Period {
    /// Bin width in seconds.
    pub length: f64,
    /// Number of bins per cycle.
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodConfig {
    periods: Vec<Period>,
}

impl PeriodConfig {
    pub fn new(periods: Vec<Period>) -> Result<Self> {
        if periods.is_empty() {
            return Err(Error::Config("at least one period is required".into()));
        }
        for p in &periods {
            if !(p.length > 0.0 && p.length.is_finite()) {
                return Err(Error::Config(format!(
                    "period length must be positive, got {}",
                    p.length
                )));
            }
            if p.bins < 2 {
                return Err(Error::Config(format!(
                    "period needs at least 2 bins, got {}",
                    p.bins
                )));
            }
        }
        Ok(PeriodConfig { periods })
    }

    pub fn single(length: f64, bins: usize) -> Result<Self> {
        PeriodConfig::new(vec![Period { length, bins }])
    }

    pub fn periods(&self) -> &[Period] {
        &self.periods
    }
}

/// `[N × 2l]` sin/cos columns of the phase bin `floor(t/P) mod C`.
pub fn periodic_embed(window: &SampleWindow, cfg: &PeriodConfig) -> Mat {
    let n = window.len();
    let mut out = Mat::zeros(n, 2 * cfg.periods.len());
    for (j, p) in cfg.periods.iter().enumerate() {
        for (i, &t) in window.timestamps.iter().enumerate() {
            let v = (t / p.length).floor().rem_euclid(p.bins as f64);
            let angle = std::f64::consts::TAU * v / p.bins as f64;
            out.set(i, 2 * j, angle.sin());
            out.set(i, 2 * j + 1, angle.cos());
        }
    }
    out
}

/// Holds an FFT plan for a fixed window length.
#[derive(Clone)]
pub struct SpectralPlan {
    len: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectralPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralPlan")
            .field("len", &self.len)
            .finish()
    }
}

impl SpectralPlan {
    pub fn new(len: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(len);
        SpectralPlan { len, fft }
    }

    /// Raw (unstandardized) `[N × orders]` matrix with `B[n,k] = Re{(i·2πn/N)^k · F[n]}`.
    pub fn features(&self, values: &[f64], orders: usize) -> Mat {
        assert_eq!(values.len(), self.len, "spectral plan length");
        let n = self.len;
        let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        let mut out = Mat::zeros(n, orders);
        for (bin, f) in buf.iter().enumerate() {
            let c = std::f64::consts::TAU * bin as f64 / n as f64;
            let mut scale = 1.0;
            for k in 0..orders {
                // Re{i^k z} cycles through Re z, -Im z, -Re z, Im z.
                let re = match k % 4 {
                    0 => f.re,
                    1 => -f.im,
                    2 => -f.re,
                    _ => f.im,
                };
                out.set(bin, k, scale * re);
                scale *= c;
            }
        }
        out
    }
}

pub fn frequency_features(window: &SampleWindow, orders: usize) -> Mat {
    SpectralPlan::new(window.len()).features(window.values(), orders)
}

/// Which feature groups are active; switching a group off drops its columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub periods: Option<PeriodConfig>,
    /// Number of derivative orders (0 disables the frequency block).
    pub orders: usize,
}

impl FeatureConfig {
    pub fn width(&self) -> usize {
        2 + self.periods.as_ref().map_or(0, |p| 2 * p.periods.len()) + self.orders
    }

    pub fn periodic_range(&self) -> std::ops::Range<usize> {
        let l = self.periods.as_ref().map_or(0, |p| p.periods.len());
        2..2 + 2 * l
    }
}

/// `N × F₀` block laid out `[t, x, periodic…, frequency…]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Mat,
}

pub fn assemble_features(window: &SampleWindow, cfg: &FeatureConfig) -> FeatureMatrix {
    assemble_with(window, cfg, &SpectralPlan::new(window.len()))
}

pub fn assemble_with(
    window: &SampleWindow,
    cfg: &FeatureConfig,
    plan: &SpectralPlan,
) -> FeatureMatrix {
    let n = window.len();
    let width = cfg.width();
    let mut data = Mat::zeros(n, width);
    for i in 0..n {
        data.set(i, 0, window.timestamps[i]);
        data.set(i, 1, window.values[i]);
    }
    let mut col = 2;
    if let Some(p) = &cfg.periods {
        let a = periodic_embed(window, p);
        for i in 0..n {
            data.row_mut(i)[col..col + a.cols()].copy_from_slice(a.row(i));
        }
        col += a.cols();
    }
    if cfg.orders > 0 {
        let b = plan.features(window.values(), cfg.orders);
        for i in 0..n {
            data.row_mut(i)[col..col + b.cols()].copy_from_slice(b.row(i));
        }
    }
    FeatureMatrix { data }
}

/// Per-column z-scoring with statistics frozen at fit time. Periodic columns
/// pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit<'a, I>(blocks: I, cfg: &FeatureConfig) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureMatrix>,
    {
        let width = cfg.width();
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mut count = 0usize;
        for b in blocks {
            if b.data.cols() != width {
                return Err(Error::contract("feature block width differs from config"));
            }
            for r in 0..b.data.rows() {
                for (c, &v) in b.data.row(r).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += b.data.rows();
        }
        if count == 0 {
            return Err(Error::Data("no feature rows to fit the scaler".into()));
        }
        let n = count as f64;
        let periodic = cfg.periodic_range();
        let mut mean = vec![0.0; width];
        let mut std = vec![1.0; width];
        for c in 0..width {
            if periodic.contains(&c) {
                continue;
            }
            mean[c] = sum[c] / n;
            let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
            let s = var.sqrt();
            std[c] = if s > 1e-12 { s } else { 1.0 };
        }
        Ok(FeatureScaler { mean, std })
    }

    pub fn identity(width: usize) -> Self {
        FeatureScaler {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn apply(&self, block: &mut FeatureMatrix) {
        for r in 0..block.data.rows() {
            for (c, v) in block.data.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }

    /// Maps a raw value into the standardized value column's units.
    pub fn scale_value(&self, v: f64) -> f64 {
        (v - self.mean[1]) / self.std[1]
    }

    pub fn unscale_value(&self, z: f64) -> f64 {
        z * self.std[1] + self.mean[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;
    use rand::Rng;

    fn win(ts: &[f64], vs: &[f64]) -> SampleWindow {
        SampleWindow::new(ts.to_vec(), vs.to_vec()).unwrap()
    }

    #[test]
    fn quarter_cycle_embedding() {
        let w = win(&[0.0, 1.0, 2.0, 3.0], &[0.0; 4]);
        let a = periodic_embed(&w, &PeriodConfig::single(1.0, 4).unwrap());
        let sin = a.column(0);
        let cos = a.column(1);
        let want_sin = [0.0, 1.0, 0.0, -1.0];
        let want_cos = [1.0, 0.0, -1.0, 0.0];
        for i in 0..4 {
            assert!((sin[i] - want_sin[i]).abs() < 1e-15);
            assert!((cos[i] - want_cos[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn multiples_of_full_cycle_land_in_bin_zero() {
        let w = win(&[0.0, 12.0, 24.0], &[0.0; 3]);
        let a = periodic_embed(&w, &PeriodConfig::single(2.0, 6).unwrap());
        assert_eq!(a.column(0), vec![0.0; 3]);
        assert_eq!(a.column(1), vec![1.0; 3]);
    }

    #[test]
    fn uneven_timestamps_bin_by_floor_mod() {
        let w = win(&[0.0, 2.5, 7.9], &[0.0; 3]);
        let a = periodic_embed(&w, &PeriodConfig::single(2.0, 3).unwrap());
        for (i, v) in [0.0f64, 1.0, 0.0].iter().enumerate() {
            let ang = 2.0 * std::f64::consts::PI * v / 3.0;
            assert_eq!(a.get(i, 0), ang.sin());
            assert_eq!(a.get(i, 1), ang.cos());
        }
    }

    #[test]
    fn dft_of_constant() {
        let w = win(&[0.0, 1.0, 2.0, 3.0], &[2.5; 4]);
        let b = frequency_features(&w, 4);
        assert_eq!(b.row(0), &[10.0, 0.0, 0.0, 0.0]);
        for n in 1..4 {
            assert!(b.row(n).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn two_point_dft() {
        let w = win(&[0.0, 1.0], &[3.0, 1.0]);
        let b = frequency_features(&w, 2);
        assert!((b.get(1, 0) - 2.0).abs() < 1e-15);
        assert!(b.get(1, 1).abs() < 1e-12);
    }

    /// O(N²) DFT with explicit complex powers.
    pub(crate) fn naive_features(values: &[f64], orders: usize) -> Vec<Vec<f64>> {
        let n = values.len();
        let mut out = vec![vec![0.0; orders]; n];
        for (bin, row) in out.iter_mut().enumerate() {
            let mut f = Complex::new(0.0, 0.0);
            for (t, &v) in values.iter().enumerate() {
                let ang = -std::f64::consts::TAU * (bin * t) as f64 / n as f64;
                f += Complex::new(ang.cos(), ang.sin()) * v;
            }
            let w = Complex::new(0.0, std::f64::consts::TAU * bin as f64 / n as f64);
            let mut z = f;
            for cell in row.iter_mut() {
                *cell = z.re;
                z *= w;
            }
        }
        out
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = seeded_rng(13);
        let ts: Vec<f64> = (0..50).map(f64::from).collect();
        for _ in 0..20 {
            let vs: Vec<f64> = (0..50).map(|_| rng.random_range(-5.0..5.0)).collect();
            let b = frequency_features(&win(&ts, &vs), 4);
            let want = naive_features(&vs, 4);
            let scale = want.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            for n in 0..50 {
                for k in 0..4 {
                    assert!((b.get(n, k) - want[n][k]).abs() <= 1e-9 * scale);
                }
            }
        }
    }

    #[test]
    fn feature_widths() {
        let cfg = FeatureConfig {
            periods: Some(PeriodConfig::single(1.0, 60).unwrap()),
            orders: 4,
        };
        assert_eq!(cfg.width(), 8);
        let two = FeatureConfig {
            periods: Some(
                PeriodConfig::new(vec![
                    Period {
                        length: 1.0,
                        bins: 60,
                    },
                    Period {
                        length: 5.0,
                        bins: 12,
                    },
                ])
                .unwrap(),
            ),
            orders: 4,
        };
        assert_eq!(two.width(), 10);
        let ts: Vec<f64> = (0..6).map(|i| i as f64 * 0.5).collect();
        let vs = vec![0.1, 0.4, 0.2, 0.9, 1.3, 1.1];
        let f = assemble_features(&win(&ts, &vs), &cfg);
        assert_eq!(f.data.shape(), (6, 8));
        assert_eq!(f.data.column(0), ts);
        assert_eq!(f.data.column(1), vs);
    }

    #[test]
    fn scaler_leaves_periodic_columns() {
        let cfg = FeatureConfig {
            periods: Some(PeriodConfig::single(1.0, 4).unwrap()),
            orders: 1,
        };
        let w = win(&[0.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 4.0, 8.0]);
        let f = assemble_features(&w, &cfg);
        let s = FeatureScaler::fit([&f], &cfg).unwrap();
        let mut g = f.clone();
        s.apply(&mut g);
        assert_eq!(g.data.column(2), f.data.column(2));
        let m: f64 = g.data.column(1).iter().sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
        assert!((s.unscale_value(s.scale_value(3.3)) - 3.3).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_windows() {
        assert!(SampleWindow::new(vec![0.0, 0.0], vec![1.0, 2.0]).is_err());
        assert!(SampleWindow::new(vec![0.0], vec![1.0]).is_err());
        assert!(SampleWindow::new(vec![0.0, 1.0], vec![f64::NAN, 2.0]).is_err());
        assert!(PeriodConfig::single(0.0, 4).is_err());
        assert!(PeriodConfig::single(1.0, 1).is_err());
    }
}
