use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{median_interval, Featurizer, Model, TargetScale};
use crate::config::RunConfig;
use crate::dam::drift::reconstruction_threshold;
use crate::dam::{Dam, DriftBaseline, DriftState};
use crate::data::Curve;
use crate::error::{Error, Result};
use crate::hla::Hla;
use crate::linalg::Mat;
use crate::mdfe::{FeatureMatrix, FeatureScaler};
use crate::params::{derived_rng, flatten, zeros_like, Adam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub windows: usize,
    /// Mean training loss per epoch (standardized units).
    pub epoch_losses: Vec<f64>,
    pub dam_epoch_losses: Vec<f64>,
    pub delta0: f64,
    pub eps_rec: Option<f64>,
    pub tau: Option<f64>,
    pub calibration_curves: usize,
}

struct Sample {
    x: Mat,
    target: f64,
    anchor: f64,
}

fn windows_of(
    curve: &Curve,
    window: usize,
    stride: usize,
    feat: &Featurizer,
) -> Result<Vec<(FeatureMatrix, f64, f64)>> {
    let mut out = Vec::new();
    let mut j = window;
    while j < curve.len() {
        let f = feat.raw(
            &curve.timestamps[j - window..j],
            &curve.values[j - window..j],
        )?;
        out.push((f, curve.values[j], curve.values[j - 1]));
        j += stride;
    }
    Ok(out)
}

/// Trains the predictor and the reconstruction module, then calibrates the
/// drift thresholds on held-out curves.
pub fn pretrain(curves: &[Curve], cfg: &RunConfig) -> Result<(Model, PretrainReport)> {
    cfg.validate()?;
    if curves.is_empty() {
        return Err(Error::Data("pretraining needs at least one curve".into()));
    }
    let n = cfg.window;
    for (i, c) in curves.iter().enumerate() {
        if c.len() < n + 1 {
            return Err(Error::Data(format!(
                "training curve {i} ({}) has {} samples; at least {} are needed",
                c.label(),
                c.len(),
                n + 1
            )));
        }
    }
    let interval = median_interval(curves.iter().map(|c| c.timestamps.as_slice()))?;
    let features = cfg.feature_config(interval)?;
    let width = features.width();
    let raw_feat = Featurizer::new(features.clone(), FeatureScaler::identity(width), n);

    let n_cal = if cfg.dam && curves.len() > 1 {
        ((curves.len() as f64 * cfg.calibration_fraction).round() as usize)
            .clamp(1, curves.len() - 1)
    } else {
        0
    };
    let fit_curves = &curves[..curves.len() - n_cal];
    let cal_curves = if n_cal > 0 {
        &curves[curves.len() - n_cal..]
    } else {
        curves
    };

    let mut raw = Vec::new();
    for c in curves {
        raw.extend(windows_of(c, n, cfg.train_stride, &raw_feat)?);
    }
    let scaler = FeatureScaler::fit(raw.iter().map(|(f, _, _)| f), &features)?;

    let raw_targets: Vec<f64> = raw
        .iter()
        .map(|(_, y, a)| if cfg.predict_increment { y - a } else { *y })
        .collect();
    let tm = raw_targets.iter().sum::<f64>() / raw_targets.len() as f64;
    let tv = raw_targets.iter().map(|t| (t - tm).powi(2)).sum::<f64>() / raw_targets.len() as f64;
    let target = TargetScale {
        increment: cfg.predict_increment,
        mean: tm,
        std: if tv.sqrt() > 1e-12 { tv.sqrt() } else { 1.0 },
    };

    let samples: Vec<Sample> = raw
        .into_iter()
        .map(|(mut f, y, a)| {
            scaler.apply(&mut f);
            Sample {
                x: f.data,
                target: y,
                anchor: a,
            }
        })
        .collect();

    let grid = cfg.grid()?;
    let mut init_rng = derived_rng(cfg.seed, "hla-init");
    let mut hla = Hla::init(&cfg.hla_config(width), &grid, &mut init_rng)?;
    let mut adam = Adam::new(cfg.lr, flatten(&hla).len());
    let mut shuffle_rng = derived_rng(cfg.seed, "hla-shuffle");
    let mut dropout_rng = derived_rng(cfg.seed, "hla-dropout");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<(&Mat, f64)> = chunk
                .iter()
                .map(|&i| {
                    (
                        &samples[i].x,
                        target.encode(samples[i].target, samples[i].anchor),
                    )
                })
                .collect();
            let mut grads = zeros_like(&hla);
            let loss = hla.batch_loss_grad(&batch, cfg.conv_l2, Some(&mut dropout_rng), &mut grads);
            if !loss.is_finite() {
                return Err(Error::non_finite("pretraining loss"));
            }
            adam.step(&mut hla, &grads, None);
            total += loss * chunk.len() as f64;
        }
        epoch_losses.push(total / samples.len() as f64);
    }

    let mut delta0: f64 = 0.0;
    for s in &samples {
        let y = target.decode(hla.predict(&s.x)?, s.anchor);
        delta0 = delta0.max((y - s.target).abs());
    }

    let feat = Featurizer::new(features.clone(), scaler.clone(), n);
    let mut dam_epoch_losses = Vec::new();
    let (dam, drift) = if cfg.dam {
        let input_dim = n * width;
        let mut rows = Vec::new();
        for c in fit_curves {
            for (mut f, _, _) in windows_of(c, n, cfg.train_stride, &raw_feat)? {
                scaler.apply(&mut f);
                rows.extend_from_slice(f.data.as_slice());
            }
        }
        let count = rows.len() / input_dim;
        let data = Mat::from_vec(count, input_dim, rows);
        let mut rng = derived_rng(cfg.seed, "dam-init");
        let mut dam = Dam::init(&cfg.dam_config(width), &grid, &mut rng)?;
        let mut adam = Adam::new(cfg.dam_lr, flatten(&dam).len());
        let mut shuffle_rng = derived_rng(cfg.seed, "dam-shuffle");
        let mut order: Vec<usize> = (0..count).collect();
        for _ in 0..cfg.dam_epochs {
            order.shuffle(&mut shuffle_rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch) {
                let mut x = Mat::zeros(chunk.len(), input_dim);
                for (r, &i) in chunk.iter().enumerate() {
                    x.row_mut(r).copy_from_slice(data.row(i));
                }
                let mut grads = zeros_like(&dam);
                let loss = dam.loss_grad(&x, &mut grads)?;
                adam.step(&mut dam, &grads, None);
                total += loss * chunk.len() as f64;
            }
            dam_epoch_losses.push(total / count as f64);
        }

        // thresholds come from curves the module never saw
        let state = calibrate_drift(&dam, cal_curves, &feat, cfg)?;
        (Some(dam), Some(state))
    } else {
        (None, None)
    };

    let report = PretrainReport {
        windows: samples.len(),
        epoch_losses,
        dam_epoch_losses,
        delta0,
        eps_rec: drift.as_ref().map(|d| d.eps_rec),
        tau: drift.as_ref().map(|d| d.tau),
        calibration_curves: if cfg.dam { cal_curves.len() } else { 0 },
    };
    let model = Model {
        config: cfg.clone(),
        features,
        scaler,
        target,
        hla,
        dam,
        drift,
        delta0,
    };
    Ok((model, report))
}

/// Fits the reconstruction threshold and the embedding baseline on `curves`.
pub fn calibrate_drift(
    dam: &Dam,
    curves: &[Curve],
    feat: &Featurizer,
    cfg: &RunConfig,
) -> Result<DriftState> {
    let n = cfg.window;
    let mut buffer_losses = Vec::new();
    let mut embeddings = Vec::new();
    for c in curves {
        if c.len() <= n {
            continue;
        }
        let mut rows = Vec::new();
        for j in n..c.len() {
            rows.extend(
                feat.scaled(&c.timestamps[j - n..j], &c.values[j - n..j])?
                    .into_vec(),
            );
        }
        let x = Mat::from_vec(c.len() - n, rows.len() / (c.len() - n), rows);
        let (out, _) = dam.forward(&x)?;
        for end in cfg.buffer..=out.row_losses.len() {
            let w = &out.row_losses[end - cfg.buffer..end];
            buffer_losses.push(w.iter().sum::<f64>() / w.len() as f64);
        }
        embeddings.push(out.query);
    }
    let eps = reconstruction_threshold(&buffer_losses, cfg.eps_rec_quantile)?;
    let baseline = DriftBaseline::fit(
        &embeddings,
        cfg.kl_dims,
        cfg.drift_window,
        cfg.kl_stride,
        cfg.kl_mode,
    )?;
    DriftState::new(baseline, eps, cfg.alpha, cfg.drift_window)
}
