//! Command-line front end. Exit codes: 0 success, 1 a check failed or an
//! internal error, 2 configuration, 3 data, 4 precondition.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint;
use crate::config::{RunConfig, ABLATION_ROWS};
use crate::data::{load_csv, load_fold_file, split_folds, Curve, DatasetManifest, DriftSwitch};
use crate::diagnostics::{
    attention_row_error, gradient_suite, partition_of_unity_error, spectral_fidelity,
};
use crate::engine::{pretrain, reconstruct, simulate_drift_run, DriftRunReport, Model};
use crate::error::{Error, Result};
use crate::evaluate::{cross_validate, prefix_len};
use crate::metrics::compute_metrics;
use crate::theory::{
    contraction_suite, regret_suite, tail_bound_suite, ContractionConfig, RegretConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_PRECONDITION: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidGrid(_) => EXIT_CONFIG,
        Error::Data(_)
        | Error::DataAt { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::Checkpoint(_) => EXIT_DATA,
        Error::Precondition(_) => EXIT_PRECONDITION,
        Error::Contract(_) | Error::NonFinite { .. } => EXIT_FAILED,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "curvecast",
    version,
    about = "Streaming reconstruction of saturating curves from a partial prefix"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set lr=0.003` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct DataArgs {
    /// JSON manifest listing curve CSVs by subject.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Generate the configured synthetic suite with this seed instead.
    #[arg(long)]
    pub synthetic: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct one curve from its look-back prefix.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV with `time,value` columns (optionally `subject_id`).
        #[arg(long)]
        input: PathBuf,
        /// Fraction of the curve that is observed; defaults to the model's setting.
        #[arg(long)]
        lookback: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Metrics JSON; defaults to `<out>.metrics.json`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Subject-level k-fold evaluation.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Evaluate one ablation row (1 is the full model).
    Ablate {
        #[arg(long)]
        row: usize,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Stream synthetic curves with an injected parameter switch and score detection.
    Simulate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        sim: SimArgs,
        /// Output directory for `trace.csv`, `report.json` and the run manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the regret, contraction and tail-bound suites.
    RegretCheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 10_000)]
        horizon: usize,
        #[arg(long, default_value_t = 100)]
        contraction_seeds: usize,
        #[arg(long, default_value_t = 100_000)]
        tail_draws: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks and numerical identities.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args, Clone, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON `{"fold_1": [subjects…], …}`; otherwise subjects are split with the config seed.
    #[arg(long)]
    pub fold_file: Option<PathBuf>,
    #[arg(long)]
    pub lookback: Option<f64>,
    /// Folds evaluated concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory for `metrics.json`, `metrics.md` and the run manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct SimArgs {
    /// Number of seeded runs.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Step at which the generator parameters switch; omit for a drift-free stream.
    #[arg(long)]
    pub drift_step: Option<usize>,
    /// Amplitude after the switch, as a multiple of the amplitude before it.
    #[arg(long, default_value_t = 1.5)]
    pub amplitude_scale: f64,
    /// Rate after the switch, as a multiple of the rate before it.
    #[arg(long, default_value_t = 1.0)]
    pub rate_scale: f64,
    /// Stream length; defaults to the suite length.
    #[arg(long)]
    pub length: Option<usize>,
}

/// The resolved configuration: file, then `PSR_SEED`, then `--set`.
pub fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(s) = std::env::var("PSR_SEED") {
        cfg.seed = s.trim().parse().map_err(|_| {
            Error::Config(format!("PSR_SEED must be an unsigned integer, got '{s}'"))
        })?;
    }
    cfg.with_overrides(&args.sets)
}

fn load_data(args: &DataArgs, cfg: &RunConfig) -> Result<(Vec<Curve>, DatasetManifest)> {
    match (&args.data, args.synthetic) {
        (Some(p), _) => {
            let manifest = DatasetManifest::load(p)?;
            let curves = manifest.load_curves()?;
            Ok((curves, manifest))
        }
        (None, Some(seed)) => {
            let curves = cfg.suite.generate(seed)?;
            let manifest = DatasetManifest {
                curves: curves
                    .iter()
                    .map(|c| crate::data::ManifestEntry {
                        subject_id: c.label().to_string(),
                        path: PathBuf::new(),
                    })
                    .collect(),
                folds: BTreeMap::new(),
            };
            Ok((curves, manifest))
        }
        (None, None) => Err(Error::Config(
            "pass --data <manifest> or --synthetic <seed>".into(),
        )),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_manifest(command: &str, config: &RunConfig, extra: serde_json::Value) -> serde_json::Value {
    json!({
        "tool": "curvecast",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "seed": config.seed,
        "config": config,
        "inputs": extra,
    })
}

fn cmd_pretrain(config: &ConfigArgs, data: &DataArgs, out: &Path) -> Result<i32> {
    let cfg = resolve_config(config)?;
    let (curves, _) = load_data(data, &cfg)?;
    let (model, report) = pretrain(&curves, &cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    checkpoint::save(&model, out)?;
    write_json(
        &with_suffix(out, ".run.json"),
        &run_manifest(
            "pretrain",
            &cfg,
            json!({"data": data.data, "synthetic": data.synthetic, "curves": curves.len()}),
        ),
    )?;
    let summary = json!({
        "checkpoint": out,
        "windows": report.windows,
        "final_loss": report.epoch_losses.last(),
        "final_adaptation_loss": report.dam_epoch_losses.last(),
        "delta0": report.delta0,
        "eps_rec": report.eps_rec,
        "tau": report.tau,
        "calibration_curves": report.calibration_curves,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(EXIT_OK)
}

fn cmd_reconstruct(
    ckpt: &Path,
    input: &Path,
    lookback: Option<f64>,
    out: &Path,
    metrics: Option<&Path>,
) -> Result<i32> {
    let model = checkpoint::load(ckpt)?;
    let curve = load_csv(input)?;
    let f = lookback.unwrap_or(model.config.lookback_fraction);
    let m = prefix_len(curve.len(), f, model.config.window)?;
    let result = reconstruct(&model, &curve.timestamps, &curve.values[..m])?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    result.write_csv(out)?;
    result.write_events(&with_suffix(out, ".events.jsonl"))?;
    let scores = compute_metrics(&curve.values, &result.curve)?;
    let suffix = compute_metrics(&curve.values[m..], &result.curve[m..])?;
    let report = json!({
        "lookback": f,
        "observed": m,
        "total": curve.len(),
        "mae": scores.mae,
        "mse": scores.mse,
        "r2": scores.r2,
        "predicted_only": suffix,
        "drift_events": result.drift_events.len(),
        "lipschitz_estimate": result.lipschitz,
        "bound_final": result.bound_trace.last(),
    });
    let metrics_path = metrics
        .map(Path::to_path_buf)
        .unwrap_or_else(|| with_suffix(out, ".metrics.json"));
    write_json(&metrics_path, &report)?;
    write_json(
        &with_suffix(out, ".run.json"),
        &run_manifest(
            "reconstruct",
            &model.config,
            json!({"checkpoint": ckpt, "input": input, "lookback": f}),
        ),
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(EXIT_OK)
}

fn cmd_evaluate(cfg: RunConfig, eval: &EvalArgs, row: Option<usize>) -> Result<i32> {
    let (curves, manifest) = load_data(&eval.data, &cfg)?;
    let explicit = match &eval.fold_file {
        Some(p) => Some(load_fold_file(p)?),
        None if !manifest.folds.is_empty() => Some(manifest.folds.clone()),
        None => None,
    };
    let split = split_folds(&manifest, cfg.folds, cfg.seed, explicit)?;
    let lookback = eval.lookback.unwrap_or(cfg.lookback_fraction);
    let evaluation = cross_validate(&curves, &split.folds, &cfg, lookback, eval.jobs)?;
    std::fs::create_dir_all(&eval.out)?;
    let mut body = serde_json::to_value(&evaluation)?;
    body["lookback"] = json!(lookback);
    if let Some(r) = row {
        body["ablation"] = json!({"row": r, "disabled": ABLATION_ROWS[r - 1]});
    }
    write_json(&eval.out.join("metrics.json"), &body)?;
    let mut md = String::new();
    if let Some(r) = row {
        md.push_str(&format!("Ablation row {r}: {}\n\n", ABLATION_ROWS[r - 1]));
    }
    md.push_str(&evaluation.report.to_markdown());
    std::fs::write(eval.out.join("metrics.md"), &md)?;
    write_json(
        &eval.out.join("run.json"),
        &run_manifest(
            if row.is_some() { "ablate" } else { "evaluate" },
            &cfg,
            json!({"data": eval.data.data, "synthetic": eval.data.synthetic, "folds": split.folds, "lookback": lookback, "row": row}),
        ),
    )?;
    print!("{md}");
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct SimulationSummary {
    runs: usize,
    detected: usize,
    detection_rate: Option<f64>,
    false_positive_rate: f64,
    reports: Vec<DriftRunReport>,
}

fn cmd_simulate(ckpt: &Path, sim: &SimArgs, out: &Path) -> Result<i32> {
    let model: Model = checkpoint::load(ckpt)?;
    if sim.runs == 0 {
        return Err(Error::Config("--runs must be positive".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut reports = Vec::with_capacity(sim.runs);
    let (mut flags, mut armed) = (0, 0);
    for i in 0..sim.runs {
        let mut spec = model.config.suite.curve_spec(sim.seed, i);
        if let Some(len) = sim.length {
            spec.length = len;
        }
        spec.drift = sim.drift_step.map(|step| DriftSwitch {
            step,
            amplitude: spec.amplitude * sim.amplitude_scale,
            rate: spec.rate * sim.rate_scale,
            onset: spec.onset,
        });
        let (report, result) = simulate_drift_run(&model, &spec, sim.seed.wrapping_add(i as u64))?;
        if i == 0 {
            let mut w = csv::Writer::from_path(out.join("trace.csv"))
                .map_err(|e| Error::Data(e.to_string()))?;
            let map = |e: csv::Error| Error::Data(e.to_string());
            w.write_record([
                "step",
                "timestamp",
                "truth",
                "clean",
                "predicted",
                "drift_flag",
            ])
            .map_err(map)?;
            for s in &result.steps {
                w.write_record([
                    s.step.to_string(),
                    s.timestamp.to_string(),
                    s.observed.map(|v| v.to_string()).unwrap_or_default(),
                    spec.clean_value(s.step).to_string(),
                    s.predicted.map(|v| v.to_string()).unwrap_or_default(),
                    s.drift_flag.to_string(),
                ])
                .map_err(map)?;
            }
            w.flush()?;
            result.write_events(&out.join("events.jsonl"))?;
        }
        flags += report.false_positives;
        armed += report.armed_before;
        reports.push(report);
    }
    let detected = reports.iter().filter(|r| r.detected).count();
    let summary = SimulationSummary {
        runs: sim.runs,
        detected,
        detection_rate: sim.drift_step.map(|_| detected as f64 / sim.runs as f64),
        false_positive_rate: if armed > 0 {
            flags as f64 / armed as f64
        } else {
            0.0
        },
        reports,
    };
    write_json(&out.join("report.json"), &summary)?;
    write_json(
        &out.join("run.json"),
        &run_manifest(
            "simulate",
            &model.config,
            json!({"checkpoint": ckpt, "runs": sim.runs, "seed": sim.seed,
            "drift_step": sim.drift_step, "amplitude_scale": sim.amplitude_scale, "rate_scale": sim.rate_scale,
            "length": sim.length}),
        ),
    )?;
    println!(
        "runs {} detected {} false-positive rate {:.4}",
        summary.runs, summary.detected, summary.false_positive_rate
    );
    Ok(EXIT_OK)
}

fn cmd_regret(
    trials: usize,
    horizon: usize,
    seeds: usize,
    draws: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<i32> {
    let rcfg = RegretConfig {
        horizon,
        ..RegretConfig::default()
    };
    let regret = regret_suite(&rcfg, trials, seed)?;
    let contraction = contraction_suite(&ContractionConfig::default(), seeds, seed)?;
    let tail = tail_bound_suite(2, 0.7, &[0.0, 0.5, 1.0, 2.0, 3.0, 4.0], draws, seed)?;
    let ok = regret.violations.is_empty()
        && contraction.violations.is_empty()
        && tail.violations.is_empty();
    let body = json!({
        "passed": ok,
        "regret": {"trials": regret.trials.len(), "violations": regret.violations,
                   "min_slack": regret.min_slack, "bound": rcfg.bound(), "detail": regret.trials},
        "contraction": {"seeds": contraction.seeds, "rho": contraction.rho, "violations": contraction.violations,
                        "final_mean_sq_error": contraction.mean_sq_error.last(), "final_bound": contraction.bound.last()},
        "tail": tail,
    });
    match out {
        Some(p) => write_json(p, &body)?,
        None => println!("{}", serde_json::to_string_pretty(&body)?),
    }
    eprintln!(
        "regret: {} violations (min slack {:.3}); contraction: {} violations; tail: {} violations",
        regret.violations.len(),
        regret.min_slack,
        contraction.violations.len(),
        tail.violations.len()
    );
    Ok(if ok { EXIT_OK } else { EXIT_FAILED })
}

fn cmd_gradcheck(seed: u64, tolerance: f64, out: Option<&Path>) -> Result<i32> {
    let layers = gradient_suite(seed)?;
    let spectral = spectral_fidelity(100, 50, 4, seed);
    let partition = partition_of_unity_error(&RunConfig::default().grid()?, 1000, seed);
    let attention = attention_row_error(50, seed)?;
    let ok = layers.iter().all(|l| l.max_rel_error <= tolerance)
        && spectral <= 1e-9
        && partition <= 1e-12
        && attention <= 1e-12;
    let body = json!({
        "passed": ok,
        "tolerance": tolerance,
        "layers": layers,
        "spectral_max_rel_error": spectral,
        "partition_of_unity_max_error": partition,
        "attention_row_sum_max_error": attention,
    });
    match out {
        Some(p) => write_json(p, &body)?,
        None => println!("{}", serde_json::to_string_pretty(&body)?),
    }
    Ok(if ok { EXIT_OK } else { EXIT_FAILED })
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Pretrain { config, data, out } => cmd_pretrain(&config, &data, &out),
        Command::Reconstruct {
            checkpoint,
            input,
            lookback,
            out,
            metrics,
        } => cmd_reconstruct(&checkpoint, &input, lookback, &out, metrics.as_deref()),
        Command::Evaluate { config, eval } => cmd_evaluate(resolve_config(&config)?, &eval, None),
        Command::Ablate { row, config, eval } => {
            let cfg = resolve_config(&config)?.ablate(row)?;
            cmd_evaluate(cfg, &eval, Some(row))
        }
        Command::Simulate {
            checkpoint,
            sim,
            out,
        } => cmd_simulate(&checkpoint, &sim, &out),
        Command::RegretCheck {
            trials,
            horizon,
            contraction_seeds,
            tail_draws,
            seed,
            out,
        } => cmd_regret(
            trials,
            horizon,
            contraction_seeds,
            tail_draws,
            seed,
            out.as_deref(),
        ),
        Command::Gradcheck {
            seed,
            tolerance,
            out,
        } => cmd_gradcheck(seed, tolerance, out.as_deref()),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
