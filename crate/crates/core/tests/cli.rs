use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
window = 12
buffer = 8
channels = 4
hidden = 4
heads = 2
head_units = 4
shared_width = 8
shared_layers = 1
embed = 4
slots = 3
mem_width = 8
private_width = 8
private_layers = 1
decoder_layers = 1
epochs = 2
dam_epochs = 1
kl_dims = 2
drift_window = 10
kl_stride = 2
folds = 3

[suite]
count = 6
length = 60
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curvecast"))
        .current_dir(dir)
        .env_remove("PSR_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let mut csv = String::from("time,value\n");
    for i in 0..60 {
        let t = i as f64;
        csv.push_str(&format!(
            "{t},{}\n",
            50.0 / (1.0 + (-(t - 20.0) * 0.1).exp())
        ));
    }
    std::fs::write(dir.path().join("curve.csv"), csv).unwrap();
    dir
}

fn pretrain(dir: &Path, out: &str) -> Output {
    run(
        dir,
        &[
            "pretrain",
            "--config",
            "tiny.toml",
            "--synthetic",
            "1",
            "--out",
            out,
        ],
    )
}

#[test]
fn missing_config_exits_2() {
    let dir = setup();
    let o = run(
        dir.path(),
        &[
            "pretrain",
            "--config",
            "absent.toml",
            "--synthetic",
            "1",
            "--out",
            "m.ckpt",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.toml"));
    let o = run(
        dir.path(),
        &[
            "pretrain",
            "--set",
            "no_such_key=1",
            "--synthetic",
            "1",
            "--out",
            "m.ckpt",
        ],
    );
    assert_eq!(code(&o), 2);
    let o = run(dir.path(), &["frobnicate"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn pretrain_is_reproducible_and_writes_a_manifest() {
    let dir = setup();
    assert_eq!(code(&pretrain(dir.path(), "a.ckpt")), 0);
    assert_eq!(code(&pretrain(dir.path(), "b.ckpt")), 0);
    let a = std::fs::read(dir.path().join("a.ckpt")).unwrap();
    let b = std::fs::read(dir.path().join("b.ckpt")).unwrap();
    assert_eq!(a, b);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.ckpt.run.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "pretrain");
    assert_eq!(manifest["config"]["window"], 12);
    assert_eq!(manifest["seed"], 42);

    let o = Command::new(env!("CARGO_BIN_EXE_curvecast"))
        .current_dir(dir.path())
        .env("PSR_SEED", "7")
        .args([
            "pretrain",
            "--config",
            "tiny.toml",
            "--synthetic",
            "1",
            "--out",
            "c.ckpt",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let c = std::fs::read(dir.path().join("c.ckpt")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn reconstruct_outputs_and_errors() {
    let dir = setup();
    assert_eq!(code(&pretrain(dir.path(), "m.ckpt")), 0);
    let o = run(
        dir.path(),
        &[
            "reconstruct",
            "--checkpoint",
            "m.ckpt",
            "--input",
            "curve.csv",
            "--lookback",
            "0.45",
            "--out",
            "rec.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut rd = csv::Reader::from_path(dir.path().join("rec.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 60);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(&r[5], if i < 27 { "false" } else { "true" }, "row {i}");
    }
    let metrics: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("rec.csv.metrics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(metrics["observed"], 27);
    assert!(metrics["mae"].as_f64().unwrap().is_finite());
    assert!(dir.path().join("rec.csv.run.json").exists());

    // 0.1 · 60 = 6 observed samples, fewer than the window of 12
    let o = run(
        dir.path(),
        &[
            "reconstruct",
            "--checkpoint",
            "m.ckpt",
            "--input",
            "curve.csv",
            "--lookback",
            "0.1",
            "--out",
            "x.csv",
        ],
    );
    assert_eq!(code(&o), 4);
    let o = run(
        dir.path(),
        &[
            "reconstruct",
            "--checkpoint",
            "m.ckpt",
            "--input",
            "curve.csv",
            "--lookback",
            "1.0",
            "--out",
            "x.csv",
        ],
    );
    assert_ne!(code(&o), 0);

    std::fs::write(dir.path().join("bad.csv"), "time,value\n0,1\n1,oops\n").unwrap();
    let o = run(
        dir.path(),
        &[
            "reconstruct",
            "--checkpoint",
            "m.ckpt",
            "--input",
            "bad.csv",
            "--out",
            "x.csv",
        ],
    );
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.csv:3"));
    let o = run(
        dir.path(),
        &[
            "reconstruct",
            "--checkpoint",
            "curve.csv",
            "--input",
            "curve.csv",
            "--out",
            "x.csv",
        ],
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn simulate_is_deterministic() {
    let dir = setup();
    assert_eq!(code(&pretrain(dir.path(), "m.ckpt")), 0);
    let sim = |out: &str| {
        run(
            dir.path(),
            &[
                "simulate",
                "--checkpoint",
                "m.ckpt",
                "--runs",
                "2",
                "--drift-step",
                "40",
                "--out",
                out,
            ],
        )
    };
    assert_eq!(code(&sim("s1")), 0);
    assert_eq!(code(&sim("s2")), 0);
    let r1 = std::fs::read_to_string(dir.path().join("s1/report.json")).unwrap();
    let r2 = std::fs::read_to_string(dir.path().join("s2/report.json")).unwrap();
    assert_eq!(r1, r2);
    let trace = std::fs::read_to_string(dir.path().join("s1/trace.csv")).unwrap();
    assert!(trace.starts_with("step,timestamp,truth,clean,predicted,drift_flag"));
    assert_eq!(trace.lines().count(), 61);
}

#[test]
fn evaluate_and_ablate_write_reports() {
    let dir = setup();
    let o = run(
        dir.path(),
        &[
            "evaluate",
            "--config",
            "tiny.toml",
            "--synthetic",
            "2",
            "--jobs",
            "2",
            "--out",
            "ev",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ev/metrics.json")).unwrap())
            .unwrap();
    assert_eq!(m["report"]["folds"].as_object().unwrap().len(), 3);
    assert_eq!(m["curves"].as_array().unwrap().len(), 6);
    assert!(std::fs::read_to_string(dir.path().join("ev/metrics.md"))
        .unwrap()
        .contains("| Overall |"));

    // the fold-parallel run matches a sequential one
    let o = run(
        dir.path(),
        &[
            "evaluate",
            "--config",
            "tiny.toml",
            "--synthetic",
            "2",
            "--out",
            "ev1",
        ],
    );
    assert_eq!(code(&o), 0);
    let seq: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("ev1/metrics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(seq["report"]["overall"], m["report"]["overall"]);

    let o = run(
        dir.path(),
        &[
            "ablate",
            "--row",
            "3",
            "--config",
            "tiny.toml",
            "--synthetic",
            "2",
            "--out",
            "ab",
        ],
    );
    assert_eq!(code(&o), 0);
    let md = std::fs::read_to_string(dir.path().join("ab/metrics.md")).unwrap();
    assert!(md.contains("periodic operator off"));
    let o = run(
        dir.path(),
        &[
            "ablate",
            "--row",
            "0",
            "--config",
            "tiny.toml",
            "--synthetic",
            "2",
            "--out",
            "ab",
        ],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn checks_pass() {
    let dir = setup();
    let o = run(dir.path(), &["gradcheck", "--out", "g.json"]);
    assert_eq!(code(&o), 0);
    let g: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(g["passed"], true);
    let o = run(
        dir.path(),
        &[
            "regret-check",
            "--trials",
            "4",
            "--horizon",
            "2000",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(code(&o), 0);
}

#[test]
fn shipped_compact_config_matches_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/compact.toml");
    let cfg = curvecast::config::RunConfig::load(&path).unwrap();
    assert_eq!(cfg, curvecast::config::RunConfig::compact());
}
