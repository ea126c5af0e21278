use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nowcast::commands::file_positive_fraction;
use nowcast::manifest::file_digest;
use nowcast_core::model::load_model;
use nowcast_core::pipeline::{sample_frames, valid_cells};
use nowcast_core::synth::read_grid;
use nowcast_core::verify::{confusion, roc_auc, skill_scores};

const TINY: &str = r#"
events = 3

[synth]
ny = 24
nx = 24
frames = 8
storms_min = 3
storms_max = 4

[pipeline]
train_events = 2
test_events = 1

[train]
epochs = 2
batch_size = 4
conv_channels = [2, 2, 2, 2]
fc_hidden = 4
lstm_hidden = 4
samples_per_epoch = 8
"#;

fn nowcast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nowcast"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap()
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("experiment.toml");
    fs::write(&cfg, config).unwrap();
    (dir, cfg)
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = nowcast(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            headers
                .iter()
                .zip(rec.unwrap().iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

fn opt(s: &str) -> Option<f64> {
    (s != "undefined").then(|| s.parse().unwrap())
}

#[test]
fn default_synth_writes_seven_valid_events_and_seed_changes_them() {
    let (dir, cfg) = setup("");
    let c = cfg.to_str().unwrap();
    let stdout = run_ok(dir.path(), &["synth", "--config", c]);
    assert_eq!(stdout.lines().filter(|l| l.contains("pixel-frames")).count(), 7);
    let files: Vec<PathBuf> = (0..7).map(|k| dir.path().join(format!("data/event_{k}.nwc"))).collect();
    for f in &files {
        let seq = read_grid(f).unwrap();
        assert_eq!((seq.dims().ny, seq.dims().nx, seq.dims().levels), (48, 60, 20));
    }
    let other = tempfile::tempdir().unwrap();
    run_ok(other.path(), &["synth", "--config", c, "--seed", "9"]);
    for (k, f) in files.iter().enumerate() {
        let g = other.path().join(format!("data/event_{k}.nwc"));
        assert_ne!(file_digest(f).unwrap(), file_digest(&g).unwrap());
    }
}

#[test]
fn zero_events_warns_and_succeeds() {
    let (dir, cfg) = setup("events = 0");
    let out = nowcast(dir.path(), &["synth", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning: zero events"));
    let data = dir.path().join("data");
    assert!(!data.exists() || fs::read_dir(data).unwrap().next().is_none());
}

#[test]
fn bad_invocations_exit_with_code_two() {
    let (dir, cfg) = setup("[train]\nlearning_rat = 0.1\n");
    let c = cfg.to_str().unwrap();
    let out = nowcast(dir.path(), &["synth", "--config", c]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    assert_eq!(nowcast(dir.path(), &["synth"]).status.code(), Some(2));
    fs::write(&cfg, "").unwrap();
    assert_eq!(nowcast(dir.path(), &["synth", "--config", c, "--k", "3"]).status.code(), Some(2));
    assert_eq!(nowcast(dir.path(), &["eval", "--config", c, "--threshold", "2"]).status.code(), Some(2));
}

#[test]
fn stages_require_their_inputs() {
    let (dir, cfg) = setup(TINY);
    let out = nowcast(dir.path(), &["prepare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("prepare") && err.contains("nowcast synth"), "{err}");
}

#[test]
fn full_tiny_run_produces_consistent_artifacts() {
    let (dir, cfg) = setup(TINY);
    let c = cfg.to_str().unwrap();
    run_ok(dir.path(), &["all", "--config", c]);
    let d = dir.path();

    // Sample counts reconcile with cells × frames per event.
    let per_event = valid_cells(read_grid(&d.join("data/event_0.nwc")).unwrap().dims()).len()
        * sample_frames(8).count();
    let (n_train, _, shifted) = file_positive_fraction(&d.join("data/train.nws")).unwrap();
    let (n_val, _, val_shifted) = file_positive_fraction(&d.join("data/val.nws")).unwrap();
    let (n_test, _, test_shifted) = file_positive_fraction(&d.join("data/test.nws")).unwrap();
    assert_eq!(n_train - shifted + n_val, 2 * per_event);
    assert_eq!((n_test, val_shifted, test_shifted), (per_event, 0, 0));

    let report = read_csv(&d.join("report/report.csv"));
    assert_eq!(report.len(), 2);
    for col in ["pod", "far", "csi", "auc", "config_hash"] {
        assert!(report[0].contains_key(col), "missing {col}");
    }
    let hash = report[0]["config_hash"].clone();
    assert_eq!(hash.len(), 16);

    // Recomputing from the prediction dump reproduces the report.
    let preds = read_csv(&d.join("report/predictions.csv"));
    let labels: Vec<u8> = preds.iter().map(|r| r["label"].parse().unwrap()).collect();
    let probs: Vec<f64> = preds.iter().map(|r| r["probability"].parse().unwrap()).collect();
    let pers: Vec<f64> = preds.iter().map(|r| r["persistence"].parse().unwrap()).collect();
    for (row, p) in report.iter().zip([&probs, &pers]) {
        let thr: f64 = row["threshold"].parse().unwrap();
        let s = skill_scores(&confusion(p, &labels, thr).unwrap());
        for (name, v) in [("pod", s.pod), ("far", s.far), ("csi", s.csi)] {
            match (opt(&row[name]), v) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "{name}"),
                (a, b) => assert_eq!(a, b, "{name}"),
            }
        }
        match (opt(&row["auc"]), roc_auc(p, &labels)) {
            (Some(a), Ok((_, b))) => assert!((a - b).abs() <= 1e-12),
            (None, Err(_)) => {}
            other => panic!("auc disagrees: {other:?}"),
        }
    }

    // ROC rows run from the highest threshold to the lowest, per model.
    let roc = read_csv(&d.join("report/roc.csv"));
    for model in ["cnn_lstm", "persistence"] {
        let rows: Vec<_> = roc.iter().filter(|r| r["model"] == model).collect();
        for w in rows.windows(2) {
            let t = |r: &BTreeMap<String, String>| r["threshold"].parse::<f64>().unwrap();
            assert!(t(w[0]) > t(w[1]));
            let f = |r: &BTreeMap<String, String>, k: &str| r[k].parse::<f64>().unwrap();
            assert!(f(w[0], "fpr") <= f(w[1], "fpr") && f(w[0], "tpr") <= f(w[1], "tpr"));
        }
    }

    // Provenance everywhere.
    for entry in fs::read_dir(d.join("report")).unwrap() {
        let p = entry.unwrap().path();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains(&hash), "{} lacks the config hash", p.display());
    }
    let log = read_csv(&d.join("model/train_log.csv"));
    assert!(!log.is_empty() && log.len() <= 2);
    assert!(log.iter().all(|r| r["config_hash"] == hash));
    assert_eq!(load_model(&d.join("model/model.nwm")).unwrap().echo.config_hash, hash);
    let frames = read_csv(&d.join("report/frames.csv"));
    assert_eq!(frames.len(), 2 * sample_frames(8).count());

    // A second run is a no-op.
    let again = run_ok(d, &["all", "--config", c]);
    assert_eq!(again.lines().filter(|l| l.contains("up to date")).count(), 4, "{again}");

    // Changing the configuration needs --force.
    let out = nowcast(d, &["all", "--config", c, "--seed", "5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    run_ok(d, &["all", "--config", c, "--seed", "5", "--force"]);
    let new_hash = read_csv(&d.join("report/report.csv"))[0]["config_hash"].clone();
    assert_ne!(new_hash, hash);
}

#[test]
fn interrupted_run_resumes_after_prepare() {
    let (dir, cfg) = setup(TINY);
    let c = cfg.to_str().unwrap();
    run_ok(dir.path(), &["synth", "--config", c]);
    run_ok(dir.path(), &["prepare", "--config", c]);
    let out = run_ok(dir.path(), &["all", "--config", c]);
    assert!(out.contains("synth: up to date") && out.contains("prepare: up to date"), "{out}");
    assert!(out.contains("train: epoch 0"));

    // Same configuration elsewhere gives byte-identical models.
    let other = tempfile::tempdir().unwrap();
    run_ok(other.path(), &["all", "--config", c]);
    assert_eq!(
        fs::read(dir.path().join("model/model.nwm")).unwrap(),
        fs::read(other.path().join("model/model.nwm")).unwrap()
    );
}

#[test]
fn eval_refuses_foreign_normalizer() {
    let (dir, cfg) = setup(TINY);
    let c = cfg.to_str().unwrap();
    run_ok(dir.path(), &["all", "--config", c]);
    let path = dir.path().join("data/normalizer.json");
    let mut nf: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    nf["normalizer"]["max"][0] = serde_json::json!(69.5);
    fs::write(&path, serde_json::to_vec(&nf).unwrap()).unwrap();
    let out = nowcast(dir.path(), &["eval", "--config", c, "--force"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("eval") && err.contains("normalizer provenance mismatch"), "{err}");
}

#[test]
fn divergence_exits_nonzero_with_epoch() {
    let config = format!("{TINY}optimizer = \"sgd\"\nlearning_rate = 1e300\n");
    let (dir, cfg) = setup(&config);
    let out = nowcast(dir.path(), &["all", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage train failed") && err.contains("epoch 0"), "{err}");
}
