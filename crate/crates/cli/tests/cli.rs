use std::path::PathBuf;
use std::process::Command;

use subsep_cli::config::{DatasetConfig, ExperimentConfig};
use subsep_cli::experiment::{csse_heatmap_csv, evaluate_checkpoint, selftest, selftest_config, METHODS};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_parse() {
    let mut names: Vec<_> = std::fs::read_dir(configs_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "cfg"))
        .collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for path in names {
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
        assert!(cfg.trials > 0);
        assert_eq!(cfg.train.learning_rate, 1e-3, "{}", path.display());
        if let DatasetConfig::Synthetic { .. } = cfg.dataset {
            cfg.validate().unwrap();
        }
    }
    let yale = ExperimentConfig::load(configs_dir().join("yaleb.cfg")).unwrap();
    assert_eq!((yale.loss.lambda1, yale.loss.lambda2, yale.loss.lambda3), (3.0, 1.0, 100.0));
    let mnist = ExperimentConfig::load(configs_dir().join("mnist.cfg")).unwrap();
    assert_eq!(mnist.model.arch().iter().map(|l| l.channels).collect::<Vec<_>>(), [30, 20, 10]);
}

#[test]
fn selftest_outputs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let report = selftest(dir.path(), &mut |_| {}).unwrap();
    let ckpt = dir.path().join("trial_0/model.ckpt");

    let again = evaluate_checkpoint(&selftest_config(), &ckpt, 0).unwrap();
    for ((name, acc), m) in again.iter().zip(&report.methods) {
        assert_eq!(name, &m.method);
        assert_eq!(*acc, m.accuracies[0]);
    }
    assert_eq!(again.len(), METHODS.len());

    let model = &report.trials[0].model;
    let n0 = model.class_sizes()[0];
    let csv = csse_heatmap_csv(model, 0).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), n0 + 1);
    assert!(rows.iter().all(|r| r.split(',').count() == n0));
    for (i, r) in rows[1..].iter().enumerate() {
        let diag: f64 = r.split(',').nth(i).unwrap().parse().unwrap();
        assert_eq!(diag, 0.0);
    }
    assert!(csse_heatmap_csv(model, 99).is_err());
}

#[test]
fn binary_reports_stage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, selftest_config().to_toml().unwrap().replace("trials = 1", "trials = 0")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_subsep"))
        .args(["train", "--config", bad.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("config") && err.contains("trials"), "{err}");

    let out = Command::new(env!("CARGO_BIN_EXE_subsep"))
        .args(["heatmap", "--checkpoint", "/nonexistent.ckpt", "--out", "/tmp/x.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}
