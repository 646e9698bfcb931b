use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"{
  "dataset": {"kind": "two_moons", "n": 120, "noise": 0.2},
  "n_runs": 3,
  "test_t": 10,
  "threshold_grid": [0.0, 0.25, 0.5, 0.75, 1.0],
  "methods": [
    {"name": "ce", "mc_dropout": {"epochs": 20, "lr": 1.0}},
    {"name": "ce_ece", "mc_dropout": {"epochs": 20, "lr": 1.0, "loss": {"kind": "ce_ece"}}}
  ]
}"#;

fn caldrop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caldrop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config(dir: &TempDir, text: &str) -> PathBuf {
    let path = dir.path().join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_small(dir: &TempDir, out: &str, extra: &[&str]) -> (PathBuf, Output) {
    let cfg = config(dir, SMALL);
    let out = dir.path().join(out);
    let mut args = vec!["run", "--config", s(&cfg), "--out", s(&out), "--quiet"];
    args.extend_from_slice(extra);
    let output = caldrop(&args);
    (out, output)
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(caldrop(&["--help"]).status.code(), Some(0));
    assert_eq!(caldrop(&["--version"]).status.code(), Some(0));
    let out = caldrop(&["run", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("--runs"));
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(caldrop(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(caldrop(&["run", "--runs", "many"]).status.code(), Some(1));

    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, r#"{"n_runs": 0}"#);
    let out = caldrop(&["run", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_runs"));

    let out = caldrop(&["run", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(1));

    let out = caldrop(&["run", "--method", "nope", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unwritable_output_fails_at_startup() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let started = std::time::Instant::now();
    let out = caldrop(&["run", "--out", s(&blocker.join("results")), "--quiet"]);
    assert_eq!(out.status.code(), Some(1));
    // fails before any training
    assert!(started.elapsed().as_secs() < 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot write"));
}

#[test]
fn run_is_byte_identical_across_job_counts() {
    let dir = TempDir::new().unwrap();
    let (a, oa) = run_small(&dir, "a", &["--jobs", "1", "--seed", "7"]);
    let (b, ob) = run_small(&dir, "b", &["--jobs", "3", "--seed", "7"]);
    assert!(
        oa.status.success(),
        "{}",
        String::from_utf8_lossy(&oa.stderr)
    );
    assert!(ob.status.success());
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for expected in [
        "runs.csv",
        "aggregate.csv",
        "summary.json",
        "samples.csv",
        "curves_0.2.csv",
        "distance_box.svg",
        "hist_ce.svg",
        "ua_0.2.svg",
        "ece_0.2.svg",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected}");
    }
    for name in names {
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap(),
            "{name:?} differs"
        );
    }

    let (c, _) = run_small(&dir, "c", &["--seed", "8"]);
    assert_ne!(
        std::fs::read(a.join("runs.csv")).unwrap(),
        std::fs::read(c.join("runs.csv")).unwrap()
    );
}

#[test]
fn tables_are_consistent() {
    let dir = TempDir::new().unwrap();
    let (out, o) = run_small(&dir, "r", &[]);
    assert!(o.status.success());

    let runs = csv_rows(&out.join("runs.csv"));
    assert_eq!(runs.len(), 3 * 2);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    for (i, method) in ["ce", "ce_ece"].iter().enumerate() {
        let mine: Vec<_> = runs.iter().filter(|r| &r[1] == *method).collect();
        for (col, key) in [(2, "accuracy"), (5, "distance"), (6, "ece")] {
            let vals: Vec<f64> = mine.iter().filter_map(|r| r[col].parse().ok()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let reported = summary["methods"][i][key]["mean"].as_f64().unwrap();
            assert!((mean - reported).abs() < 1e-9, "{method} {key}");
        }
        for r in &mine {
            let acc: f64 = r[2].parse().unwrap();
            assert!((0.0..=100.0).contains(&acc));
        }
    }

    // at threshold 1 every sample is certain, so uacc is the plain accuracy
    let curves = csv_rows(&out.join("curves_0.2.csv"));
    assert_eq!(curves.len(), 5 * 2);
    for r in &curves {
        if let Ok(u) = r[2].parse::<f64>() {
            assert!((0.0..=1.0).contains(&u));
        }
        if &r[0] == "1" {
            let acc = summary["methods"]
                .as_array()
                .unwrap()
                .iter()
                .find(|m| m["method"] == r[1])
                .unwrap()["accuracy"]["mean"]
                .as_f64()
                .unwrap();
            assert!((r[2].parse::<f64>().unwrap() - acc / 100.0).abs() < 1e-12);
            assert_eq!(&r[12], "0");
        }
    }
}

#[test]
fn failing_runs_past_the_threshold_exit_two_with_outputs() {
    let dir = TempDir::new().unwrap();
    // the first layer expects 3 inputs, so every training attempt fails
    let cfg = config(
        &dir,
        r#"{
          "dataset": {"kind": "two_moons", "n": 60, "noise": 0.2},
          "n_runs": 2,
          "test_t": 5,
          "methods": [{"name": "broken", "mc_dropout": {"epochs": 5, "layer_sizes": [3, 4, 2]}}]
        }"#,
    );
    let out = dir.path().join("r");
    let o = caldrop(&["run", "--config", s(&cfg), "--out", s(&out), "--quiet"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("2 of 2 runs failed"));
    let summary = std::fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("first layer must take 2-D points"));
}

#[test]
fn generate_train_evaluate_pipeline() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, SMALL);
    let out = dir.path().join("p");
    let common = ["--config", s(&cfg), "--out", s(&out), "--seed", "3"];

    let o = caldrop(&[&["generate-data"][..], &common].concat());
    assert!(o.status.success());
    assert_eq!(csv_rows(&out.join("data.csv")).len(), 120);
    assert_eq!(csv_rows(&out.join("train.csv")).len(), 84);
    let test_csv = out.join("test.csv");
    assert_eq!(csv_rows(&test_csv).len(), 36);

    let train_csv = out.join("train.csv");
    let o = caldrop(
        &[
            &["train", "--data", s(&train_csv), "--method", "ce_ece"][..],
            &common,
        ]
        .concat(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let model = std::fs::read_to_string(out.join("model.json")).unwrap();
    assert!(model.contains("layer_sizes"));

    let model_path = out.join("model.json");
    let o = caldrop(
        &[
            &[
                "evaluate",
                "--model",
                s(&model_path),
                "--data",
                s(&test_csv),
            ][..],
            &common,
        ]
        .concat(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let preds = csv_rows(&out.join("predictions.csv"));
    assert_eq!(preds.len(), 36);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n"], 36);
    let correct = preds.iter().filter(|r| &r[5] == "1").count();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((acc - 100.0 * correct as f64 / 36.0).abs() < 1e-9);

    let o = caldrop(
        &[
            &["train", "--data", s(&train_csv), "--method", "ce,ce_ece"][..],
            &common,
        ]
        .concat(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ensemble_model_round_trips_through_evaluate() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        &dir,
        r#"{"dataset": {"kind": "blobs", "n": 90, "std": 0.8},
            "test_t": 3,
            "methods": [{"name": "ens", "ensemble": {"n_members": 3, "epochs": 10, "lr": 0.5}}]}"#,
    );
    let out = dir.path().join("e");
    let common = ["--config", s(&cfg), "--out", s(&out)];
    assert!(caldrop(&[&["generate-data"][..], &common].concat())
        .status
        .success());
    let data = out.join("data.csv");
    let o = caldrop(&[&["train", "--data", s(&data)][..], &common].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(out.join("model.json"))
        .unwrap()
        .starts_with('['));
    let model = out.join("model.json");
    let o = caldrop(
        &[
            &["evaluate", "--model", s(&model), "--data", s(&data)][..],
            &common,
        ]
        .concat(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&out.join("predictions.csv")).len(), 90);
}

#[test]
fn sweep_writes_one_curve_file_per_level() {
    let dir = TempDir::new().unwrap();
    let text = SMALL.replacen(
        "\"n_runs\": 3",
        "\"n_runs\": 2, \"sweep_levels\": [0.2, 0.3]",
        1,
    );
    let cfg = config(&dir, &text);
    let out = dir.path().join("s");
    let o = caldrop(&["sweep", "--config", s(&cfg), "--out", s(&out), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "curves_0.2.csv",
        "curves_0.3.csv",
        "runs_0.2.csv",
        "summary_0.3.json",
        "ece_levels.csv",
        "ua_0.3.svg",
        "ece_levels.svg",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let levels = csv_rows(&out.join("ece_levels.csv"));
    assert_eq!(levels.len(), 2 * 2);
}

#[test]
fn plot_reports_malformed_tables() {
    let dir = TempDir::new().unwrap();
    let o = caldrop(&["plot", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));

    std::fs::write(
        dir.path().join("runs.csv"),
        "run,method,accuracy,mu1,mu2,distance,ece\n0,ce,97,0.1,0.5,0.4,0.02\n1,ce,x,,,,0.1\n",
    )
    .unwrap();
    let o = caldrop(&["plot", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("runs.csv") && err.contains("row 3"), "{err}");

    std::fs::write(
        dir.path().join("runs.csv"),
        "run,method,accuracy,mu1,mu2,distance,ece\n0,ce,97,0.1,0.5,0.4,0.02\n1,ce,98,0.1,0.4,0.3,0.1\n",
    )
    .unwrap();
    let o = caldrop(&["plot", "--out", s(dir.path())]);
    assert!(o.status.success());
    let first = std::fs::read(dir.path().join("distance_box.svg")).unwrap();
    assert!(caldrop(&["plot", "--out", s(dir.path())]).status.success());
    assert_eq!(
        first,
        std::fs::read(dir.path().join("distance_box.svg")).unwrap()
    );
}
