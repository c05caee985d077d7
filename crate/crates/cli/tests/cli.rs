mod common;

use std::fs;

use common::{bin, read_rows, run_ok, small_config, stdout, synthetic_csv};

fn stderr_of(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn acf_finds_the_period() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_csv(dir.path(), "s.csv", 1200, 24);
    let out_csv = dir.path().join("acf.csv");
    let out = run_ok(&["acf", "--data", data.to_str().unwrap(), "--out", out_csv.to_str().unwrap()]);
    assert_eq!(stdout(&out).trim(), "W=24");
    let mut r = csv::Reader::from_path(&out_csv).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header, ["lag", "acf", "v0", "v1", "v2"]);
    assert!(r.records().count() > 100);
}

#[test]
fn acf_of_constant_series_has_no_period() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.csv");
    let mut text = String::from("date,a\n");
    for t in 0..600 {
        text += &format!("{t},1.5\n");
    }
    fs::write(&path, text).unwrap();
    let out = run_ok(&["acf", "--data", path.to_str().unwrap()]);
    assert_eq!(stdout(&out).trim(), "W=none");
}

#[test]
fn train_then_eval_matches() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_csv(dir.path(), "s.csv", 1200, 24);
    let cfg = small_config(dir.path(), &data, "");
    let run = dir.path().join("run");
    let out = run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", run.to_str().unwrap()]);
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("dataset,horizon,seed,mse,mae"));
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(fields[..3], ["s", "24", "3000"]);
    for f in ["metrics.csv", "history.csv", "checkpoint.hpmx", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ck = run.join("checkpoint.hpmx");
    let out = run_ok(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    let text = stdout(&out);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[..3], ["s", "test", "24"]);
    // the checkpoint reproduces the test score written at the end of training
    let mse: f64 = row[3].parse().unwrap();
    let trained: f64 = fields[3].parse().unwrap();
    assert!((mse - trained).abs() <= 1e-9 * trained.max(1.0), "{mse} vs {trained}");

    let (code, err) = stderr_of(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--horizon",
        "48",
    ]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[usage]:") && err.contains("H=24"), "{err}");
}

#[test]
fn zero_residual_checkpoint_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_csv(dir.path(), "s.csv", 1200, 24);
    let cfg = small_config(dir.path(), &data, "");
    let ck = dir.path().join("zero.hpmx");
    run_ok(&["init", "--config", cfg.to_str().unwrap(), "--zero-residual", "--out", ck.to_str().unwrap()]);
    let out = run_ok(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap(), "--split", "val"]);
    let text = stdout(&out);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "val");
    let mse: f64 = row[3].parse().unwrap();
    assert!(mse.is_finite() && mse > 0.0);

    // with the residual branch silenced the window splits into cycle + residual only
    let dec = dir.path().join("dec");
    run_ok(&[
        "decompose",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--window-index",
        "2",
        "--out",
        dec.to_str().unwrap(),
    ]);
    let original = read_rows(&dec.join("original.csv"));
    let cycle = read_rows(&dec.join("cycle.csv"));
    let residual = read_rows(&dec.join("residual.csv"));
    assert_eq!(original.len(), 48);
    for ((o, c), r) in original.iter().zip(&cycle).zip(&residual) {
        for k in 0..3 {
            assert_eq!(c[k] + r[k], o[k]);
        }
    }
    assert!(dec.join("band_d1.csv").exists() && dec.join("band_a1.csv").exists());
}

#[test]
fn ablate_all_and_unknown_flag() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_csv(dir.path(), "s.csv", 900, 24);
    let cfg = small_config(dir.path(), &data, "");
    let out_csv = dir.path().join("abl.csv");
    run_ok(&["ablate", "--config", cfg.to_str().unwrap(), "--flags", "all", "--out", out_csv.to_str().unwrap()]);
    let rows = csv::Reader::from_path(&out_csv).unwrap().records().count();
    assert!(rows >= 5, "{rows} rows");

    let (code, err) = stderr_of(&["ablate", "--config", cfg.to_str().unwrap(), "--flags", "no_such_thing"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[usage]:") && err.contains("no_such_thing"), "{err}");
}

#[test]
fn search_writes_trials_and_best_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_csv(dir.path(), "s.csv", 900, 24);
    let cfg = small_config(dir.path(), &data, "");
    let out = dir.path().join("search");
    run_ok(&["search", "--config", cfg.to_str().unwrap(), "--trials", "2", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(csv::Reader::from_path(out.join("trials.csv")).unwrap().records().count(), 2);
    let best = fs::read_to_string(out.join("best_config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&best).unwrap();
    assert!(v["model"]["d_model"].is_u64());
}

#[test]
fn protocol_summarises_each_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_csv(dir.path(), "s.csv", 900, 24);
    let cfg = small_config(dir.path(), &data, "");
    let out = dir.path().join("proto");
    run_ok(&[
        "protocol",
        "--config",
        cfg.to_str().unwrap(),
        "--horizons",
        "12,24",
        "--seeds",
        "1,2",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(csv::Reader::from_path(out.join("metrics.csv")).unwrap().records().count(), 4);
    let horizons: Vec<String> = csv::Reader::from_path(out.join("summary.csv"))
        .unwrap()
        .records()
        .map(|r| r.unwrap()[1].to_string())
        .collect();
    assert_eq!(horizons.len(), 3, "{horizons:?}");
    assert_eq!(horizons[..2], ["12", "24"]);
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"dataset": {"path": "x.csv"}, "model": {"d_modle": 8}}"#).unwrap();
    let (code, err) = stderr_of(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[config]:") && err.contains("model.d_modle"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn bad_arguments_are_usage_errors() {
    let (code, err) = stderr_of(&["train"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error[usage]:"), "{err}");
    let (code, err) = stderr_of(&["acf", "--data", "/nonexistent/x.csv"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error["), "{err}");
}

#[test]
fn relative_paths_fall_back_to_data_dir() {
    let data_dir = tempfile::tempdir().unwrap();
    synthetic_csv(data_dir.path(), "s.csv", 800, 24);
    let cwd = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(cwd.path())
        .env("HPMIXER_DATA_DIR", data_dir.path())
        .args(["acf", "--data", "s.csv"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).trim(), "W=24");
}
