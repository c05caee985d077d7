#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hpmixer::data::{synthetic_periodic, write_csv};

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hpmixer"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn hpmixer");
    assert!(
        out.status.success(),
        "hpmixer {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Three-channel period-24 series with mild noise.
pub fn synthetic_csv(dir: &Path, name: &str, len: usize, period: usize) -> PathBuf {
    let values = synthetic_periodic(3, len, period, 0.1, 5);
    let cols: Vec<String> = (0..3).map(|c| format!("v{c}")).collect();
    let path = dir.join(name);
    write_csv(&path, &cols, &values, 0).unwrap();
    path
}

/// Small fast config over `data`.
pub fn small_config(dir: &Path, data: &Path, extra_train: &str) -> PathBuf {
    let text = format!(
        r#"{{
  "dataset": {{"path": {data:?}}},
  "model": {{"lookback": 48, "horizon": 24, "cycle_len": 24, "levels": 1, "patch_coarse": 12,
             "d_model": 16, "d_ff": 16, "n_heads": 2}},
  "train": {{"epochs": 2, "batch_size": 16, "max_batches_per_epoch": 3{extra_train}}}
}}"#
    );
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

/// Reads a `t,<channels..>` CSV into rows of values (the time column dropped).
pub fn read_rows(path: &Path) -> Vec<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().skip(1).map(|v| v.parse::<f64>().unwrap()).collect())
        .collect()
}
