use std::path::Path;

use log::warn;
use serde::Serialize;

use super::{train, Metrics, TrainConfig};
use crate::data::{DatasetBundle, RawSeries, SplitKind};
use crate::error::{Error, Result};
use crate::model::{AblationFlag, ModelConfig};

/// Seeds averaged by the evaluation protocol.
pub const PROTOCOL_SEEDS: [u64; 5] = [3000, 3001, 3002, 3003, 3004];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
}

/// Seed-averaged cell; `horizon` is the horizon or `Avg`. Metrics are
/// `None` when no seed of the cell finished.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub horizon: String,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolReport {
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Trains one model per (horizon, seed) and averages test metrics over seeds,
/// plus an `Avg` row over horizons. Failed runs are logged and left out.
pub fn eval_protocol(
    name: &str,
    series: &RawSeries,
    kind: SplitKind,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    horizons: &[usize],
    seeds: &[u64],
) -> Result<ProtocolReport> {
    if horizons.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("protocol needs at least one horizon and one seed".into()));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut horizon_means = Vec::new();
    for &h in horizons {
        let config = ModelConfig {
            horizon: h,
            ..base.clone()
        };
        let bundle = DatasetBundle::new(name, series.clone(), kind, config.lookback, h)?;
        let mut cell = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            match train(&config, &cfg, &bundle) {
                Ok(run) => {
                    rows.push(MetricRow {
                        dataset: name.to_string(),
                        horizon: h,
                        seed,
                        mse: run.test.mse,
                        mae: run.test.mae,
                    });
                    cell.push(run.test);
                }
                Err(e @ Error::Diverged(_)) => warn!("{name} H={h} seed {seed}: {e}"),
                Err(e) => return Err(e),
            }
        }
        let m = (
            mean(&cell.iter().map(|m| m.mse).collect::<Vec<_>>()),
            mean(&cell.iter().map(|m| m.mae).collect::<Vec<_>>()),
        );
        horizon_means.push(m);
        summary.push(SummaryRow {
            dataset: name.to_string(),
            horizon: h.to_string(),
            mse: m.0,
            mae: m.1,
            seeds: cell.len(),
        });
    }
    let all: Option<Vec<(f64, f64)>> = horizon_means.iter().map(|&(a, b)| Some((a?, b?))).collect();
    summary.push(SummaryRow {
        dataset: name.to_string(),
        horizon: "Avg".into(),
        mse: all.as_ref().and_then(|v| mean(&v.iter().map(|x| x.0).collect::<Vec<_>>())),
        mae: all.as_ref().and_then(|v| mean(&v.iter().map(|x| x.1).collect::<Vec<_>>())),
        seeds: seeds.len(),
    });
    Ok(ProtocolReport { rows, summary })
}

/// `dataset,horizon,seed,mse,mae`.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "horizon", "seed", "mse", "mae"])?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.horizon.to_string(),
            r.seed.to_string(),
            r.mse.to_string(),
            r.mae.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| x.to_string())
}

/// `dataset,horizon,mse,mae,seeds`; missing cells are written as `absent`.
pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "horizon", "mse", "mae", "seeds"])?;
    for r in rows {
        w.write_record([r.dataset.clone(), r.horizon.clone(), cell(r.mse), cell(r.mae), r.seeds.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub flag: Option<AblationFlag>,
    pub test: Metrics,
    pub val_mse: f64,
}

/// Trains the base config once per flag (the full model when `flags` is
/// empty) with identical seed and data.
pub fn run_ablation(
    bundle: &DatasetBundle,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    flags: &[AblationFlag],
) -> Result<Vec<AblationRow>> {
    let variants: Vec<Option<AblationFlag>> = if flags.is_empty() {
        vec![None]
    } else {
        flags.iter().copied().map(Some).collect()
    };
    variants
        .into_iter()
        .map(|flag| {
            let config = match flag {
                Some(f) => base.clone().with_flag(f),
                None => base.clone(),
            };
            let run = train(&config, train_cfg, bundle)?;
            Ok(AblationRow {
                variant: flag.map_or("HPMixer", AblationFlag::label).to_string(),
                flag,
                test: run.test,
                val_mse: run.best_val_mse(),
            })
        })
        .collect()
}

/// `variant,flag,mse,mae,val_mse`.
pub fn write_ablation_csv(path: &Path, dataset: &str, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "variant", "flag", "mse", "mae", "val_mse"])?;
    for r in rows {
        w.write_record([
            dataset.to_string(),
            r.variant.clone(),
            r.flag.map_or("none", AblationFlag::name).to_string(),
            r.test.mse.to_string(),
            r.test.mae.to_string(),
            r.val_mse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
