//! Training loop, evaluation, reference baselines, the multi-seed protocol,
//! ablations and random hyperparameter search.

mod protocol;
mod search;

pub use protocol::{
    eval_protocol, run_ablation, write_ablation_csv, write_metrics_csv, write_summary_csv, AblationRow, MetricRow,
    ProtocolReport, SummaryRow, PROTOCOL_SEEDS,
};
pub use search::{random_search, sample_config, write_trial_log, SearchResult, Trial};

use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cycle::{estimate_cycle_length, DEFAULT_LAG_MIN, DEFAULT_MAX_LAG};
use crate::data::{DatasetBundle, MetricAccumulator, Split};
use crate::error::{Error, Result};
use crate::model::{HpMixer, ModelConfig};
use crate::tensor::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use crate::wavelet::swt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Caps optimizer steps per epoch (all batches when `None`).
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 30,
            patience: 5,
            batch_size: 32,
            seed: 3000,
            max_batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(Error::Config("max_batches_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: HpMixer,
    /// Parameters of the best validation epoch.
    pub store: ParamStore<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub test: Metrics,
    pub steps: u64,
}

impl TrainRun {
    pub fn best_val_mse(&self) -> f64 {
        self.history[self.best_epoch].val_mse
    }
}

/// Fills channels from the bundle and, when unset, the cycle length from the
/// ACF of the standardized train split.
pub fn resolve_config(config: &ModelConfig, bundle: &DatasetBundle) -> Result<ModelConfig> {
    let mut cycle_len = config.cycle_len;
    if cycle_len == 0 && !config.ablation.no_cycle_module {
        let train = bundle.split_values(Split::Train);
        let t = train.shape()[1];
        let max_lag = DEFAULT_MAX_LAG.min((t - 1) / 2);
        let profile = estimate_cycle_length(&train, max_lag, DEFAULT_LAG_MIN.min(max_lag))?;
        cycle_len = profile.peak_lag.ok_or_else(|| {
            Error::Config(format!(
                "{}: no ACF peak in [{}, {max_lag}]; set cycle_len explicitly",
                bundle.name, profile.lag_min
            ))
        })?;
        info!("{}: cycle length {cycle_len} from ACF", bundle.name);
    }
    let resolved = config.clone().resolve(bundle.channels(), cycle_len);
    if resolved.channels != bundle.channels() {
        return Err(Error::Config(format!(
            "config has channels={} but {} has {}",
            resolved.channels,
            bundle.name,
            bundle.channels()
        )));
    }
    if (resolved.lookback, resolved.horizon) != (bundle.lookback, bundle.horizon) {
        return Err(Error::Config(format!(
            "config window L={}, H={} differs from dataset window L={}, H={}",
            resolved.lookback, resolved.horizon, bundle.lookback, bundle.horizon
        )));
    }
    resolved.validate()?;
    Ok(resolved)
}

/// Metrics of `model` over every window of `split`.
pub fn evaluate(
    model: &HpMixer,
    store: &ParamStore<f32>,
    bundle: &DatasetBundle,
    split: Split,
    batch_size: usize,
) -> Result<Metrics> {
    let mut acc = MetricAccumulator::default();
    for starts in bundle.batches(split, batch_size, None) {
        let batch = bundle.batch::<f32>(&starts)?;
        let pred = model.predict(store, &batch.inputs, &batch.t_starts)?;
        acc.add(&pred, &batch.targets)?;
    }
    Ok(Metrics {
        mse: acc.mse(),
        mae: acc.mae(),
    })
}

/// Norms of the wavelet bands of the residual input, for divergence reports.
fn band_norms(model: &HpMixer, store: &ParamStore<f32>, x: &Tensor<f32>, t_starts: &[usize]) -> Vec<f64> {
    let tape = Tape::eval();
    let parts = match model.forward_parts(&tape, store, &tape.constant(x.clone()), t_starts) {
        Ok(p) => p,
        Err(_) => return Vec::new(),
    };
    match &model.filters {
        Some(bank) => swt(&tape, store, bank, &parts.x_resid)
            .map(|c| c.bands().iter().map(|b| b.value().norm()).collect())
            .unwrap_or_default(),
        None => vec![parts.x_resid.value().norm()],
    }
}

/// Trains with Adam on the batch MSE, keeps the parameters of the best
/// validation epoch and evaluates them once on the test split.
pub fn train(config: &ModelConfig, train_cfg: &TrainConfig, bundle: &DatasetBundle) -> Result<TrainRun> {
    train_cfg.validate()?;
    let config = resolve_config(config, bundle)?;
    let mut root = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let (model, mut store) = HpMixer::init::<f32>(config, root.next_u64())?;
    let mut adam = Adam::new(
        &store,
        AdamConfig {
            lr: train_cfg.lr,
            ..AdamConfig::default()
        },
    );
    info!(
        "{}: training {} parameters ({} trainable)",
        bundle.name,
        store.count(),
        store.trainable_count()
    );

    let mut history = Vec::new();
    let mut best: Option<(usize, ParamStore<f32>)> = None;
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..train_cfg.epochs {
        let mut batches = bundle.batches(Split::Train, train_cfg.batch_size, Some(root.next_u64()));
        if let Some(cap) = train_cfg.max_batches_per_epoch {
            batches.truncate(cap);
        }
        let mut loss_sum = 0.0;
        for starts in &batches {
            let batch = bundle.batch::<f32>(starts)?;
            let tape = Tape::training(root.next_u64());
            let pred = model.forward(&tape, &store, &tape.constant(batch.inputs.clone()), &batch.t_starts)?;
            let loss = pred.mse_loss(&tape.constant(batch.targets.clone()))?;
            let value = loss.value().data()[0] as f64;
            let grads = loss.backward()?;
            if !value.is_finite() || !grads.param_norm().is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, step {} (lr {}): loss {value}, grad norm {}, band norms {:?}",
                    adam.step_count() + 1,
                    train_cfg.lr,
                    grads.param_norm(),
                    band_norms(&model, &store, &batch.inputs, &batch.t_starts)
                )));
            }
            adam.step(&mut store, &grads)?;
            loss_sum += value;
        }
        let val = evaluate(&model, &store, bundle, Split::Val, train_cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            val_mse: val.mse,
            val_mae: val.mae,
        };
        info!(
            "epoch {epoch}: train loss {:.6}, val mse {:.6}, val mae {:.6}",
            record.train_loss, val.mse, val.mae
        );
        history.push(record);
        if !val.mse.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite validation mse at epoch {epoch} (lr {})",
                train_cfg.lr
            )));
        }
        if val.mse < best_val {
            best_val = val.mse;
            best = Some((epoch, store.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale > train_cfg.patience {
                info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (best_epoch, store) = best.expect("at least one finite epoch");
    let test = evaluate(&model, &store, bundle, Split::Test, train_cfg.batch_size)?;
    info!("{}: test mse {:.6}, mae {:.6} (epoch {best_epoch})", bundle.name, test.mse, test.mae);
    Ok(TrainRun {
        model,
        store,
        history,
        best_epoch,
        test,
        steps: adam.step_count(),
    })
}

/// Forecast that repeats the last lookback value over the horizon.
pub fn naive_repeat_last(bundle: &DatasetBundle, split: Split) -> Result<Metrics> {
    let mut acc = MetricAccumulator::default();
    let (l, h) = (bundle.lookback, bundle.horizon);
    for starts in bundle.batches(split, 256, None) {
        let batch = bundle.batch::<f64>(&starts)?;
        let pred = Tensor::from_fn(batch.targets.shape(), |i| batch.inputs.data()[(i / h) * l + l - 1]);
        acc.add(&pred, &batch.targets)?;
    }
    Ok(Metrics {
        mse: acc.mse(),
        mae: acc.mae(),
    })
}

/// Cycle-only forecaster: per phase `t mod W` and channel, the mean of the
/// standardized train rows; the forecast reads that table at future phases.
pub fn cycle_only_baseline(bundle: &DatasetBundle, cycle_len: usize, split: Split) -> Result<Metrics> {
    if cycle_len == 0 {
        return Err(Error::Config("cycle_len must be positive".into()));
    }
    let (c, t) = (bundle.channels(), bundle.len());
    let mut sum = vec![0.0; cycle_len * c];
    let mut n = vec![0usize; cycle_len];
    for row in bundle.splits.train.clone() {
        n[row % cycle_len] += 1;
        for ch in 0..c {
            sum[(row % cycle_len) * c + ch] += bundle.data.data()[ch * t + row];
        }
    }
    let table: Vec<f64> = sum
        .iter()
        .enumerate()
        .map(|(i, s)| if n[i / c] > 0 { s / n[i / c] as f64 } else { 0.0 })
        .collect();
    let (l, h) = (bundle.lookback, bundle.horizon);
    let mut acc = MetricAccumulator::default();
    for starts in bundle.batches(split, 256, None) {
        let batch = bundle.batch::<f64>(&starts)?;
        let pred = Tensor::from_fn(batch.targets.shape(), |i| {
            let (b, rest) = (i / (c * h), i % (c * h));
            let (ch, k) = (rest / h, rest % h);
            table[((starts[b] + l + k) % cycle_len) * c + ch]
        });
        acc.add(&pred, &batch.targets)?;
    }
    Ok(Metrics {
        mse: acc.mse(),
        mae: acc.mae(),
    })
}

/// One lookback window split into its cycle and residual parts, on the
/// dataset's standardized scale, `C x L` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub t_start: usize,
    pub original: Tensor<f64>,
    pub cycle: Tensor<f64>,
    pub residual: Tensor<f64>,
}

/// Splits `original` into `(cycle, residual)` with `cycle + residual ==
/// original` exactly in f64. The residual is `original - cycle`, nudged by an
/// ulp where rounding breaks the identity; if no residual works the cycle is
/// moved to the nearest value that admits one. `None` when magnitudes are so
/// far apart that neither works.
fn exact_split(original: f64, cycle: f64) -> Option<(f64, f64)> {
    let mut r = original - cycle;
    for _ in 0..4 {
        let s = cycle + r;
        if s == original {
            return Some((cycle, r));
        }
        r = if s < original { next_up(r) } else { next_down(r) };
    }
    let r = original - cycle;
    let moved = original - r;
    (moved + r == original).then_some((moved, r))
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        return f64::from_bits(1);
    }
    f64::from_bits(if x > 0.0 { x.to_bits() + 1 } else { x.to_bits() - 1 })
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

/// Cycle component (before refinement) of the `window_index`-th window of
/// `split`, mapped out of the per-window normalization, and the residual.
pub fn decompose(
    model: &HpMixer,
    store: &ParamStore<f32>,
    bundle: &DatasetBundle,
    split: Split,
    window_index: usize,
) -> Result<Decomposition> {
    let starts = bundle.window_starts(split);
    let &t_start = starts.get(window_index).ok_or_else(|| {
        Error::Usage(format!(
            "window index {window_index} out of range ({} windows in {split})",
            starts.len()
        ))
    })?;
    let batch = bundle.batch::<f32>(&[t_start])?;
    let (c, l) = (bundle.channels(), bundle.lookback);
    let original: Vec<f64> = batch.inputs.data().iter().map(|&v| v as f64).collect();
    let cycle: Vec<f64> = match &model.cycle {
        Some(bank) => {
            let tape = Tape::eval();
            let q = bank.slice(&tape, store, &[t_start], l)?.value();
            let scale: Vec<f64> = if model.config.instance_norm {
                original
                    .chunks(l)
                    .map(|row| {
                        let m = row.iter().sum::<f64>() / l as f64;
                        let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / l as f64;
                        (var + crate::model::INSTANCE_NORM_EPS).sqrt()
                    })
                    .collect()
            } else {
                vec![1.0; c]
            };
            q.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| (v as f64 * scale[i / l]) as f32 as f64)
                .collect()
        }
        None => vec![0.0; c * l],
    };
    let mut parts = (Vec::with_capacity(c * l), Vec::with_capacity(c * l));
    for (i, (&o, &p)) in original.iter().zip(&cycle).enumerate() {
        let (p, r) = exact_split(o, p)
            .ok_or_else(|| Error::Data(format!("decomposition is not exactly additive at element {i}")))?;
        parts.0.push(p);
        parts.1.push(r);
    }
    Ok(Decomposition {
        t_start,
        original: Tensor::new(&[c, l], original)?,
        cycle: Tensor::new(&[c, l], parts.0)?,
        residual: Tensor::new(&[c, l], parts.1)?,
    })
}

/// Wavelet bands of the residual input of one window, in the per-window
/// normalized space, named `d1..dJ` and `aJ` (`residual` alone without the
/// transform). Each band is `C x L`.
pub fn residual_bands(
    model: &HpMixer,
    store: &ParamStore<f32>,
    bundle: &DatasetBundle,
    split: Split,
    window_index: usize,
) -> Result<Vec<(String, Tensor<f64>)>> {
    let starts = bundle.window_starts(split);
    let &t_start = starts
        .get(window_index)
        .ok_or_else(|| Error::Usage(format!("window index {window_index} out of range ({} windows in {split})", starts.len())))?;
    let batch = bundle.batch::<f32>(&[t_start])?;
    let (c, l) = (bundle.channels(), bundle.lookback);
    let tape = Tape::eval();
    let parts = model.forward_parts(&tape, store, &tape.constant(batch.inputs), &[t_start])?;
    let to_f64 = |v: Tensor<f32>| Tensor::new(&[c, l], v.data().iter().map(|&x| x as f64).collect());
    match &model.filters {
        Some(bank) => {
            let bands = swt(&tape, store, bank, &parts.x_resid)?.bands();
            let j = bands.len() - 1;
            bands
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let name = if i < j { format!("d{}", i + 1) } else { format!("a{j}") };
                    Ok((name, to_f64(b.value())?))
                })
                .collect()
        }
        None => Ok(vec![("residual".to_string(), to_f64(parts.x_resid.value())?)]),
    }
}

#[cfg(test)]
mod tests;
