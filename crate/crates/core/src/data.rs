//! Benchmark ingestion, chronological splits, train-only standardization,
//! sliding windows anchored at absolute time, and error metrics.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Lookback used by the reference split counts of the registry.
pub const REGISTRY_LOOKBACK: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// 12/4/4 months of hourly ETT data.
    EttHourly,
    /// 12/4/4 months of 15-minute ETT data.
    EttMinute,
    /// 70% / remainder / 20%.
    Other,
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ett_hourly" => Ok(SplitKind::EttHourly),
            "ett_minute" => Ok(SplitKind::EttMinute),
            "other" => Ok(SplitKind::Other),
            _ => Err(Error::Usage(format!(
                "unknown split kind `{s}` (expected ett_hourly, ett_minute or other)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetInfo {
    pub name: &'static str,
    pub file: &'static str,
    pub channels: usize,
    pub length: usize,
    pub kind: SplitKind,
    /// `(train, val, test)` window counts at [`REGISTRY_LOOKBACK`], counting
    /// every lookback start whose window fits in the split segment.
    pub counts: [usize; 3],
}

/// Registered benchmarks. Traffic's val/test counts are the split
/// convention's (one more than commonly tabulated).
pub const REGISTRY: [DatasetInfo; 7] = [
    DatasetInfo { name: "ETTh1", file: "ETTh1.csv", channels: 7, length: 17_420, kind: SplitKind::EttHourly, counts: [8_545, 2_881, 2_881] },
    DatasetInfo { name: "ETTh2", file: "ETTh2.csv", channels: 7, length: 17_420, kind: SplitKind::EttHourly, counts: [8_545, 2_881, 2_881] },
    DatasetInfo { name: "ETTm1", file: "ETTm1.csv", channels: 7, length: 69_680, kind: SplitKind::EttMinute, counts: [34_465, 11_521, 11_521] },
    DatasetInfo { name: "ETTm2", file: "ETTm2.csv", channels: 7, length: 69_680, kind: SplitKind::EttMinute, counts: [34_465, 11_521, 11_521] },
    DatasetInfo { name: "Weather", file: "weather.csv", channels: 21, length: 52_696, kind: SplitKind::Other, counts: [36_792, 5_271, 10_540] },
    DatasetInfo { name: "ECL", file: "electricity.csv", channels: 321, length: 26_304, kind: SplitKind::Other, counts: [18_317, 2_633, 5_261] },
    DatasetInfo { name: "Traffic", file: "traffic.csv", channels: 862, length: 17_544, kind: SplitKind::Other, counts: [12_185, 1_757, 3_509] },
];

pub fn lookup(name: &str) -> Option<&'static DatasetInfo> {
    REGISTRY.iter().find(|d| d.name.eq_ignore_ascii_case(name))
}

/// Checks `(C, T)` and the split counts of a loaded series against the
/// registry entry.
pub fn verify_registered(info: &DatasetInfo, series: &RawSeries) -> Result<()> {
    if series.channels() != info.channels || series.len() != info.length {
        return Err(Error::Data(format!(
            "{}: found C={}, T={}, registry expects C={}, T={}",
            info.name,
            series.channels(),
            series.len(),
            info.channels,
            info.length
        )));
    }
    let counts = chronological_split(series.len(), info.kind)?.reference_counts(REGISTRY_LOOKBACK);
    if counts != info.counts {
        return Err(Error::Data(format!(
            "{}: split counts {counts:?} differ from registry {:?}",
            info.name, info.counts
        )));
    }
    Ok(())
}

/// Registry entry whose file name matches `file` (case-insensitive).
pub fn lookup_file(file: &str) -> Option<&'static DatasetInfo> {
    REGISTRY.iter().find(|d| d.file.eq_ignore_ascii_case(file))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Usage(format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }
}

/// Disjoint, chronologically ordered row ranges of the three splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    pub fn get(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }

    /// Rows windows of `split` may read: val and test reach `lookback` rows
    /// back into the preceding split so every target row is forecast.
    pub fn segment(&self, split: Split, lookback: usize) -> Range<usize> {
        let r = self.get(split);
        match split {
            Split::Train => r,
            _ => r.start.saturating_sub(lookback)..r.end,
        }
    }

    /// Registry-style counts: `segment length - lookback + 1` per split.
    pub fn reference_counts(&self, lookback: usize) -> [usize; 3] {
        Split::ALL.map(|s| (self.segment(s, lookback).len() + 1).saturating_sub(lookback))
    }
}

pub fn chronological_split(len: usize, kind: SplitKind) -> Result<SplitRanges> {
    let month = match kind {
        SplitKind::EttHourly => Some(30 * 24),
        SplitKind::EttMinute => Some(30 * 24 * 4),
        SplitKind::Other => None,
    };
    let ranges = match month {
        Some(m) => {
            if len < 20 * m {
                return Err(Error::Data(format!(
                    "ETT split needs at least {} rows, got {len}",
                    20 * m
                )));
            }
            SplitRanges {
                train: 0..12 * m,
                val: 12 * m..16 * m,
                test: 16 * m..20 * m,
            }
        }
        None => {
            let train = len * 7 / 10;
            let test = len * 2 / 10;
            SplitRanges {
                train: 0..train,
                val: train..len - test,
                test: len - test..len,
            }
        }
    };
    if ranges.train.is_empty() || ranges.val.is_empty() || ranges.test.is_empty() {
        return Err(Error::Data(format!("series of length {len} is too short to split")));
    }
    Ok(ranges)
}

/// Raw benchmark matrix, `C x T` in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub columns: Vec<String>,
    pub values: Tensor<f64>,
}

impl RawSeries {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First `rows` time steps.
    pub fn truncate(&self, rows: usize) -> Result<Self> {
        let (c, t) = (self.channels(), self.len());
        if rows == 0 || rows > t {
            return Err(Error::Usage(format!("cannot truncate {t} rows to {rows}")));
        }
        let values = Tensor::from_fn(&[c, rows], |i| self.values.data()[(i / rows) * t + i % rows]);
        Ok(Self {
            columns: self.columns.clone(),
            values,
        })
    }

    /// Time steps `rows` of every channel, `C x rows.len()`.
    pub fn rows(&self, rows: Range<usize>) -> Tensor<f64> {
        let (c, t, s) = (self.channels(), self.len(), rows.len());
        Tensor::from_fn(&[c, s], |i| self.values.data()[(i / s) * t + rows.start + i % s])
    }
}

/// Reads a header + `timestamp, v_1, .., v_C` CSV. The first column is
/// ignored; every other cell must parse as a number.
pub fn load_csv(path: &Path, expected_channels: Option<usize>) -> Result<RawSeries> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Data(format!(
            "{}: expected a timestamp column and at least one value column",
            path.display()
        )));
    }
    let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let c = columns.len();
    if let Some(exp) = expected_channels {
        if exp != c {
            return Err(Error::Data(format!(
                "{}: found {c} value columns, registry expects C={exp}",
                path.display()
            )));
        }
    }
    let mut rows: Vec<f64> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != c + 1 {
            return Err(Error::Data(format!(
                "{}: row {} has {} cells, expected {}",
                path.display(),
                i + 2,
                record.len(),
                c + 1
            )));
        }
        for (j, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}: non-numeric value `{cell}` at row {}, column `{}`",
                    path.display(),
                    i + 2,
                    columns[j]
                ))
            })?;
            rows.push(v);
        }
    }
    let t = rows.len() / c;
    if t == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let values = Tensor::from_fn(&[c, t], |i| rows[(i % t) * c + i / t]);
    Ok(RawSeries { columns, values })
}

/// Writes `C x T` values with an integer `t` index column.
pub fn write_csv(path: &Path, columns: &[String], values: &Tensor<f64>, t_offset: usize) -> Result<()> {
    let (c, t) = (values.shape()[0], values.shape()[1]);
    if columns.len() != c {
        return Err(Error::shape("write_csv", &[columns.len()], values.shape()));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    for i in 0..t {
        let mut row = vec![(t_offset + i).to_string()];
        row.extend((0..c).map(|ch| values.data()[ch * t + i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean / std over `rows` of each channel. A zero std is
    /// replaced by 1.
    pub fn fit(values: &Tensor<f64>, rows: Range<usize>) -> Self {
        let t = values.shape()[1];
        let n = rows.len() as f64;
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for (c, series) in values.data().chunks(t).enumerate() {
            let s = &series[rows.clone()];
            let m = s.iter().sum::<f64>() / n;
            let mut sd = (s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            if sd.is_nan() || sd <= 0.0 {
                warn!("channel {c} has zero variance on the train split; std clamped to 1");
                sd = 1.0;
            }
            mean.push(m);
            std.push(sd);
        }
        Self { mean, std }
    }

    pub fn transform(&self, values: &Tensor<f64>) -> Tensor<f64> {
        let t = values.shape()[1];
        Tensor::from_fn(values.shape(), |i| {
            let c = i / t;
            (values.data()[i] - self.mean[c]) / self.std[c]
        })
    }

    pub fn inverse(&self, values: &Tensor<f64>) -> Tensor<f64> {
        let t = values.shape()[1];
        Tensor::from_fn(values.shape(), |i| {
            let c = i / t;
            values.data()[i] * self.std[c] + self.mean[c]
        })
    }
}

/// Inputs `B x C x L`, targets `B x C x H`, and the absolute row of each
/// input's first step.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch<T> {
    pub inputs: Tensor<T>,
    pub targets: Tensor<T>,
    pub t_starts: Vec<usize>,
}

/// A standardized series with its splits, ready for windowing.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub name: String,
    pub columns: Vec<String>,
    pub raw: Tensor<f64>,
    /// `raw` standardized with train statistics.
    pub data: Tensor<f64>,
    pub splits: SplitRanges,
    pub stats: Standardizer,
    pub lookback: usize,
    pub horizon: usize,
}

impl DatasetBundle {
    pub fn new(name: &str, series: RawSeries, kind: SplitKind, lookback: usize, horizon: usize) -> Result<Self> {
        let splits = chronological_split(series.len(), kind)?;
        let stats = Standardizer::fit(&series.values, splits.train.clone());
        let data = stats.transform(&series.values);
        let bundle = Self {
            name: name.to_string(),
            columns: series.columns,
            raw: series.values,
            data,
            splits,
            stats,
            lookback,
            horizon,
        };
        for split in Split::ALL {
            if bundle.window_count(split) == 0 {
                return Err(Error::Data(format!(
                    "{name}: {split} split has no windows for L={lookback}, H={horizon}"
                )));
            }
        }
        Ok(bundle)
    }

    /// Loads a registered benchmark and cross-checks it with
    /// [`verify_registered`].
    pub fn registered(info: &DatasetInfo, path: &Path, lookback: usize, horizon: usize) -> Result<Self> {
        let series = load_csv(path, Some(info.channels))?;
        verify_registered(info, &series)?;
        Self::new(info.name, series, info.kind, lookback, horizon)
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `S - L - H + 1` for the split's segment of length `S`.
    pub fn window_count(&self, split: Split) -> usize {
        (self.splits.segment(split, self.lookback).len() + 1).saturating_sub(self.lookback + self.horizon)
    }

    /// Absolute input start rows of every window in `split`, increasing.
    pub fn window_starts(&self, split: Split) -> Vec<usize> {
        let start = self.splits.segment(split, self.lookback).start;
        (start..start + self.window_count(split)).collect()
    }

    /// Window starts grouped into batches; shuffled when a seed is given.
    /// The last batch may be short.
    pub fn batches(&self, split: Split, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
        let mut starts = self.window_starts(split);
        if let Some(seed) = shuffle_seed {
            starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        starts.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn batch<T: Real>(&self, t_starts: &[usize]) -> Result<WindowBatch<T>> {
        let (c, t) = (self.channels(), self.len());
        let (l, h) = (self.lookback, self.horizon);
        if let Some(&bad) = t_starts.iter().find(|&&s| s + l + h > t) {
            return Err(Error::Data(format!("window at {bad} runs past the series end {t}")));
        }
        let b = t_starts.len();
        let gather = |len: usize, offset: usize| {
            Tensor::from_fn(&[b, c, len], |i| {
                let (bi, rest) = (i / (c * len), i % (c * len));
                let (ch, k) = (rest / len, rest % len);
                T::from_f64(self.data.data()[ch * t + t_starts[bi] + offset + k])
            })
        };
        Ok(WindowBatch {
            inputs: gather(l, 0),
            targets: gather(h, l),
            t_starts: t_starts.to_vec(),
        })
    }

    /// Standardized rows of one split, `C x S`.
    pub fn split_values(&self, split: Split) -> Tensor<f64> {
        let r = self.splits.get(split);
        let (c, t, s) = (self.channels(), self.len(), r.len());
        Tensor::from_fn(&[c, s], |i| self.data.data()[(i / s) * t + r.start + i % s])
    }
}

fn check_same<T: Real>(op: &'static str, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(op, pred.shape(), target.shape()));
    }
    Ok(())
}

pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_same("mse", pred, target)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(s / pred.numel() as f64)
}

pub fn mae<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_same("mae", pred, target)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum();
    Ok(s / pred.numel() as f64)
}

/// Running sums for metrics over many batches.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricAccumulator {
    sq: f64,
    abs: f64,
    n: usize,
}

impl MetricAccumulator {
    pub fn add<T: Real>(&mut self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
        check_same("metrics", pred, target)?;
        for (a, b) in pred.data().iter().zip(target.data()) {
            let d = a.as_f64() - b.as_f64();
            self.sq += d * d;
            self.abs += d.abs();
        }
        self.n += pred.numel();
        Ok(())
    }

    pub fn mse(&self) -> f64 {
        self.sq / self.n as f64
    }

    pub fn mae(&self) -> f64 {
        self.abs / self.n as f64
    }
}

/// Two harmonics of period `period` per channel (phase shifted by channel)
/// plus uniform noise with standard deviation `noise_std`; `C x T`.
pub fn synthetic_periodic(channels: usize, len: usize, period: usize, noise_std: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_width = noise_std * 3f64.sqrt();
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = vec![0.0; channels * len];
    for c in 0..channels {
        let phase = c as f64 * 0.7;
        let amp2 = 0.3 + 0.1 * c as f64;
        for t in 0..len {
            let x = tau * t as f64 / period as f64 + phase;
            let noise = if half_width > 0.0 { rng.gen_range(-half_width..half_width) } else { 0.0 };
            out[c * len + t] = x.sin() + amp2 * (2.0 * x).cos() + noise;
        }
    }
    Tensor::new(&[channels, len], out).expect("shape")
}
