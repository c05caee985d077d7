//! Periodicity branch: ACF-based cycle length selection, the learnable cycle
//! bank `Q` (W x C) indexed by absolute time modulo W, and the channel-wise
//! MLP + LayerNorm refinement of gathered cycle slices.

use log::warn;
use rand::Rng;

use crate::data::{chronological_split, RawSeries, SplitKind};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Mlp};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Default lower bound of the ACF peak search.
pub const DEFAULT_LAG_MIN: usize = 4;
/// Default upper bound of the ACF peak search.
pub const DEFAULT_MAX_LAG: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct AcfProfile {
    /// Lags `1..=max_lag`.
    pub lags: Vec<usize>,
    /// Channel-averaged ACF, aligned with `lags`.
    pub acf: Vec<f64>,
    /// Per-channel ACF, `per_channel[c][i]` aligned with `lags`.
    pub per_channel: Vec<Vec<f64>>,
    pub lag_min: usize,
    /// Selected cycle length; `None` when the averaged ACF has no local
    /// maximum inside `[lag_min, max_lag]`.
    pub peak_lag: Option<usize>,
}

impl AcfProfile {
    pub fn at(&self, lag: usize) -> f64 {
        self.acf[lag - 1]
    }
}

/// Sample autocorrelation of one series for lags `1..=max_lag`; `None` for a
/// constant series.
pub fn sample_acf(x: &[f64], max_lag: usize) -> Option<Vec<f64>> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let denom: f64 = dev.iter().map(|d| d * d).sum();
    if denom <= f64::EPSILON * n as f64 * mean.abs().max(1.0) {
        return None;
    }
    Some(
        (1..=max_lag)
            .map(|k| dev[..n - k].iter().zip(&dev[k..]).map(|(a, b)| a * b).sum::<f64>() / denom)
            .collect(),
    )
}

/// Averages per-channel ACFs of `series` (`C x T`) and selects the lag of the
/// highest local maximum in `[lag_min, max_lag]` (smallest lag on ties).
pub fn estimate_cycle_length(series: &Tensor<f64>, max_lag: usize, lag_min: usize) -> Result<AcfProfile> {
    if series.ndim() != 2 {
        return Err(Error::shape("estimate_cycle_length", series.shape(), &[0, 0]));
    }
    let (channels, len) = (series.shape()[0], series.shape()[1]);
    if max_lag == 0 || 2 * max_lag >= len {
        return Err(Error::Config(format!(
            "max_lag must satisfy 0 < max_lag < T/2 (max_lag={max_lag}, T={len})"
        )));
    }
    if lag_min < 1 || lag_min > max_lag {
        return Err(Error::Config(format!(
            "lag_min must be in [1, max_lag] (lag_min={lag_min}, max_lag={max_lag})"
        )));
    }
    // one extra lag so a peak at max_lag can be recognized
    let probe = max_lag + 1;
    let mut per_channel = Vec::with_capacity(channels);
    for (c, row) in series.data().chunks(len).enumerate() {
        match sample_acf(row, probe) {
            Some(acf) => per_channel.push(acf),
            None => {
                warn!("channel {c} is constant; its ACF is treated as zero");
                per_channel.push(vec![0.0; probe]);
            }
        }
    }
    let mut acf = vec![0.0; probe];
    for ch in &per_channel {
        for (a, v) in acf.iter_mut().zip(ch) {
            *a += v / channels as f64;
        }
    }

    let at = |lag: usize| acf[lag - 1];
    let mut peak: Option<(usize, f64)> = None;
    for lag in lag_min.max(2)..=max_lag {
        let v = at(lag);
        if v > at(lag - 1) && v >= at(lag + 1) && peak.is_none_or(|(_, best)| v > best) {
            peak = Some((lag, v));
        }
    }
    if peak.is_none() {
        warn!("no dominant ACF peak in [{lag_min}, {max_lag}]");
    }

    acf.truncate(max_lag);
    for ch in &mut per_channel {
        ch.truncate(max_lag);
    }
    Ok(AcfProfile {
        lags: (1..=max_lag).collect(),
        acf,
        per_channel,
        lag_min,
        peak_lag: peak.map(|(lag, _)| lag),
    })
}

/// ACF cycle selection on the train split of a raw series. `max_lag` is
/// clamped below half the train length.
pub fn train_split_acf(series: &RawSeries, kind: SplitKind, max_lag: usize, lag_min: usize) -> Result<AcfProfile> {
    let train = series.rows(chronological_split(series.len(), kind)?.train);
    let t = train.shape()[1];
    let max_lag = max_lag.min(t.saturating_sub(1) / 2);
    estimate_cycle_length(&train, max_lag, lag_min.min(max_lag.max(1)))
}

/// Learnable `W x C` table of one cycle per channel.
#[derive(Clone, Debug)]
pub struct CycleBank {
    pub cycle_len: usize,
    pub channels: usize,
    pub q: ParamId,
}

impl CycleBank {
    /// Zero-initialized bank.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cycle_len: usize, channels: usize) -> Result<Self> {
        if cycle_len == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "cycle bank needs W >= 1 and C >= 1 (W={cycle_len}, C={channels})"
            )));
        }
        let q = store.add(format!("{name}.q"), Tensor::zeros(&[cycle_len, channels]), true);
        Ok(Self {
            cycle_len,
            channels,
            q,
        })
    }

    /// Row of `Q` read at each position: `(t_start + i) mod W`.
    pub fn indices(&self, t_starts: &[usize], len: usize) -> Vec<usize> {
        t_starts
            .iter()
            .flat_map(|&t| (0..len).map(move |i| (t + i) % self.cycle_len))
            .collect()
    }

    /// Time-major gather: `out[b, i, c] = Q[(t_b + i) mod W, c]`, shape `B x len x C`.
    pub fn slice_time_major<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        t_starts: &[usize],
        len: usize,
    ) -> Result<Var<'t, T>> {
        let q = tape.param(store, self.q);
        q.gather_rows(&self.indices(t_starts, len))?
            .reshape(&[t_starts.len(), len, self.channels])
    }

    /// Channel-major gather: `out[b, c, i] = Q[(t_b + i) mod W, c]`, shape `B x C x len`.
    pub fn slice<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        t_starts: &[usize],
        len: usize,
    ) -> Result<Var<'t, T>> {
        self.slice_time_major(tape, store, t_starts, len)?.permute(&[0, 2, 1])
    }

    pub fn param_count(&self) -> usize {
        self.cycle_len * self.channels
    }
}

/// Channel-wise MLP (`C -> hidden -> C`, GELU) followed by LayerNorm over
/// channels, applied at every time position.
#[derive(Clone, Debug)]
pub struct CycleRefiner {
    pub mlp: Mlp,
    pub norm: LayerNorm,
}

impl CycleRefiner {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            mlp: Mlp::new(store, &format!("{name}.mlp"), channels, hidden, channels, dropout, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), channels),
        }
    }

    /// `x` is time-major (`.. x C`); output has the same shape.
    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let h = self.mlp.forward(tape, store, x)?;
        self.norm.forward(tape, store, &h)
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count() + self.norm.param_count()
    }
}

/// Applies the refiner when present; `None` is the identity passthrough.
pub fn refine_period<'t, T: Real>(
    refiner: Option<&CycleRefiner>,
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    x_period: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    match refiner {
        Some(r) => r.forward(tape, store, x_period),
        None => Ok(*x_period),
    }
}

/// `(x_period, x - x_period)`.
pub fn split_periodic_residual<'t, T: Real>(
    x: &Var<'t, T>,
    x_period: &Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    Ok((*x_period, x.sub(x_period)?))
}
