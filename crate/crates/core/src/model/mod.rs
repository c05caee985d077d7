//! Full forecaster: periodic branch (cycle bank + refinement) plus residual
//! branch (wavelet bands, channel encoder, coarse/fine mixers, inverse
//! transform, prediction head).

mod checkpoint;
mod config;
mod encoder;
mod mixer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Ablation, AblationFlag, ModelConfig, D_FF_CHOICES, D_MODEL_CHOICES, FC_DROPOUT_CHOICES, HORIZONS};
pub use encoder::{ChannelEncoder, EncoderLayer, MultiHeadAttention};
pub use mixer::{BandMixer, PredictionHead};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cycle::{refine_period, split_periodic_residual, CycleBank, CycleRefiner};
use crate::error::{Error, Result};
use crate::patching::{patch_coarse, unpatch_coarse, PatchSpec};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};
use crate::wavelet::{init_filter_bank, iswt, swt, FilterBank, WaveletCoeffs};

/// Variance floor of the per-window instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct HpMixer {
    pub config: ModelConfig,
    pub spec: PatchSpec,
    pub cycle: Option<CycleBank>,
    pub refiner: Option<CycleRefiner>,
    pub filters: Option<FilterBank>,
    /// One shared encoder, or one per band.
    pub encoders: Vec<ChannelEncoder>,
    pub mixers: Vec<BandMixer>,
    pub head: PredictionHead,
}

/// Intermediate tensors of one forward pass. All but `prediction` live in
/// the (instance-)normalized space.
pub struct ForwardParts<'t, T: Real> {
    /// `B x C x H`, denormalized.
    pub prediction: Var<'t, T>,
    /// Refined periodic forecast `B x C x H`; `None` without the cycle module.
    pub period_forecast: Option<Var<'t, T>>,
    /// Residual branch forecast `B x C x H`.
    pub residual_forecast: Var<'t, T>,
    /// Lookback cycle component `B x C x L` as subtracted from the input.
    pub x_period: Option<Var<'t, T>>,
    pub x_resid: Var<'t, T>,
    /// Normalized input `B x C x L`.
    pub x_norm: Var<'t, T>,
}

struct InstanceStats<T> {
    mean: Vec<T>,
    std: Vec<T>,
}

impl<T: Real> InstanceStats<T> {
    fn of(x: &Tensor<T>) -> Self {
        let len = x.shape()[2];
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for row in x.data().chunks(len) {
            let m = row.iter().map(|v| v.as_f64()).sum::<f64>() / len as f64;
            let var = row.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / len as f64;
            mean.push(T::from_f64(m));
            std.push(T::from_f64((var + INSTANCE_NORM_EPS).sqrt()));
        }
        Self { mean, std }
    }

    fn broadcast(values: &[T], b: usize, c: usize, len: usize) -> Tensor<T> {
        Tensor::from_fn(&[b, c, len], |i| values[i / len])
    }
}

impl HpMixer {
    /// Declares all parameters in `store` (in a fixed order) and returns the
    /// model. The config must be resolved.
    pub fn new<T: Real, R: Rng>(config: ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let ab = c.ablation;
        let spec = c.patch_spec()?;

        let (cycle, refiner) = if ab.no_cycle_module {
            (None, None)
        } else {
            let bank = CycleBank::new(store, "cycle", c.cycle_len, c.channels)?;
            let refiner = (!ab.no_cycle_mlp)
                .then(|| CycleRefiner::new(store, "cycle.refine", c.channels, c.cycle_hidden(), c.fc_dropout, rng));
            (Some(bank), refiner)
        };
        let filters = if ab.no_swt {
            None
        } else {
            Some(init_filter_bank(
                store,
                "swt",
                c.base_wavelet,
                c.levels,
                c.per_level_filters,
                !ab.freeze_swt,
            )?)
        };
        let n_encoders = if c.per_band_encoder { c.n_bands() } else { 1 };
        let encoders = (0..n_encoders)
            .map(|i| {
                let name = if c.per_band_encoder { format!("encoder.band{i}") } else { "encoder".into() };
                ChannelEncoder::new(store, &name, spec.coarse, c.d_model, c.d_ff, c.n_heads, c.e_layers, c.dropout, rng)
            })
            .collect();
        let mixers = (0..c.n_bands())
            .map(|i| {
                BandMixer::new(
                    store,
                    &format!("mixer.band{i}"),
                    spec,
                    !ab.one_level_patching,
                    c.d_ff,
                    c.fc_dropout,
                    rng,
                )
            })
            .collect();
        let head = PredictionHead::new(store, "head", c.lookback, c.horizon, c.d_ff, c.fc_dropout, rng);
        Ok(Self {
            config,
            spec,
            cycle,
            refiner,
            filters,
            encoders,
            mixers,
            head,
        })
    }

    /// Builds the model and its parameters from a seed.
    pub fn init<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    pub fn mixer_stacks(&self) -> usize {
        self.mixers.len()
    }

    /// Parameter count summed over the components.
    pub fn param_count(&self) -> usize {
        self.cycle.as_ref().map_or(0, CycleBank::param_count)
            + self.refiner.as_ref().map_or(0, CycleRefiner::param_count)
            + self.filters.as_ref().map_or(0, FilterBank::param_count)
            + self.encoders.iter().map(ChannelEncoder::param_count).sum::<usize>()
            + self.mixers.iter().map(BandMixer::param_count).sum::<usize>()
            + self.head.param_count()
    }

    /// Zeroes the final linear map so the residual branch contributes nothing.
    pub fn zero_residual_branch<T: Real>(&self, store: &mut ParamStore<T>) {
        self.head.linear.zero(store);
    }

    fn encoder(&self, band: usize) -> &ChannelEncoder {
        &self.encoders[band.min(self.encoders.len() - 1)]
    }

    /// Cycle slice `B x C x len` starting at each absolute index, refined
    /// unless the refinement is disabled.
    fn cycle_component<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        t_starts: &[usize],
        len: usize,
        refine: bool,
    ) -> Result<Option<Var<'t, T>>> {
        let Some(bank) = &self.cycle else {
            return Ok(None);
        };
        let raw = bank.slice_time_major(tape, store, t_starts, len)?;
        let out = if refine {
            refine_period(self.refiner.as_ref(), tape, store, &raw)?
        } else {
            raw
        };
        Ok(Some(out.permute(&[0, 2, 1])?))
    }

    fn band_forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        band: usize,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let xc = patch_coarse(x, &self.spec)?;
        let enc = unpatch_coarse(&self.encoder(band).forward(tape, store, &xc)?, &self.spec)?;
        self.mixers[band].forward(tape, store, &enc)
    }

    /// `x: B x C x L` with the absolute start index of each window.
    pub fn forward_parts<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
        t_starts: &[usize],
    ) -> Result<ForwardParts<'t, T>> {
        let c = &self.config;
        let s = x.shape();
        if s.len() != 3 || s[1] != c.channels || s[2] != c.lookback {
            return Err(Error::shape("hpmixer_input", &s, &[t_starts.len(), c.channels, c.lookback]));
        }
        if t_starts.len() != s[0] {
            return Err(Error::shape("hpmixer_t_starts", &s, &[t_starts.len()]));
        }
        let b = s[0];

        let stats = c.instance_norm.then(|| x.with_value(InstanceStats::of));
        let x_norm = match &stats {
            Some(st) => {
                let mean = tape.constant(InstanceStats::broadcast(&st.mean, b, c.channels, c.lookback));
                let inv: Vec<T> = st.std.iter().map(|v| T::one() / *v).collect();
                let inv = tape.constant(InstanceStats::broadcast(&inv, b, c.channels, c.lookback));
                x.sub(&mean)?.mul(&inv)?
            }
            None => *x,
        };

        let x_period = self.cycle_component(tape, store, t_starts, c.lookback, c.refine_lookback)?;
        let x_resid = match &x_period {
            Some(p) => split_periodic_residual(&x_norm, p)?.1,
            None => x_norm,
        };

        let recon = match &self.filters {
            Some(bank) => {
                let coeffs = swt(tape, store, bank, &x_resid)?;
                let mixed = coeffs
                    .bands()
                    .iter()
                    .enumerate()
                    .map(|(i, band)| self.band_forward(tape, store, i, band))
                    .collect::<Result<Vec<_>>>()?;
                iswt(tape, store, bank, &WaveletCoeffs::from_bands(mixed)?)?
            }
            None => self.band_forward(tape, store, 0, &x_resid)?,
        };
        let residual_forecast = self.head.forward(tape, store, &recon)?;

        let end: Vec<usize> = t_starts.iter().map(|t| t + c.lookback).collect();
        let period_forecast = self.cycle_component(tape, store, &end, c.horizon, true)?;
        let y = match &period_forecast {
            Some(p) => residual_forecast.add(p)?,
            None => residual_forecast,
        };
        let prediction = match &stats {
            Some(st) => {
                let std = tape.constant(InstanceStats::broadcast(&st.std, b, c.channels, c.horizon));
                let mean = tape.constant(InstanceStats::broadcast(&st.mean, b, c.channels, c.horizon));
                y.mul(&std)?.add(&mean)?
            }
            None => y,
        };
        Ok(ForwardParts {
            prediction,
            period_forecast,
            residual_forecast,
            x_period,
            x_resid,
            x_norm,
        })
    }

    /// Forecast `B x C x H`.
    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
        t_starts: &[usize],
    ) -> Result<Var<'t, T>> {
        Ok(self.forward_parts(tape, store, x, t_starts)?.prediction)
    }

    /// Evaluation-mode forecast of a plain tensor.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>, t_starts: &[usize]) -> Result<Tensor<T>> {
        let tape = Tape::eval();
        let y = self.forward(&tape, store, &tape.constant(x.clone()), t_starts)?;
        Ok(y.value())
    }
}
