//! Learnable stationary (undecimated, à trous) wavelet transform.
//!
//! Level `j` convolves the running approximation with the level's analysis
//! pair dilated by `2^(j-1)`, circularly, without downsampling. Synthesis runs
//! the adjoint (circular cross-correlation) with the synthesis pair and
//! averages the two branches. With `g = h` for an orthonormal base wavelet the
//! pair is power-complementary, so reconstruction is exact at initialization.
//! All four filters of every level are ordinary trainable parameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const MAX_LEVELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseWavelet {
    Haar,
    Db2,
}

impl BaseWavelet {
    pub fn filter_len(self) -> usize {
        match self {
            BaseWavelet::Haar => 2,
            BaseWavelet::Db2 => 4,
        }
    }

    /// Orthonormal low-pass analysis filter (sums to sqrt 2).
    pub fn lowpass(self) -> Vec<f64> {
        let r2 = std::f64::consts::SQRT_2;
        match self {
            BaseWavelet::Haar => vec![1.0 / r2, 1.0 / r2],
            BaseWavelet::Db2 => {
                let s3 = 3f64.sqrt();
                let d = 4.0 * r2;
                vec![(1.0 + s3) / d, (3.0 + s3) / d, (3.0 - s3) / d, (1.0 - s3) / d]
            }
        }
    }

    /// Quadrature mirror of the low-pass: `h1[k] = (-1)^k h0[K-1-k]`.
    pub fn highpass(self) -> Vec<f64> {
        let h0 = self.lowpass();
        let k = h0.len();
        (0..k)
            .map(|i| if i % 2 == 0 { h0[k - 1 - i] } else { -h0[k - 1 - i] })
            .collect()
    }
}

impl fmt::Display for BaseWavelet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseWavelet::Haar => "haar",
            BaseWavelet::Db2 => "db2",
        })
    }
}

impl FromStr for BaseWavelet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(BaseWavelet::Haar),
            "db2" => Ok(BaseWavelet::Db2),
            other => Err(Error::Config(format!(
                "unknown base wavelet `{other}` (expected haar or db2)"
            ))),
        }
    }
}

/// Analysis (`h0`, `h1`) and synthesis (`g0`, `g1`) filters of one level.
#[derive(Clone, Debug)]
pub struct LevelFilters {
    pub h0: ParamId,
    pub h1: ParamId,
    pub g0: ParamId,
    pub g1: ParamId,
}

impl LevelFilters {
    pub fn ids(&self) -> [ParamId; 4] {
        [self.h0, self.h1, self.g0, self.g1]
    }
}

#[derive(Clone, Debug)]
pub struct FilterBank {
    pub base: BaseWavelet,
    pub levels: usize,
    pub per_level: bool,
    /// One entry per level when `per_level`, otherwise a single shared entry.
    pub filters: Vec<LevelFilters>,
}

/// Allocates a bank initialized to the base wavelet's orthonormal pair, with
/// synthesis filters equal to the analysis filters.
pub fn init_filter_bank<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    base: BaseWavelet,
    levels: usize,
    per_level: bool,
    trainable: bool,
) -> Result<FilterBank> {
    if !(1..=MAX_LEVELS).contains(&levels) {
        return Err(Error::Config(format!(
            "wavelet levels must be in [1, {MAX_LEVELS}], got {levels}"
        )));
    }
    let k = base.filter_len();
    let (lo, hi) = (base.lowpass(), base.highpass());
    let mk = |v: &[f64]| Tensor::from_f64(&[k], v).expect("filter length");
    let sets = if per_level { levels } else { 1 };
    let filters = (0..sets)
        .map(|j| {
            let prefix = if per_level {
                format!("{name}.level{}", j + 1)
            } else {
                format!("{name}.shared")
            };
            LevelFilters {
                h0: store.add(format!("{prefix}.h0"), mk(&lo), trainable),
                h1: store.add(format!("{prefix}.h1"), mk(&hi), trainable),
                g0: store.add(format!("{prefix}.g0"), mk(&lo), trainable),
                g1: store.add(format!("{prefix}.g1"), mk(&hi), trainable),
            }
        })
        .collect();
    Ok(FilterBank {
        base,
        levels,
        per_level,
        filters,
    })
}

impl FilterBank {
    pub fn filter_len(&self) -> usize {
        self.base.filter_len()
    }

    /// Filters used at 1-based `level`.
    pub fn level(&self, level: usize) -> &LevelFilters {
        if self.per_level {
            &self.filters[level - 1]
        } else {
            &self.filters[0]
        }
    }

    pub fn dilation(level: usize) -> usize {
        1 << (level - 1)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.filters.iter().flat_map(|f| f.ids())
    }

    pub fn param_count(&self) -> usize {
        self.filters.len() * 4 * self.filter_len()
    }

    /// Enforces `2^(J-1) * (K-1) < L`.
    pub fn check_support(&self, len: usize) -> Result<()> {
        check_support(self.levels, self.filter_len(), len)
    }
}

pub fn check_support(levels: usize, filter_len: usize, len: usize) -> Result<()> {
    if (1usize << (levels - 1)) * (filter_len - 1) >= len {
        return Err(Error::Config(format!(
            "wavelet support exceeds signal: 2^(J-1)*(K-1) must be < L (J={levels}, K={filter_len}, L={len})"
        )));
    }
    Ok(())
}

/// Approximation `A_J` plus details `D_1..D_J`, each with the input's shape.
#[derive(Clone, Debug)]
pub struct WaveletCoeffs<'t, T: Real> {
    pub approx: Var<'t, T>,
    pub details: Vec<Var<'t, T>>,
}

impl<'t, T: Real> WaveletCoeffs<'t, T> {
    /// Bands in branch order: `D_1, .., D_J, A_J`.
    pub fn bands(&self) -> Vec<Var<'t, T>> {
        let mut b = self.details.clone();
        b.push(self.approx);
        b
    }

    /// Inverse of [`bands`](Self::bands).
    pub fn from_bands(mut bands: Vec<Var<'t, T>>) -> Result<Self> {
        let approx = bands
            .pop()
            .ok_or_else(|| Error::Usage("no wavelet bands".into()))?;
        Ok(Self {
            approx,
            details: bands,
        })
    }
}

/// Forward transform along the last axis of `x`.
pub fn swt<'t, T: Real>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    bank: &FilterBank,
    x: &Var<'t, T>,
) -> Result<WaveletCoeffs<'t, T>> {
    let len = *x.shape().last().expect("non-empty shape");
    bank.check_support(len)?;
    let mut approx = *x;
    let mut details = Vec::with_capacity(bank.levels);
    for level in 1..=bank.levels {
        let f = bank.level(level);
        let d = FilterBank::dilation(level);
        details.push(approx.conv1d_circular(&tape.param(store, f.h1), d)?);
        approx = approx.conv1d_circular(&tape.param(store, f.h0), d)?;
    }
    Ok(WaveletCoeffs { approx, details })
}

/// Level-by-level inverse from `J` down to 1.
pub fn iswt<'t, T: Real>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    bank: &FilterBank,
    coeffs: &WaveletCoeffs<'t, T>,
) -> Result<Var<'t, T>> {
    if coeffs.details.len() != bank.levels {
        return Err(Error::Shape {
            op: "iswt",
            lhs: vec![coeffs.details.len()],
            rhs: vec![bank.levels],
        });
    }
    let shape = coeffs.approx.shape();
    if let Some(bad) = coeffs.details.iter().find(|d| d.shape() != shape) {
        return Err(Error::shape("iswt", &shape, &bad.shape()));
    }
    bank.check_support(*shape.last().expect("non-empty shape"))?;
    let mut approx = coeffs.approx;
    for level in (1..=bank.levels).rev() {
        let f = bank.level(level);
        let d = FilterBank::dilation(level);
        let lo = approx.corr1d_circular(&tape.param(store, f.g0), d)?;
        let hi = coeffs.details[level - 1].corr1d_circular(&tape.param(store, f.g1), d)?;
        approx = lo.add(&hi)?.scale(0.5);
    }
    Ok(approx)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn bank(base: BaseWavelet, levels: usize) -> (ParamStore<f64>, FilterBank) {
        let mut store = ParamStore::new();
        let b = init_filter_bank(&mut store, "swt", base, levels, true, true).unwrap();
        (store, b)
    }

    #[test]
    fn haar_init_is_textbook_pair() {
        let (store, b) = bank(BaseWavelet::Haar, 1);
        let r = 1.0 / 2f64.sqrt();
        assert_eq!(store.value(b.level(1).h0).data(), &[r, r]);
        assert_eq!(store.value(b.level(1).h1).data(), &[r, -r]);
    }

    #[test]
    fn base_filters_are_orthonormal() {
        for base in [BaseWavelet::Haar, BaseWavelet::Db2] {
            let (lo, hi) = (base.lowpass(), base.highpass());
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            assert!((dot(&lo, &lo) - 1.0).abs() < 1e-12);
            assert!((dot(&hi, &hi) - 1.0).abs() < 1e-12);
            assert!(dot(&lo, &hi).abs() < 1e-12);
            assert!((lo.iter().sum::<f64>() - 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_levels_and_tags() {
        let mut store = ParamStore::<f64>::new();
        assert!(init_filter_bank(&mut store, "a", BaseWavelet::Haar, 0, true, true).is_err());
        assert!(init_filter_bank(&mut store, "b", BaseWavelet::Haar, 6, true, true).is_err());
        assert!(matches!("sym4".parse::<BaseWavelet>(), Err(Error::Config(_))));
        assert_eq!("DB2".parse::<BaseWavelet>().unwrap(), BaseWavelet::Db2);
    }

    #[test]
    fn db2_perfect_reconstruction_c3_l64() {
        let (store, b) = bank(BaseWavelet::Db2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[3, 64], |_| rng.gen_range(-2.0..2.0));
        let tape = Tape::eval();
        let xv = tape.constant(x.clone());
        let c = swt(&tape, &store, &b, &xv).unwrap();
        let y = iswt(&tape, &store, &b, &c).unwrap().value();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn constant_signal_haar() {
        let levels = 3;
        let (store, b) = bank(BaseWavelet::Haar, levels);
        let tape = Tape::eval();
        let x = tape.constant(Tensor::full(&[2, 16], 1.5));
        let c = swt(&tape, &store, &b, &x).unwrap();
        for d in &c.details {
            assert!(d.value().max_abs() < 1e-12);
        }
        let expect = 1.5 * 2f64.sqrt().powi(levels as i32);
        for v in c.approx.value().data() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_haar_one_level() {
        let (store, b) = bank(BaseWavelet::Haar, 1);
        let tape = Tape::eval();
        let x = tape.constant(Tensor::from_fn(&[1, 8], |i| if i == 0 { 1.0 } else { 0.0 }));
        let c = swt(&tape, &store, &b, &x).unwrap();
        let r = 1.0 / 2f64.sqrt();
        for band in [c.details[0].value(), c.approx.value()] {
            let nz: Vec<f64> = band.data().iter().copied().filter(|v| *v != 0.0).collect();
            assert_eq!(nz.len(), 2);
            assert!(nz.iter().all(|v| (v.abs() - r).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_coefficients_reconstruct_zero() {
        let (store, b) = bank(BaseWavelet::Db2, 2);
        let tape = Tape::eval();
        let z = || tape.constant(Tensor::zeros(&[2, 32]));
        let c = WaveletCoeffs {
            approx: z(),
            details: vec![z(), z()],
        };
        assert_eq!(iswt(&tape, &store, &b, &c).unwrap().value().max_abs(), 0.0);
    }

    #[test]
    fn support_violation_names_j_k_l() {
        let (store, b) = bank(BaseWavelet::Db2, 4);
        let tape = Tape::eval();
        let x = tape.constant(Tensor::zeros(&[1, 24]));
        let err = swt(&tape, &store, &b, &x).unwrap_err().to_string();
        assert!(err.contains("J=4") && err.contains("K=4") && err.contains("L=24"), "{err}");
    }

    #[test]
    fn iswt_rejects_mismatched_bands() {
        let (store, b) = bank(BaseWavelet::Haar, 1);
        let tape = Tape::eval();
        let c = WaveletCoeffs {
            approx: tape.constant(Tensor::zeros(&[2, 16])),
            details: vec![tape.constant(Tensor::zeros(&[2, 8]))],
        };
        assert!(iswt(&tape, &store, &b, &c).is_err());
    }

    #[test]
    fn shared_bank_allocates_one_set() {
        let mut store = ParamStore::<f32>::new();
        let b = init_filter_bank(&mut store, "swt", BaseWavelet::Db2, 3, false, true).unwrap();
        assert_eq!(b.param_count(), 16);
        assert_eq!(store.count(), 16);
    }
}
