use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::{PatchSpec, CANDIDATE_PATCH_SIZES};
use crate::wavelet::{check_support, BaseWavelet, MAX_LEVELS};

pub const HORIZONS: [usize; 4] = [96, 192, 336, 720];
pub const D_MODEL_CHOICES: [usize; 6] = [32, 64, 128, 256, 512, 1024];
pub const D_FF_CHOICES: [usize; 7] = [32, 64, 128, 256, 512, 1024, 2048];
pub const FC_DROPOUT_CHOICES: [f64; 3] = [0.0, 0.1, 0.2];

/// Architectural ablations. All `false` is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Cycle refinement becomes the identity.
    pub no_cycle_mlp: bool,
    /// No periodic branch: the residual is the input and the periodic forecast is zero.
    pub no_cycle_module: bool,
    /// Wavelet filters are kept at their initial values.
    pub freeze_swt: bool,
    /// The residual is processed as a single band, without a transform.
    pub no_swt: bool,
    /// Only coarse patches are mixed; the fine mixer is dropped.
    pub one_level_patching: bool,
}

/// A single ablation switch, as named on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationFlag {
    NoCycleMlp,
    NoCycleModule,
    FreezeSwt,
    NoSwt,
    OneLevelPatching,
}

impl AblationFlag {
    pub const ALL: [AblationFlag; 5] = [
        AblationFlag::NoCycleMlp,
        AblationFlag::NoCycleModule,
        AblationFlag::FreezeSwt,
        AblationFlag::NoSwt,
        AblationFlag::OneLevelPatching,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationFlag::NoCycleMlp => "no_cycle_mlp",
            AblationFlag::NoCycleModule => "no_cycle_module",
            AblationFlag::FreezeSwt => "freeze_swt",
            AblationFlag::NoSwt => "no_swt",
            AblationFlag::OneLevelPatching => "one_level_patching",
        }
    }

    /// Human-readable row label for ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            AblationFlag::NoCycleMlp => "w/o MLP in Mixing Cycle Module",
            AblationFlag::NoCycleModule => "w/o Mixing Cycle Module",
            AblationFlag::FreezeSwt => "w/o trainable SWT",
            AblationFlag::NoSwt => "w/o SWT",
            AblationFlag::OneLevelPatching => "One-level Patching",
        }
    }

    pub fn apply(self, ablation: &mut Ablation) {
        match self {
            AblationFlag::NoCycleMlp => ablation.no_cycle_mlp = true,
            AblationFlag::NoCycleModule => ablation.no_cycle_module = true,
            AblationFlag::FreezeSwt => ablation.freeze_swt = true,
            AblationFlag::NoSwt => ablation.no_swt = true,
            AblationFlag::OneLevelPatching => ablation.one_level_patching = true,
        }
    }
}

impl fmt::Display for AblationFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationFlag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|f| f.name()).collect();
                Error::Usage(format!("unknown ablation flag `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Model hyperparameters. `channels` and `cycle_len` of 0 mean "take from
/// the dataset" and must be filled in with [`ModelConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub cycle_len: usize,
    pub levels: usize,
    pub base_wavelet: BaseWavelet,
    /// Independent filters per level; otherwise one set shared by all levels.
    pub per_level_filters: bool,
    pub patch_coarse: usize,
    /// Defaults to `patch_coarse / 2` (or `patch_coarse` when odd).
    pub patch_fine: Option<usize>,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub e_layers: usize,
    pub dropout: f64,
    pub fc_dropout: f64,
    /// Hidden width of the cycle refinement MLP; defaults to `4 * channels`.
    pub d_cycle: Option<usize>,
    pub instance_norm: bool,
    /// Also refine the lookback cycle slice before subtracting it.
    pub refine_lookback: bool,
    /// One channel encoder per band instead of a shared one.
    pub per_band_encoder: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            channels: 0,
            cycle_len: 0,
            levels: 2,
            base_wavelet: BaseWavelet::Db2,
            per_level_filters: true,
            patch_coarse: 24,
            patch_fine: None,
            d_model: 64,
            d_ff: 128,
            n_heads: 4,
            e_layers: 1,
            dropout: 0.4,
            fc_dropout: 0.1,
            d_cycle: None,
            instance_norm: true,
            refine_lookback: false,
            per_band_encoder: false,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    /// Fills `channels` / `cycle_len` left at 0.
    pub fn resolve(mut self, channels: usize, cycle_len: usize) -> Self {
        if self.channels == 0 {
            self.channels = channels;
        }
        if self.cycle_len == 0 {
            self.cycle_len = cycle_len;
        }
        self
    }

    pub fn with_flag(mut self, flag: AblationFlag) -> Self {
        flag.apply(&mut self.ablation);
        self
    }

    pub fn fine_patch(&self) -> usize {
        if self.ablation.one_level_patching {
            return self.patch_coarse;
        }
        self.patch_fine.unwrap_or(if self.patch_coarse % 2 == 0 {
            self.patch_coarse / 2
        } else {
            self.patch_coarse
        })
    }

    pub fn patch_spec(&self) -> Result<PatchSpec> {
        PatchSpec::new(self.lookback, self.patch_coarse, self.fine_patch())
    }

    pub fn cycle_hidden(&self) -> usize {
        self.d_cycle.unwrap_or(4 * self.channels)
    }

    /// Number of bands entering the mixers.
    pub fn n_bands(&self) -> usize {
        if self.ablation.no_swt {
            1
        } else {
            self.levels + 1
        }
    }

    /// Structural checks needed to build and run the model.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("patch_coarse", self.patch_coarse),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("e_layers", self.e_layers),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if !self.ablation.no_cycle_module && self.cycle_len == 0 {
            return Err(Error::Config("cycle_len must be positive".into()));
        }
        if self.d_cycle == Some(0) {
            return Err(Error::Config("d_cycle must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        for (key, p) in [("dropout", self.dropout), ("fc_dropout", self.fc_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{key} must be in [0, 1), got {p}")));
            }
        }
        self.patch_spec()?;
        if !self.ablation.no_swt {
            if !(1..=MAX_LEVELS).contains(&self.levels) {
                return Err(Error::Config(format!(
                    "levels must be in [1, {MAX_LEVELS}], got {}",
                    self.levels
                )));
            }
            check_support(self.levels, self.base_wavelet.filter_len(), self.lookback)?;
        }
        if self.channels == 1 && !self.ablation.no_cycle_module && !self.ablation.no_cycle_mlp {
            warn!("layer norm over a single channel makes the refined cycle constant");
        }
        Ok(())
    }

    /// Whether the configuration lies inside the hyperparameter search space.
    /// Returns the first violated key.
    pub fn search_space_violation(&self) -> Option<String> {
        let checks: [(&str, bool); 9] = [
            ("horizon", HORIZONS.contains(&self.horizon)),
            ("e_layers", (1..=5).contains(&self.e_layers)),
            ("levels", (1..=5).contains(&self.levels)),
            ("d_model", D_MODEL_CHOICES.contains(&self.d_model)),
            ("d_ff", D_FF_CHOICES.contains(&self.d_ff)),
            ("dropout", (0.4..=0.9).contains(&self.dropout)),
            (
                "fc_dropout",
                FC_DROPOUT_CHOICES.iter().any(|v| (v - self.fc_dropout).abs() < 1e-12),
            ),
            ("patch_coarse", CANDIDATE_PATCH_SIZES.contains(&self.patch_coarse)),
            (
                "patch_fine",
                self.patch_fine.is_none_or(|p| CANDIDATE_PATCH_SIZES.contains(&p)),
            ),
        ];
        checks
            .iter()
            .find(|(_, ok)| !ok)
            .map(|(key, _)| (*key).to_string())
    }

    /// Canonical JSON used in checkpoint headers.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
