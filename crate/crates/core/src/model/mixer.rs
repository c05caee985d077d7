//! Per-band coarse/fine patch mixers and the prediction head.

use rand::Rng;

use crate::error::Result;
use crate::nn::{Linear, Mlp};
use crate::patching::{patch_coarse, patch_fine, unpatch_coarse, unpatch_fine, PatchSpec};
use crate::tensor::{ParamStore, Real, Tape, Var};

/// Independent mixer stack for one band.
#[derive(Clone, Debug)]
pub struct BandMixer {
    /// Along the fine-patch index (`N_fi`); absent for one-level patching.
    pub fine: Option<Mlp>,
    /// Along the flattened coarse resolution (`N_co * P_co = L`).
    pub flat: Mlp,
    /// Along the coarse patch length (`P_co`).
    pub patch: Mlp,
    pub spec: PatchSpec,
}

impl BandMixer {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: PatchSpec,
        fine_level: bool,
        d_ff: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let fine = fine_level.then(|| {
            let n = spec.n_fine();
            Mlp::new(store, &format!("{name}.fine"), n, d_ff, n, dropout, rng)
        });
        let flat = Mlp::new(store, &format!("{name}.flat"), spec.len, d_ff, spec.len, dropout, rng);
        let patch = Mlp::new(store, &format!("{name}.patch"), spec.coarse, d_ff, spec.coarse, dropout, rng);
        Self {
            fine,
            flat,
            patch,
            spec,
        }
    }

    /// Fine mixing on `B x C x L` (viewed as fine patches), returns `B x C x L`.
    pub fn mix_fine<'t, T: Real>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        match &self.fine {
            Some(mlp) => {
                let xf = patch_fine(x, &self.spec)?;
                unpatch_fine(&mlp.residual_along(tape, store, &xf, 3)?, &self.spec)
            }
            None => Ok(*x),
        }
    }

    /// Flat then per-patch coarse mixing on `B x C x L`.
    pub fn mix_coarse<'t, T: Real>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let flat = self.flat.residual(tape, store, x)?;
        let xc = patch_coarse(&flat, &self.spec)?;
        unpatch_coarse(&self.patch.residual(tape, store, &xc)?, &self.spec)
    }

    pub fn forward<'t, T: Real>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let f = self.mix_fine(tape, store, x)?;
        self.mix_coarse(tape, store, &f)
    }

    pub fn param_count(&self) -> usize {
        self.fine.as_ref().map_or(0, Mlp::param_count) + self.flat.param_count() + self.patch.param_count()
    }

    pub fn zero_outputs<T: Real>(&self, store: &mut ParamStore<T>) {
        if let Some(f) = &self.fine {
            f.zero_output(store);
        }
        self.flat.zero_output(store);
        self.patch.zero_output(store);
    }
}

/// Residual MLP along time, then a channel-shared linear map `L -> H`.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub mlp: Mlp,
    pub linear: Linear,
}

impl PredictionHead {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        lookback: usize,
        horizon: usize,
        d_ff: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            mlp: Mlp::new(store, &format!("{name}.mlp"), lookback, d_ff, lookback, dropout, rng),
            linear: Linear::new(store, &format!("{name}.linear"), lookback, horizon, true, rng),
        }
    }

    /// `B x C x L -> B x C x H`.
    pub fn forward<'t, T: Real>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.mlp.residual(tape, store, x)?;
        self.linear.forward(tape, store, &h)
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count() + self.linear.param_count()
    }
}
