//! Two-level non-overlapping patching of per-channel sequences.
//!
//! A band `B x C x L` is cut into `N_co = L / P_co` coarse patches and each
//! coarse patch into `N_fi = P_co / P_fi` fine patches. All views are plain
//! reshapes/permutes, so patching and unpatching are exact inverses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

/// Patch sizes offered when a requested size does not fit.
pub const CANDIDATE_PATCH_SIZES: [usize; 7] = [4, 8, 12, 16, 24, 32, 48];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub len: usize,
    pub coarse: usize,
    pub fine: usize,
}

impl PatchSpec {
    pub fn new(len: usize, coarse: usize, fine: usize) -> Result<Self> {
        if coarse == 0 || len % coarse != 0 {
            let valid: Vec<usize> = CANDIDATE_PATCH_SIZES
                .iter()
                .copied()
                .filter(|p| len % p == 0)
                .collect();
            return Err(Error::Config(format!(
                "coarse patch size {coarse} does not divide L={len}; valid sizes: {valid:?}"
            )));
        }
        if fine == 0 || coarse % fine != 0 {
            let valid: Vec<usize> = (1..=coarse).filter(|p| coarse % p == 0).collect();
            return Err(Error::Config(format!(
                "fine patch size {fine} does not divide P_co={coarse}; valid sizes: {valid:?}"
            )));
        }
        Ok(Self { len, coarse, fine })
    }

    pub fn n_coarse(&self) -> usize {
        self.len / self.coarse
    }

    pub fn n_fine(&self) -> usize {
        self.coarse / self.fine
    }
}

fn dims3<T: Real>(op: &'static str, x: &Var<'_, T>, len: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != len {
        return Err(Error::shape(op, &s, &[0, 0, len]));
    }
    Ok((s[0], s[1]))
}

/// `B x C x L -> B x C x N_co x P_co`.
pub fn patch_coarse<'t, T: Real>(x: &Var<'t, T>, spec: &PatchSpec) -> Result<Var<'t, T>> {
    let (b, c) = dims3("patch_coarse", x, spec.len)?;
    x.reshape(&[b, c, spec.n_coarse(), spec.coarse])
}

/// `B x C x N_co x P_co -> B x C x L`.
pub fn unpatch_coarse<'t, T: Real>(x: &Var<'t, T>, spec: &PatchSpec) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] != spec.n_coarse() || s[3] != spec.coarse {
        return Err(Error::shape("unpatch_coarse", &s, &[0, 0, spec.n_coarse(), spec.coarse]));
    }
    x.reshape(&[s[0], s[1], spec.len])
}

/// `B x C x L -> B x C x N_co x N_fi x P_fi`.
pub fn patch_fine<'t, T: Real>(x: &Var<'t, T>, spec: &PatchSpec) -> Result<Var<'t, T>> {
    let (b, c) = dims3("patch_fine", x, spec.len)?;
    x.reshape(&[b, c, spec.n_coarse(), spec.n_fine(), spec.fine])
}

/// `B x C x N_co x N_fi x P_fi -> B x C x L`.
pub fn unpatch_fine<'t, T: Real>(x: &Var<'t, T>, spec: &PatchSpec) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 5 || s[2] != spec.n_coarse() || s[3] != spec.n_fine() || s[4] != spec.fine {
        return Err(Error::shape(
            "unpatch_fine",
            &s,
            &[0, 0, spec.n_coarse(), spec.n_fine(), spec.fine],
        ));
    }
    x.reshape(&[s[0], s[1], spec.len])
}
