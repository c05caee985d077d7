//! Central finite-difference gradient checking (64-bit).

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Smallest denominator used when normalizing gradient errors.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    /// Largest absolute difference between analytic and numeric gradient.
    pub max_abs_err: f64,
    /// `max_abs_err / max(|analytic|_inf, |numeric|_inf)`.
    pub rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_err < self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.rel_err >= self.tol)
    }
}

fn entry(name: String, analytic: &[f64], numeric: &[f64]) -> GradCheckEntry {
    let mut max_abs_err = 0.0f64;
    let mut scale = REL_FLOOR;
    for (a, n) in analytic.iter().zip(numeric) {
        max_abs_err = max_abs_err.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    GradCheckEntry {
        name,
        max_abs_err,
        rel_err: max_abs_err / scale,
        checked: analytic.len(),
    }
}

fn eval_scalar(v: Var<'_, f64>) -> f64 {
    v.with_value(|t| t.data()[0])
}

/// Checks `d f / d inputs` for a scalar-valued `f` built on an eval-mode tape.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    grad_check_on(Tape::eval, f, inputs, eps, tol)
}

/// [`grad_check`] on tapes from `make_tape`, e.g. a seeded training tape so
/// dropout masks repeat across evaluations.
pub fn grad_check_on<M, F>(make_tape: M, f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    M: Fn() -> Tape<f64>,
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = make_tape();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    let grads = loss.backward()?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| grads.wrt(v).cloned().expect("leaf requires grad"))
        .collect();

    let run = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = make_tape();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        Ok(eval_scalar(f(&tape, &vars)?))
    };

    let mut entries = Vec::new();
    let mut xs = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; x.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = x.data()[j];
            xs[i].data_mut()[j] = orig + eps;
            let up = run(&xs)?;
            xs[i].data_mut()[j] = orig - eps;
            let down = run(&xs)?;
            xs[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * eps);
        }
        entries.push(entry(format!("input{i}"), analytic[i].data(), &numeric));
    }
    Ok(GradCheckReport { entries, tol })
}

/// Checks gradients of every trainable parameter in `store`. At most
/// `max_per_param` evenly spaced elements are perturbed per tensor.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    eps: f64,
    tol: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::eval();
    let loss = f(&tape, store)?;
    let grads = loss.backward()?;

    let mut work = store.clone();
    let mut entries = Vec::new();
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let n = p.value.numel();
        let stride = match max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let zero = Tensor::zeros(p.value.shape());
        let g = grads.param(id).unwrap_or(&zero);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in (0..n).step_by(stride) {
            let orig = p.value.data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + eps;
            let up = {
                let t = Tape::eval();
                eval_scalar(f(&t, &work)?)
            };
            work.get_mut(id).value.data_mut()[j] = orig - eps;
            let down = {
                let t = Tape::eval();
                eval_scalar(f(&t, &work)?)
            };
            work.get_mut(id).value.data_mut()[j] = orig;
            analytic.push(g.data()[j]);
            numeric.push((up - down) / (2.0 * eps));
        }
        entries.push(entry(p.name.clone(), &analytic, &numeric));
    }
    Ok(GradCheckReport { entries, tol })
}
