//! Parameterized building blocks shared by the model components.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Affine map over the last axis: `y = x W + b`, `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Uniform init in `[-1/sqrt(in), 1/sqrt(in)]` for weight and bias.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let mut uniform = |shape: &[usize]| {
            Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
        };
        let weight = store.add(format!("{name}.weight"), uniform(&[in_features, out_features]), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(&[out_features]), true));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let y = x.matmul(&tape.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add_bias(&tape.param(store, b)),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + if self.bias.is_some() { self.out_features } else { 0 }
    }

    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        zero_param(store, self.weight);
        if let Some(b) = self.bias {
            zero_param(store, b);
        }
    }
}

pub(crate) fn zero_param<T: Real>(store: &mut ParamStore<T>, id: ParamId) {
    store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = T::zero());
}

/// Two-layer perceptron with GELU: `fc2(dropout(gelu(fc1(x))))`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out, true, rng),
            dropout,
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(tape, store, x)?.gelu().dropout(self.dropout)?;
        self.fc2.forward(tape, store, &h)
    }

    /// `mlp(x) + x` along the last axis.
    pub fn residual<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.forward(tape, store, x)?.add(x)
    }

    /// `mlp(x) + x` applied along `axis`.
    pub fn residual_along<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
        axis: usize,
    ) -> Result<Var<'t, T>> {
        let last = x.shape().len() - 1;
        if axis == last {
            return self.residual(tape, store, x);
        }
        let moved = x.transpose(axis, last)?;
        self.residual(tape, store, &moved)?.transpose(axis, last)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    /// Zeroes the output layer so the block contributes nothing.
    pub fn zero_output<T: Real>(&self, store: &mut ParamStore<T>) {
        self.fc2.zero(store);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
            dim,
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        x.layer_norm(&tape.param(store, self.gamma), &tape.param(store, self.beta))
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn linear_param_count_with_bias() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "lin", 4, 2, true, &mut rng);
        assert_eq!(lin.param_count(), 10);
        assert_eq!(store.count(), 10);
    }

    #[test]
    fn zeroed_mlp_residual_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, "m", 3, 8, 3, 0.0, &mut rng);
        mlp.zero_output(&mut store);
        let tape = Tape::eval();
        let x = Tensor::from_fn(&[2, 4, 3], |i| (i as f64).sin());
        let xv = tape.constant(x.clone());
        for axis in [1, 2] {
            let x_axis = if axis == 1 {
                tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64).cos()))
            } else {
                xv
            };
            let y = mlp.residual_along(&tape, &store, &x_axis, axis).unwrap();
            assert_eq!(y.value(), x_axis.value());
        }
    }
}
