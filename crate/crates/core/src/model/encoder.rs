//! Channel mixing encoder: for every coarse patch, channels are tokens
//! embedded from their patch values, mixed by post-norm transformer blocks
//! and projected back to the patch length.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{ParamStore, Real, Tape, Var};

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, d_model: usize, n_heads: usize, rng: &mut R) -> Self {
        let mut lin = |s: &str| Linear::new(store, &format!("{name}.{s}"), d_model, d_model, true, rng);
        Self {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            out: lin("out"),
            n_heads,
        }
    }

    /// Self-attention over the token axis of `x: S x N x d`.
    pub fn forward<'t, T: Real>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (seqs, tokens, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.n_heads, d / self.n_heads);
        let split = |v: Var<'t, T>| -> Result<Var<'t, T>> {
            v.reshape(&[seqs, tokens, h, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[seqs * h, tokens, dh])
        };
        let q = split(self.q.forward(tape, store, x)?)?;
        let k = split(self.k.forward(tape, store, x)?)?;
        let v = split(self.v.forward(tape, store, x)?)?;
        let scores = q.matmul(&k.transpose(1, 2)?)?.scale(1.0 / (dh as f64).sqrt());
        let ctx = scores.softmax().matmul(&v)?;
        let merged = ctx
            .reshape(&[seqs, h, tokens, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[seqs, tokens, d])?;
        self.out.forward(tape, store, &merged)
    }

    pub fn param_count(&self) -> usize {
        self.q.param_count() + self.k.param_count() + self.v.param_count() + self.out.param_count()
    }
}

/// Post-norm block: `LN(x + drop(attn(x)))`, then `LN(y + drop(ffn(y)))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        n_heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, n_heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            ff1: Linear::new(store, &format!("{name}.ff1"), d_model, d_ff, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), d_ff, d_model, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
            dropout,
        }
    }

    pub fn forward<'t, T: Real>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.attn.forward(tape, store, x)?.dropout(self.dropout)?;
        let y = self.norm1.forward(tape, store, &x.add(&a)?)?;
        let f = self.ff1.forward(tape, store, &y)?.gelu();
        let f = self.ff2.forward(tape, store, &f)?.dropout(self.dropout)?;
        self.norm2.forward(tape, store, &y.add(&f)?)
    }

    pub fn param_count(&self) -> usize {
        self.attn.param_count()
            + self.norm1.param_count()
            + self.ff1.param_count()
            + self.ff2.param_count()
            + self.norm2.param_count()
    }
}

#[derive(Clone, Debug)]
pub struct ChannelEncoder {
    pub embed: Linear,
    pub layers: Vec<EncoderLayer>,
    pub project: Linear,
}

impl ChannelEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        patch_len: usize,
        d_model: usize,
        d_ff: usize,
        n_heads: usize,
        e_layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let embed = Linear::new(store, &format!("{name}.embed"), patch_len, d_model, true, rng);
        let layers = (0..e_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), d_model, d_ff, n_heads, dropout, rng))
            .collect();
        let project = Linear::new(store, &format!("{name}.project"), d_model, patch_len, true, rng);
        Self {
            embed,
            layers,
            project,
        }
    }

    /// `x: B x C x N_co x P_co -> B x C x N_co x P_co`, each coarse patch
    /// mixed across channels independently.
    pub fn forward<'t, T: Real>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.embed.in_features {
            return Err(Error::shape("channel_encoder", &s, &[0, 0, 0, self.embed.in_features]));
        }
        let (b, c, n, p) = (s[0], s[1], s[2], s[3]);
        let tokens = x.permute(&[0, 2, 1, 3])?.reshape(&[b * n, c, p])?;
        let mut h = self.embed.forward(tape, store, &tokens)?;
        for layer in &self.layers {
            h = layer.forward(tape, store, &h)?;
        }
        self.project
            .forward(tape, store, &h)?
            .reshape(&[b, n, c, p])?
            .permute(&[0, 2, 1, 3])
    }

    pub fn param_count(&self) -> usize {
        self.embed.param_count() + self.layers.iter().map(EncoderLayer::param_count).sum::<usize>() + self.project.param_count()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{grad_check_params, Tensor};

    fn encoder(store: &mut ParamStore<f64>) -> ChannelEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        ChannelEncoder::new(store, "enc", 4, 8, 16, 2, 1, 0.0, &mut rng)
    }

    #[test]
    fn single_channel_attention_is_value_path() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng);
        let tape = Tape::eval();
        let x = tape.constant(Tensor::from_fn(&[3, 1, 4], |i| (i as f64 * 0.7).sin()));
        let y = mha.forward(&tape, &store, &x).unwrap().value();
        let v = mha.v.forward(&tape, &store, &x).unwrap();
        let expect = mha.out.forward(&tape, &store, &v).unwrap().value();
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn channel_permutation_equivariance() {
        let mut store = ParamStore::<f64>::new();
        let enc = encoder(&mut store);
        let (b, c, n, p) = (2, 5, 3, 4);
        let x = Tensor::from_fn(&[b, c, n, p], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
        let perm = [3, 0, 4, 1, 2];
        let permute_channels = |t: &Tensor<f64>| {
            let block = n * p;
            let mut out = Vec::with_capacity(t.numel());
            for bi in 0..b {
                for &ci in &perm {
                    let off = (bi * c + ci) * block;
                    out.extend_from_slice(&t.data()[off..off + block]);
                }
            }
            Tensor::new(t.shape(), out).unwrap()
        };
        let tape = Tape::eval();
        let y = enc.forward(&tape, &store, &tape.constant(x.clone())).unwrap().value();
        let yp = enc
            .forward(&tape, &store, &tape.constant(permute_channels(&x)))
            .unwrap()
            .value();
        assert!(yp.max_abs_diff(&permute_channels(&y)) < 1e-12);
    }

    #[test]
    fn encoder_gradcheck() {
        let mut store = ParamStore::<f64>::new();
        let enc = encoder(&mut store);
        let x = Tensor::from_fn(&[1, 3, 2, 4], |i| (i as f64 * 0.31).cos());
        let report = grad_check_params(
            &store,
            |tape, store| {
                let y = enc.forward(tape, store, &tape.constant(x.clone()))?;
                let w = tape.constant(Tensor::from_fn(&y.shape(), |i| (i as f64 * 0.17).sin()));
                Ok(y.mul(&w)?.sum())
            },
            1e-6,
            1e-3,
            None,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn param_count_matches_store() {
        let mut store = ParamStore::<f64>::new();
        let enc = encoder(&mut store);
        assert_eq!(enc.param_count(), store.count());
    }
}
