//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] records every op executed through a [`Var`] together with the
//! values its adjoint needs. [`Var::backward`] replays the adjoints in reverse
//! execution order and clears the tape. A fresh tape is built per forward pass.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::{gemm, inverse_perm, permute_data, MatRef};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance inside [`Var::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-7;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op<T> {
    Leaf { param: Option<ParamId> },
    MatMul { a: usize, b: usize, shared_rhs: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Scale { x: usize, c: T },
    Conv { x: usize, filter: usize, dilation: usize },
    Corr { x: usize, filter: usize, dilation: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: usize },
    Gelu { x: usize },
    Dropout { x: usize, mask: Vec<T> },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    GatherRows { x: usize, rows: Vec<usize> },
    Sum { x: usize },
    Mean { x: usize },
    MseLoss { pred: usize, target: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    param_leaves: RefCell<HashMap<ParamId, usize>>,
    training: bool,
    seed: u64,
    dropout_ops: Cell<u64>,
}

impl<T: Real> Tape<T> {
    /// Tape in training mode; `seed` derives an independent dropout stream per
    /// dropout op (stream index = op ordinal on this tape).
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    /// Tape in evaluation mode: dropout is the identity.
    pub fn eval() -> Self {
        Self::with_mode(false, 0)
    }

    pub fn with_mode(training: bool, seed: u64) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(HashMap::new()),
            training,
            seed,
            dropout_ops: Cell::new(0),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Input leaf. Gradients are reported for it iff `requires_grad`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Leaf holding a snapshot of a stored parameter; repeated calls with the
    /// same id return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.param_leaves.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf { param: Some(id) }, p.trainable);
        self.param_leaves.borrow_mut().insert(id, v.id);
        v
    }

    fn dropout_rng(&self) -> ChaCha8Rng {
        let k = self.dropout_ops.get();
        self.dropout_ops.set(k + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k);
        rng
    }

    fn backward_from(&self, loss: usize) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss + 1, || None);
        grads[loss] = Some(vec![T::one()]);

        let mut out = Gradients::default();
        for i in (0..=loss).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if let Op::Leaf { param } = node.op {
                    let zero = Tensor::zeros(node.value.shape());
                    if let Some(p) = param {
                        out.params.insert(p, zero.clone());
                    }
                    out.leaves.insert(i, zero);
                }
                continue;
            };
            let mut acc = |id: usize, contrib: Vec<T>| {
                if !nodes[id].requires_grad {
                    return;
                }
                match &mut grads[id] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contrib) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |id: usize| &nodes[id].value;
            let needs = |id: usize| nodes[id].requires_grad;
            match &node.op {
                Op::Leaf { param } => {
                    let t = Tensor::new(node.value.shape(), g)?;
                    if let Some(p) = param {
                        out.params.insert(*p, t.clone());
                    }
                    out.leaves.insert(i, t);
                }
                Op::MatMul { a, b, shared_rhs } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (ga, gb) = matmul_backward(av, bv, &g, *shared_rhs, needs(*a), needs(*b));
                    if let Some(ga) = ga {
                        acc(*a, ga);
                    }
                    if let Some(gb) = gb {
                        acc(*b, gb);
                    }
                }
                Op::Add { a, b } => {
                    if needs(*a) {
                        acc(*a, g.clone());
                    }
                    acc(*b, g);
                }
                Op::Sub { a, b } => {
                    if needs(*b) {
                        acc(*b, g.iter().map(|&v| -v).collect());
                    }
                    acc(*a, g);
                }
                Op::Mul { a, b } => {
                    if needs(*a) {
                        acc(*a, g.iter().zip(val(*b).data()).map(|(&g, &y)| g * y).collect());
                    }
                    if needs(*b) {
                        acc(*b, g.iter().zip(val(*a).data()).map(|(&g, &x)| g * x).collect());
                    }
                }
                Op::AddBias { x, bias } => {
                    if needs(*bias) {
                        let n = val(*bias).numel();
                        let mut gb = vec![T::zero(); n];
                        for row in g.chunks(n) {
                            for (s, &v) in gb.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        acc(*bias, gb);
                    }
                    acc(*x, g);
                }
                Op::Scale { x, c } => acc(*x, g.iter().map(|&v| v * *c).collect()),
                Op::Conv { x, filter, dilation } | Op::Corr { x, filter, dilation } => {
                    let forward_conv = matches!(node.op, Op::Conv { .. });
                    let (xv, fv) = (val(*x), val(*filter));
                    let len = *xv.shape().last().unwrap();
                    let shifts = shifts(fv.numel(), *dilation, len, forward_conv);
                    if needs(*filter) {
                        let mut gf = vec![T::zero(); fv.numel()];
                        for (row_g, row_x) in g.chunks(len).zip(xv.data().chunks(len)) {
                            for (k, &s) in shifts.iter().enumerate() {
                                gf[k] += shifted_dot(row_g, row_x, s);
                            }
                        }
                        acc(*filter, gf);
                    }
                    if needs(*x) {
                        // adjoint of a circular shift by s is the shift by len - s
                        let back: Vec<usize> = shifts.iter().map(|&s| (len - s) % len).collect();
                        let mut gx = vec![T::zero(); xv.numel()];
                        for (out_row, g_row) in gx.chunks_mut(len).zip(g.chunks(len)) {
                            for (&f, &s) in fv.data().iter().zip(&back) {
                                shifted_axpy(out_row, g_row, f, s);
                            }
                        }
                        acc(*x, gx);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = val(*gamma).data();
                    let n = gv.len();
                    if needs(*gamma) || needs(*beta) {
                        let mut gg = vec![T::zero(); n];
                        let mut gbeta = vec![T::zero(); n];
                        for (row_g, row_h) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                gg[j] += row_g[j] * row_h[j];
                                gbeta[j] += row_g[j];
                            }
                        }
                        acc(*gamma, gg);
                        acc(*beta, gbeta);
                    }
                    if needs(*x) {
                        let nt = T::from_f64(n as f64);
                        let mut gx = vec![T::zero(); g.len()];
                        for (((out, row_g), row_h), &r) in gx
                            .chunks_mut(n)
                            .zip(g.chunks(n))
                            .zip(xhat.chunks(n))
                            .zip(rstd)
                        {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..n {
                                let gy = row_g[j] * gv[j];
                                m1 += gy;
                                m2 += gy * row_h[j];
                            }
                            m1 = m1 / nt;
                            m2 = m2 / nt;
                            for j in 0..n {
                                out[j] = r * (row_g[j] * gv[j] - m1 - row_h[j] * m2);
                            }
                        }
                        acc(*x, gx);
                    }
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    let mut gx = vec![T::zero(); y.len()];
                    for ((out, row_g), row_y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = row_g.iter().zip(row_y).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            out[j] = row_y[j] * (row_g[j] - dot);
                        }
                    }
                    acc(*x, gx);
                }
                Op::Gelu { x } => {
                    let xs = val(*x).data();
                    acc(*x, g.iter().zip(xs).map(|(&g, &x)| g * gelu_grad(x)).collect());
                }
                Op::Dropout { x, mask } => {
                    acc(*x, g.iter().zip(mask).map(|(&g, &m)| g * m).collect());
                }
                Op::Reshape { x } => acc(*x, g),
                Op::Permute { x, perm } => {
                    let inv = inverse_perm(perm);
                    acc(*x, permute_data(&g, node.value.shape(), &inv));
                }
                Op::GatherRows { x, rows } => {
                    let xv = val(*x);
                    let cols = xv.shape()[1];
                    let mut gx = vec![T::zero(); xv.numel()];
                    for (&r, row_g) in rows.iter().zip(g.chunks(cols)) {
                        for (s, &v) in gx[r * cols..(r + 1) * cols].iter_mut().zip(row_g) {
                            *s += v;
                        }
                    }
                    acc(*x, gx);
                }
                Op::Sum { x } => acc(*x, vec![g[0]; val(*x).numel()]),
                Op::Mean { x } => {
                    let n = val(*x).numel();
                    acc(*x, vec![g[0] / T::from_f64(n as f64); n]);
                }
                Op::MseLoss { pred, target } => {
                    let (p, t) = (val(*pred).data(), val(*target).data());
                    let scale = g[0] * T::from_f64(2.0 / p.len() as f64);
                    let gp: Vec<T> = p.iter().zip(t).map(|(&p, &t)| scale * (p - t)).collect();
                    if needs(*target) {
                        acc(*target, gp.iter().map(|&v| -v).collect());
                    }
                    acc(*pred, gp);
                }
            }
        }
        Ok(out)
    }
}

/// Gradients produced by [`Var::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T> Default for Gradients<T> {
    fn default() -> Self {
        Self {
            leaves: HashMap::new(),
            params: BTreeMap::new(),
        }
    }
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf created on the (now cleared) tape.
    pub fn wrt(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&v.id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Global L2 norm over all parameter gradients.
    pub fn param_norm(&self) -> f64 {
        self.params
            .values()
            .map(|t| t.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<'t, T: Real> std::fmt::Debug for Var<'t, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    /// Matrix product over the last two axes. `rhs` is either a 2-D matrix
    /// shared by every leading index of `self`, or has the same leading
    /// (batch) extents as `self`.
    pub fn matmul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(rhs);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            matmul_forward(a, b)?
        };
        let shared_rhs = rhs.shape().len() == 2;
        Ok(self.binary(
            rhs,
            value,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                shared_rhs,
            },
        ))
    }

    fn zip_with(
        &self,
        rhs: &Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.same_tape(rhs);
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
        if a.shape() != b.shape() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data)
    }

    pub fn add(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_with(rhs, "add", |a, b| a + b)?;
        Ok(self.binary(rhs, v, Op::Add { a: self.id, b: rhs.id }))
    }

    pub fn sub(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_with(rhs, "sub", |a, b| a - b)?;
        Ok(self.binary(rhs, v, Op::Sub { a: self.id, b: rhs.id }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_with(rhs, "mul", |a, b| a * b)?;
        Ok(self.binary(rhs, v, Op::Mul { a: self.id, b: rhs.id }))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(bias);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            let n = *x.shape().last().unwrap();
            if b.numel() != n || b.ndim() != 1 {
                return Err(Error::shape("add_bias", x.shape(), b.shape()));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                for (v, &bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
            Tensor::new(x.shape(), data)?
        };
        Ok(self.binary(
            bias,
            value,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Var<'t, T> {
        let c = T::from_f64(c);
        let value = self.with_value(|x| x.map(|v| v * c));
        self.unary(value, Op::Scale { x: self.id, c })
    }

    /// Circular dilated convolution along the last axis:
    /// `y[.., t] = sum_k x[.., (t - dilation*k) mod L] * filter[k]`.
    pub fn conv1d_circular(&self, filter: &Var<'t, T>, dilation: usize) -> Result<Var<'t, T>> {
        let value = self.circular(filter, dilation, true)?;
        Ok(self.binary(
            filter,
            value,
            Op::Conv {
                x: self.id,
                filter: filter.id,
                dilation,
            },
        ))
    }

    /// Adjoint of [`conv1d_circular`](Self::conv1d_circular) (circular
    /// cross-correlation): `y[.., t] = sum_k x[.., (t + dilation*k) mod L] * filter[k]`.
    pub fn corr1d_circular(&self, filter: &Var<'t, T>, dilation: usize) -> Result<Var<'t, T>> {
        let value = self.circular(filter, dilation, false)?;
        Ok(self.binary(
            filter,
            value,
            Op::Corr {
                x: self.id,
                filter: filter.id,
                dilation,
            },
        ))
    }

    fn circular(&self, filter: &Var<'t, T>, dilation: usize, conv: bool) -> Result<Tensor<T>> {
        self.same_tape(filter);
        let nodes = self.tape.nodes.borrow();
        let (x, f) = (&nodes[self.id].value, &nodes[filter.id].value);
        if f.ndim() != 1 {
            return Err(Error::shape("conv1d_circular", x.shape(), f.shape()));
        }
        let len = *x.shape().last().unwrap();
        let k = f.numel();
        if dilation == 0 || dilation * (k - 1) >= len {
            return Err(Error::Config(format!(
                "filter support exceeds signal: dilation {dilation} * (K {k} - 1) must be < L {len}"
            )));
        }
        let shifts = shifts(k, dilation, len, conv);
        let mut out = vec![T::zero(); x.numel()];
        for (out_row, x_row) in out.chunks_mut(len).zip(x.data().chunks(len)) {
            for (&c, &s) in f.data().iter().zip(&shifts) {
                shifted_axpy(out_row, x_row, c, s);
            }
        }
        Tensor::new(x.shape(), out)
    }

    /// Normalizes each slice along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let (value, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (g, b) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            let n = *x.shape().last().unwrap();
            if n < 2 {
                return Err(Error::Config(format!(
                    "layer_norm needs a normalized extent >= 2, got shape {:?}",
                    x.shape()
                )));
            }
            if g.shape() != [n] || b.shape() != [n] {
                return Err(Error::shape("layer_norm", x.shape(), g.shape()));
            }
            let nt = T::from_f64(n as f64);
            let eps = T::from_f64(LAYER_NORM_EPS);
            let mut y = vec![T::zero(); x.numel()];
            let mut xhat = vec![T::zero(); x.numel()];
            let mut rstd = Vec::with_capacity(x.numel() / n);
            for ((row, yrow), hrow) in x.data().chunks(n).zip(y.chunks_mut(n)).zip(xhat.chunks_mut(n)) {
                let mean = row.iter().copied().sum::<T>() / nt;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                let r = T::one() / (var + eps).sqrt();
                for j in 0..n {
                    hrow[j] = (row[j] - mean) * r;
                    yrow[j] = hrow[j] * g.data()[j] + b.data()[j];
                }
                rstd.push(r);
            }
            (Tensor::new(x.shape(), y)?, xhat, rstd)
        };
        let rg = self.tape.requires(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax along the last axis (max-subtracted).
    pub fn softmax(&self) -> Var<'t, T> {
        let value = self.with_value(|x| {
            let n = *x.shape().last().unwrap();
            let mut y = x.data().to_vec();
            for row in y.chunks_mut(n) {
                let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / s;
                }
            }
            Tensor::new(x.shape(), y).expect("same shape")
        });
        self.unary(value, Op::Softmax { x: self.id })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t, T> {
        let value = self.with_value(|x| x.map(gelu));
        self.unary(value, Op::Gelu { x: self.id })
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&self, p: f64) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if !self.tape.training || p == 0.0 {
            return Ok(*self);
        }
        let mut rng = self.tape.dropout_rng();
        let keep = T::from_f64(1.0 / (1.0 - p));
        let (value, mask) = self.with_value(|x| {
            let mask: Vec<T> = (0..x.numel())
                .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
                .collect();
            let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            (Tensor::new(x.shape(), data).expect("same shape"), mask)
        });
        Ok(self.unary(value, Op::Dropout { x: self.id, mask }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape { x: self.id }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let value = self.with_value(|x| x.permute(perm))?;
        Ok(self.unary(
            value,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Var<'t, T>> {
        let nd = self.shape().len();
        let mut perm: Vec<usize> = (0..nd).collect();
        if a >= nd || b >= nd {
            return Err(Error::shape("transpose", &self.shape(), &[a, b]));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Row gather from a 2-D tensor: `out[i, :] = self[rows[i], :]`.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t, T>> {
        let value = self.with_value(|x| {
            if x.ndim() != 2 {
                return Err(Error::shape("gather_rows", x.shape(), &[rows.len()]));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut data = Vec::with_capacity(rows.len() * c);
            for &i in rows {
                if i >= r {
                    return Err(Error::shape("gather_rows", x.shape(), &[i]));
                }
                data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
            }
            Tensor::new(&[rows.len(), c], data)
        })?;
        Ok(self.unary(
            value,
            Op::GatherRows {
                x: self.id,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let value = self.with_value(|x| Tensor::scalar(x.data().iter().copied().sum()));
        self.unary(value, Op::Sum { x: self.id })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let value = self.with_value(|x| {
            Tensor::scalar(x.data().iter().copied().sum::<T>() / T::from_f64(x.numel() as f64))
        });
        self.unary(value, Op::Mean { x: self.id })
    }

    /// Mean squared error against `target` (scalar output).
    pub fn mse_loss(&self, target: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(target);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (p, t) = (&nodes[self.id].value, &nodes[target.id].value);
            if p.shape() != t.shape() {
                return Err(Error::shape("mse_loss", p.shape(), t.shape()));
            }
            let s: f64 = p
                .data()
                .iter()
                .zip(t.data())
                .map(|(&a, &b)| {
                    let d = (a - b).as_f64();
                    d * d
                })
                .sum();
            Tensor::scalar(T::from_f64(s / p.numel() as f64))
        };
        Ok(self.binary(
            target,
            value,
            Op::MseLoss {
                pred: self.id,
                target: target.id,
            },
        ))
    }

    /// Reverse pass from this scalar. Clears the tape.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let grads = self.tape.backward_from(self.id);
        self.tape.nodes.borrow_mut().clear();
        self.tape.param_leaves.borrow_mut().clear();
        grads
    }
}

// 0.5 * (1 + tanh(u)) == sigmoid(2u); one exp is much cheaper than tanh.
fn gelu_gate<T: Real>(x: T) -> T {
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

fn gelu<T: Real>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_grad<T: Real>(x: T) -> T {
    let s = gelu_gate(x);
    let du = T::from_f64(GELU_C) * (T::one() + T::from_f64(3.0 * GELU_A) * x * x);
    s + x * s * (T::one() - s) * (du + du)
}

/// Backward shift per tap: output index `t` reads input `(t + len - shift) % len`.
fn shifts(k: usize, dilation: usize, len: usize, conv: bool) -> Vec<usize> {
    (0..k)
        .map(|i| {
            let s = (dilation * i) % len;
            if conv {
                s
            } else {
                (len - s) % len
            }
        })
        .collect()
}

/// `out[t] += c * x[(t + len - shift) % len]`
fn shifted_axpy<T: Real>(out: &mut [T], x: &[T], c: T, shift: usize) {
    let len = out.len();
    for t in 0..shift {
        out[t] += c * x[t + len - shift];
    }
    for t in shift..len {
        out[t] += c * x[t - shift];
    }
}

/// `sum_t g[t] * x[(t + len - shift) % len]`
fn shifted_dot<T: Real>(g: &[T], x: &[T], shift: usize) -> T {
    let len = g.len();
    let mut s = T::zero();
    for t in 0..shift {
        s += g[t] * x[t + len - shift];
    }
    for t in shift..len {
        s += g[t] * x[t - shift];
    }
    s
}

fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(Error::shape("matmul", ash, bsh));
    }
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    if k != kb {
        return Err(Error::shape("matmul", ash, bsh));
    }
    let mut out_shape = ash[..ash.len() - 1].to_vec();
    out_shape.push(n);
    let mut out = vec![T::zero(); out_shape.iter().product()];
    if bsh.len() == 2 {
        let rows = a.numel() / k;
        gemm(MatRef::new(a.data(), rows, k), MatRef::new(b.data(), k, n), &mut out, false);
    } else {
        if ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(Error::shape("matmul", ash, bsh));
        }
        let batch = a.numel() / (m * k);
        for i in 0..batch {
            gemm(
                MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k),
                MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
    }
    Tensor::new(&out_shape, out)
}

type MaybeGrad<T> = Option<Vec<T>>;

fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
    shared_rhs: bool,
    need_a: bool,
    need_b: bool,
) -> (MaybeGrad<T>, MaybeGrad<T>) {
    let (ash, bsh) = (a.shape(), b.shape());
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let n = bsh[bsh.len() - 1];
    let mut ga = need_a.then(|| vec![T::zero(); a.numel()]);
    let mut gb = need_b.then(|| vec![T::zero(); b.numel()]);
    if shared_rhs {
        let rows = a.numel() / k;
        if let Some(ga) = ga.as_mut() {
            gemm(MatRef::new(g, rows, n), MatRef::t(b.data(), n, k), ga, false);
        }
        if let Some(gb) = gb.as_mut() {
            gemm(MatRef::t(a.data(), k, rows), MatRef::new(g, rows, n), gb, false);
        }
    } else {
        let batch = a.numel() / (m * k);
        for i in 0..batch {
            let gi = &g[i * m * n..(i + 1) * m * n];
            if let Some(ga) = ga.as_mut() {
                gemm(
                    MatRef::new(gi, m, n),
                    MatRef::t(&b.data()[i * k * n..(i + 1) * k * n], n, k),
                    &mut ga[i * m * k..(i + 1) * m * k],
                    false,
                );
            }
            if let Some(gb) = gb.as_mut() {
                gemm(
                    MatRef::t(&a.data()[i * m * k..(i + 1) * m * k], k, m),
                    MatRef::new(gi, m, n),
                    &mut gb[i * k * n..(i + 1) * k * n],
                    false,
                );
            }
        }
    }
    (ga, gb)
}
