//! Named parameter storage and the per-forward binding context.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), trainable: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar entries, trainable or not.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrite a tensor, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {} is {:?}, got {:?}",
                self.names[id.0],
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }
}

/// Binds store parameters into one [`Graph`] on first use.
pub struct Ctx<'a, T: Scalar> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    /// When false every parameter enters the graph as a constant.
    pub track_params: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, track_params: bool) -> Self {
        Self { g: Graph::new(), store, bound: vec![None; store.len()], track_params }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.track_params && self.store.is_trainable(id) { self.g.param(t) } else { self.g.constant(t) };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter, indexed like the store.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.bound.iter().map(|b| b.and_then(|v| grads.get(v).cloned())).collect()
    }
}

pub(crate) fn uniform_tensor<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::lit(rng.random_range(-limit..limit))).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

pub(crate) fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

/// Affine map on rows: `x · W + b`, with `W: in x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(rng, fan_in, fan_out, limit), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out), true);
        Self { weight, bias }
    }

    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(fan_in, fan_out), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out), true);
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let y = ctx.g.matmul(x, w);
        ctx.g.add_row(y, b)
    }
}

/// Row-wise layer normalisation with learned scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(1, width, T::one()), true);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, width), true);
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let n = ctx.g.norm_rows(x);
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        let s = ctx.g.mul_row(n, gamma);
        ctx.g.add_row(s, beta)
    }
}

/// Multi-head scaled dot-product attention over already-projected inputs.
pub fn multi_head_attention<T: Scalar>(ctx: &mut Ctx<'_, T>, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let d = ctx.g.value(q).cols();
    let hd = d / heads;
    let scale = T::one() / lit::<T>(hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (ctx.g.slice_cols(q, h * hd, hd), ctx.g.slice_cols(k, h * hd, hd), ctx.g.slice_cols(v, h * hd, hd))
        };
        let scores = ctx.g.matmul_t(qh, kh);
        let scores = ctx.g.scale(scores, scale);
        let att = ctx.g.softmax_rows(scores);
        outs.push(ctx.g.matmul(att, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        ctx.g.concat_cols(&outs)
    }
}
