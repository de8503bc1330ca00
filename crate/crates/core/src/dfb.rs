//! Dual-template fusion: each template stream queries the other through a
//! shared cross-attention block, and the two refined streams are concatenated
//! static-first.

use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{multi_head_attention, Ctx, LayerNorm, Linear, ParamStore};
use crate::scalar::Scalar;

/// One cross-attention parameter set, used for both fusion directions.
#[derive(Clone, Debug)]
pub struct CrossAttentionParams {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub width: usize,
}

impl CrossAttentionParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), width),
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            o: Linear::new(store, &format!("{name}.o"), width, width, rng),
            heads,
            width,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// `query + W_O · MHA(LN(query) W_Q, LN(kv) W_K, LN(kv) W_V)`.
pub fn cross_attend<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    params: &CrossAttentionParams,
    query: Var,
    kv: Var,
) -> Result<Var> {
    let (qd, kd) = (ctx.g.value(query).cols(), ctx.g.value(kv).cols());
    if qd != params.width || kd != params.width {
        return Err(Error::shape(format!("cross-attention width {} got query {qd} / key-value {kd}", params.width)));
    }
    let qn = params.norm.forward(ctx, query);
    let kn = params.norm.forward(ctx, kv);
    let q = params.q.forward(ctx, qn);
    let k = params.k.forward(ctx, kn);
    let v = params.v.forward(ctx, kn);
    let att = multi_head_attention(ctx, q, k, v, params.heads);
    let out = params.o.forward(ctx, att);
    Ok(ctx.g.add(query, out))
}

/// `[CA(static, dynamic); CA(dynamic, static)]`.
pub fn blend<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    params: &CrossAttentionParams,
    static_tokens: Var,
    dynamic_tokens: Var,
) -> Result<Var> {
    let (ns, nd) = (ctx.g.value(static_tokens).rows(), ctx.g.value(dynamic_tokens).rows());
    if ns != nd {
        return Err(Error::shape(format!("static has {ns} tokens, dynamic has {nd}")));
    }
    let s = cross_attend(ctx, params, static_tokens, dynamic_tokens)?;
    let d = cross_attend(ctx, params, dynamic_tokens, static_tokens)?;
    Ok(ctx.g.concat_rows(&[s, d]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn setup(width: usize, heads: usize) -> (ParamStore<f64>, CrossAttentionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = CrossAttentionParams::new(&mut store, "dfb", width, heads, &mut rng).unwrap();
        (store, p)
    }

    fn tokens(n: usize, d: usize, seed: usize) -> Tensor<f64> {
        let data = (0..n * d).map(|i| (((i + seed * 31) as f64) * 0.377).sin()).collect();
        Tensor::from_vec(n, d, data).unwrap()
    }

    #[test]
    fn zero_key_values_leave_the_query() {
        let (store, p) = setup(8, 2);
        let mut ctx = Ctx::new(&store, false);
        let q = ctx.g.constant(tokens(3, 8, 0));
        let kv = ctx.g.constant(Tensor::zeros(5, 8));
        let out = cross_attend(&mut ctx, &p, q, kv).unwrap();
        assert_eq!(ctx.g.value(out), ctx.g.value(q));
    }

    #[test]
    fn single_key_value_bypasses_attention_weights() {
        let (store, p) = setup(8, 2);
        let mut ctx = Ctx::new(&store, false);
        let qt = tokens(1, 8, 1);
        let kvt = tokens(1, 8, 2);
        let q = ctx.g.constant(qt.clone());
        let kv = ctx.g.constant(kvt);
        let out = cross_attend(&mut ctx, &p, q, kv).unwrap();
        // expected: q + (LN(kv) W_V + b_V) W_O + b_O
        let kn = p.norm.forward(&mut ctx, kv);
        let v = p.v.forward(&mut ctx, kn);
        let o = p.o.forward(&mut ctx, v);
        let expect = ctx.g.add(q, o);
        assert!(ctx.g.value(out).max_abs_diff(ctx.g.value(expect)) < 1e-12);
    }

    #[test]
    fn blend_shapes_and_symmetry() {
        let (store, p) = setup(32, 4);
        let mut ctx = Ctx::new(&store, false);
        let a = ctx.g.constant(tokens(16, 32, 3));
        let out = blend(&mut ctx, &p, a, a).unwrap();
        let v = ctx.g.value(out);
        assert_eq!(v.shape(), (32, 32));
        assert_eq!(v.slice_rows(0, 16), v.slice_rows(16, 16));

        let b = ctx.g.constant(tokens(9, 32, 4));
        assert!(matches!(blend(&mut ctx, &p, a, b), Err(Error::Shape(_))));
        let narrow = ctx.g.constant(tokens(16, 8, 4));
        assert!(matches!(cross_attend(&mut ctx, &p, a, narrow), Err(Error::Shape(_))));
    }

    #[test]
    fn key_value_order_does_not_matter() {
        let (store, p) = setup(8, 2);
        let mut ctx = Ctx::new(&store, false);
        let q = ctx.g.constant(tokens(4, 8, 5));
        let kvt = tokens(6, 8, 6);
        let mut rev = Vec::new();
        for r in (0..6).rev() {
            rev.extend_from_slice(kvt.row(r));
        }
        let kv = ctx.g.constant(kvt);
        let kv_rev = ctx.g.constant(Tensor::from_vec(6, 8, rev).unwrap());
        let a = cross_attend(&mut ctx, &p, q, kv).unwrap();
        let b = cross_attend(&mut ctx, &p, q, kv_rev).unwrap();
        assert!(ctx.g.value(a).max_abs_diff(ctx.g.value(b)) < 1e-12);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(CrossAttentionParams::new(&mut store, "x", 10, 3, &mut rng).is_err());
    }
}
