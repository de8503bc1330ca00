//! Shared helpers for the acceptance harness: seeded random tensors, central
//! finite differences and a small pass/fail report.

#![allow(dead_code)]

use darter_core::autograd::Var;
use darter_core::params::{Ctx, ParamId, ParamStore};
use darter_core::tensor::Tensor;
use darter_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Overwrite a parameter with fresh N(0, std²) values.
pub fn randomize(store: &mut ParamStore<f64>, id: ParamId, std: f64, rng: &mut ChaCha8Rng) {
    let (r, c) = store.get(id).shape();
    *store.get_mut(id) = normal(rng, r, c, std);
}

/// One scalar coordinate probed by a gradient check.
#[derive(Clone, Copy, Debug)]
pub enum Coord {
    /// `(input index, flat element index)`.
    Input(usize, usize),
    /// `(parameter, flat element index)`.
    Param(ParamId, usize),
}

/// `n` random coordinates of every input plus `n` of every listed parameter.
pub fn sample_coords(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor<f64>],
    store: &ParamStore<f64>,
    params: &[ParamId],
    n: usize,
) -> Vec<Coord> {
    let mut out = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        for _ in 0..n.min(t.len()) {
            out.push(Coord::Input(i, rng.random_range(0..t.len())));
        }
    }
    for &p in params {
        let len = store.get(p).len();
        for _ in 0..n.min(len) {
            out.push(Coord::Param(p, rng.random_range(0..len)));
        }
    }
    out
}

/// Relative error with the denominator floored at [`GRAD_FLOOR`].
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Central-difference step, near the f64 optimum `eps^(1/3)` for unit-scale inputs.
pub const FD_STEP: f64 = 1e-5;

pub type LossFn<'f> = dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var> + 'f;

fn evaluate(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: &LossFn<'_>) -> f64 {
    let mut ctx = Ctx::new(store, false);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.g.constant(t.clone())).collect();
    let out = f(&mut ctx, &vars).unwrap();
    ctx.g.scalar(out)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of the scalar `f` over `coords`.
pub fn grad_check(store: &mut ParamStore<f64>, inputs: &mut [Tensor<f64>], coords: &[Coord], f: &LossFn<'_>) -> f64 {
    let (input_grads, param_grads) = {
        let mut ctx = Ctx::new(store, true);
        let vars: Vec<Var> = inputs.iter().map(|t| ctx.g.param(t.clone())).collect();
        let out = f(&mut ctx, &vars).unwrap();
        let grads = ctx.g.backward(out);
        let ig: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| grads.get(v).cloned()).collect();
        (ig, ctx.param_grads(&grads))
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst = 0.0f64;
    for &c in coords {
        let analytic = match c {
            Coord::Input(i, k) => input_grads[i].as_ref().map_or(0.0, |g| g.data()[k]),
            Coord::Param(p, k) => {
                let slot = ids.iter().position(|&x| x == p).unwrap();
                param_grads[slot].as_ref().map_or(0.0, |g| g.data()[k])
            }
        };
        let at = |delta: f64, store: &mut ParamStore<f64>, inputs: &mut [Tensor<f64>]| {
            let cell = match c {
                Coord::Input(i, k) => &mut inputs[i].data_mut()[k],
                Coord::Param(p, k) => &mut store.get_mut(p).data_mut()[k],
            };
            let orig = *cell;
            *cell = orig + delta;
            let v = evaluate(store, inputs, f);
            let cell = match c {
                Coord::Input(i, k) => &mut inputs[i].data_mut()[k],
                Coord::Param(p, k) => &mut store.get_mut(p).data_mut()[k],
            };
            *cell = orig;
            v
        };
        let plus = at(FD_STEP, store, inputs);
        let minus = at(-FD_STEP, store, inputs);
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

/// Sub-check results for one criterion.
#[derive(Default)]
pub struct Report {
    pub lines: Vec<(bool, String)>,
}

impl Report {
    pub fn check(&mut self, ok: bool, msg: impl Into<String>) {
        self.lines.push((ok, msg.into()));
    }

    pub fn passed(&self) -> bool {
        !self.lines.is_empty() && self.lines.iter().all(|(ok, _)| *ok)
    }
}
