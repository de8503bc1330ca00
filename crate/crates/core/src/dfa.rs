//! Per-layer activation gates.
//!
//! For layer `i >= 2` the previous layer's tokens `t (k x d)` are reduced by a
//! frozen standard-normal vector `v (k)` to `r = vᵀ t`, and the gate emits
//! `p = ½ (tanh(L(r) + Conv(r)) + 1)` where `L` is affine `d -> 1` and `Conv`
//! is a kernel-3 convolution along the feature axis, mean-pooled to a scalar.
//! The layer runs iff `p > β`. Layer 1 has no gate and always runs.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{normal_tensor, Ctx, Linear, ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Kernel length of the gate convolution.
pub const GATE_KERNEL: usize = 3;

/// Learned part of one gate. The reduction vector is shared (see [`TokenReducer`]).
#[derive(Clone, Debug)]
pub struct GateParams {
    pub linear: Linear,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
}

impl GateParams {
    /// Zero-initialised gate: `p = 0.5` for every input.
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            linear: Linear::zeros(store, &format!("{name}.linear"), width, 1),
            conv_weight: store.add(format!("{name}.conv.weight"), Tensor::zeros(GATE_KERNEL, 1), true),
            conv_bias: store.add(format!("{name}.conv.bias"), Tensor::zeros(1, 1), true),
        }
    }
}

/// The frozen token-weighting vector `v`, drawn once from N(0, 1).
#[derive(Clone, Copy, Debug)]
pub struct TokenReducer {
    pub weights: ParamId,
    pub tokens: usize,
}

impl TokenReducer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, tokens: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = store.add("dfa.v", normal_tensor(&mut rng, 1, tokens, 1.0), false);
        Self { weights, tokens }
    }
}

/// In-graph gate probability, a 1x1 variable.
pub fn gate_probability<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    reducer: &TokenReducer,
    gate: &GateParams,
    prev_tokens: Var,
) -> Result<Var> {
    let (k, d) = ctx.g.value(prev_tokens).shape();
    if k != reducer.tokens {
        return Err(Error::shape(format!("gate expects {} tokens, got {k}", reducer.tokens)));
    }
    let v = ctx.p(reducer.weights);
    let r = ctx.g.matmul(v, prev_tokens);
    let lin = gate.linear.forward(ctx, r);

    let column = ctx.g.transpose(r);
    let windows = ctx.g.im2col(column, 1, d, 1, GATE_KERNEL);
    let cw = ctx.p(gate.conv_weight);
    let cb = ctx.p(gate.conv_bias);
    let conv = ctx.g.matmul(windows, cw);
    let conv = ctx.g.add_row(conv, cb);
    let conv = ctx.g.mean(conv);

    let z = ctx.g.add(lin, conv);
    let t = ctx.g.tanh(z);
    let t = ctx.g.add_scalar(t, T::one());
    let p = ctx.g.scale(t, lit(0.5));
    // tanh saturates to exactly +-1 in floating point; keep p strictly inside (0, 1).
    let eps = T::epsilon();
    Ok(ctx.g.clamp(p, eps, T::one() - eps))
}

/// Value-level gate probability.
pub fn gate_probability_value<T: Scalar>(
    store: &ParamStore<T>,
    reducer: &TokenReducer,
    gate: &GateParams,
    prev_tokens: &Tensor<T>,
) -> Result<T> {
    let mut ctx = Ctx::new(store, false);
    let t = ctx.g.constant(prev_tokens.clone());
    let p = gate_probability(&mut ctx, reducer, gate, t)?;
    Ok(ctx.g.scalar(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Execute,
    Skip,
}

/// Execute iff `p > beta` (strict).
pub fn decide<T: Scalar>(p: T, beta: T) -> Decision {
    if p > beta {
        Decision::Execute
    } else {
        Decision::Skip
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    /// 1-based layer index.
    pub layer: usize,
    /// Gate probability; `None` for the ungated first layer or when gating is disabled.
    pub probability: Option<f64>,
    pub executed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub records: Vec<LayerRecord>,
}

impl ActivationTrace {
    pub fn push(&mut self, record: LayerRecord) {
        self.records.push(record);
    }

    pub fn executed_count(&self) -> usize {
        self.records.iter().filter(|r| r.executed).count()
    }

    pub fn depth(&self) -> usize {
        self.records.len()
    }

    /// One `frame_idx,layer_idx,p,executed` line per layer. `p` is `-` for
    /// ungated layers, `executed` is `1` or `0`.
    pub fn to_lines(&self, frame_idx: usize) -> String {
        let mut s = String::new();
        for r in &self.records {
            let p = r.probability.map_or_else(|| "-".to_string(), |p| p.to_string());
            let _ = writeln!(s, "{frame_idx},{},{p},{}", r.layer, u8::from(r.executed));
        }
        s
    }

    /// Parse a trace file back into `(frame_idx, trace)` pairs, grouping
    /// consecutive lines with the same frame index.
    pub fn parse_file(text: &str, origin: &str) -> Result<Vec<(usize, ActivationTrace)>> {
        let mut out: Vec<(usize, ActivationTrace)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { path: origin.to_string(), line: i + 1, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", f.len())));
            }
            let frame: usize = f[0].parse().map_err(|_| err(format!("bad frame index {:?}", f[0])))?;
            let layer: usize = f[1].parse().map_err(|_| err(format!("bad layer index {:?}", f[1])))?;
            let probability = match f[2] {
                "-" => None,
                raw => {
                    let p: f64 = raw.parse().map_err(|_| err(format!("bad probability {raw:?}")))?;
                    if !(0.0..=1.0).contains(&p) {
                        return Err(err(format!("probability {p} outside [0, 1]")));
                    }
                    Some(p)
                }
            };
            let executed = match f[3] {
                "1" => true,
                "0" => false,
                raw => return Err(err(format!("executed flag must be 0 or 1, got {raw:?}"))),
            };
            let record = LayerRecord { layer, probability, executed };
            match out.last_mut() {
                Some((fi, t)) if *fi == frame => t.push(record),
                _ => out.push((frame, ActivationTrace { records: vec![record] })),
            }
        }
        Ok(out)
    }
}
