//! Gated single-stream encoder and the centre-style prediction head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::dfa::{decide, gate_probability, ActivationTrace, Decision, GateParams, LayerRecord, TokenReducer};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::params::{multi_head_attention, uniform_tensor, Ctx, LayerNorm, Linear, ParamId, ParamStore};
use crate::patching::{SegmentName, TokenLayout};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub beta: f64,
    pub ablate_dfa: bool,
    pub ablate_dfb: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self { depth: 4, width: 32, heads: 2, mlp_ratio: 4, beta: 0.3, ablate_dfa: false, ablate_dfb: false }
    }

    /// ViT-Base scale; the exact reference depth and width are approximate.
    pub fn full_scale() -> Self {
        Self { depth: 12, width: 768, heads: 12, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// How layers `2..L` are gated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Inference: run the layer iff `p > β`.
    Hard,
    /// Training: always run, scale the layer's residual update by `p`.
    Soft,
    /// No gates evaluated; every layer runs.
    Off,
}

/// Pre-norm transformer block: attention then GELU MLP, both residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.width;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, rng),
            proj: Linear::new(store, &format!("{name}.proj"), d, d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            fc1: Linear::new(store, &format!("{name}.fc1"), d, cfg.mlp_ratio * d, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.mlp_ratio * d, d, rng),
            heads: cfg.heads,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let d = ctx.g.value(x).cols();
        let h = self.norm1.forward(ctx, x);
        let qkv = self.qkv.forward(ctx, h);
        let q = ctx.g.slice_cols(qkv, 0, d);
        let k = ctx.g.slice_cols(qkv, d, d);
        let v = ctx.g.slice_cols(qkv, 2 * d, d);
        let att = multi_head_attention(ctx, q, k, v, self.heads);
        let att = self.proj.forward(ctx, att);
        let x = ctx.g.add(x, att);
        let h = self.norm2.forward(ctx, x);
        let h = self.fc1.forward(ctx, h);
        let h = ctx.g.gelu(h);
        let h = self.fc2.forward(ctx, h);
        ctx.g.add(x, h)
    }
}

/// Encoder blocks, their gates (one per layer after the first) and the shared reducer.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub blocks: Vec<Block>,
    pub gates: Vec<GateParams>,
    pub reducer: TokenReducer,
    pub final_norm: LayerNorm,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &EncoderConfig,
        tokens: usize,
        seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let blocks =
            (0..config.depth).map(|i| Block::new(store, &format!("encoder.block{}", i + 1), config, rng)).collect();
        let gates =
            (1..config.depth).map(|i| GateParams::zeros(store, &format!("dfa.gate{}", i + 1), config.width)).collect();
        let reducer = TokenReducer::new(store, tokens, seed);
        let final_norm = LayerNorm::new(store, "encoder.norm", config.width);
        Ok(Self { config: config.clone(), blocks, gates, reducer, final_norm })
    }

    /// Gate mode used at inference for this configuration.
    pub fn inference_mode(&self) -> GateMode {
        if self.config.ablate_dfa {
            GateMode::Off
        } else {
            GateMode::Hard
        }
    }

    /// Gate mode used during training for this configuration.
    pub fn training_mode(&self) -> GateMode {
        if self.config.ablate_dfa {
            GateMode::Off
        } else {
            GateMode::Soft
        }
    }
}

/// Run the encoder over the joint token sequence.
pub fn encode<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    encoder: &Encoder,
    tokens: Var,
    layout: &TokenLayout,
    mode: GateMode,
) -> Result<(Var, ActivationTrace)> {
    let (k, d) = ctx.g.value(tokens).shape();
    if k != layout.total() || k != encoder.reducer.tokens {
        return Err(Error::shape(format!(
            "encoder built for {} tokens, layout has {}, input has {k}",
            encoder.reducer.tokens,
            layout.total()
        )));
    }
    if d != encoder.config.width {
        return Err(Error::shape(format!("token width {d}, encoder width {}", encoder.config.width)));
    }
    if encoder.gates.len() + 1 != encoder.blocks.len() {
        return Err(Error::shape("gate count must be depth - 1".to_string()));
    }
    let beta = lit::<T>(encoder.config.beta);
    let mut trace = ActivationTrace::default();
    let mut x = encoder.blocks[0].forward(ctx, tokens);
    trace.push(LayerRecord { layer: 1, probability: None, executed: true });

    for (i, (block, gate)) in encoder.blocks[1..].iter().zip(&encoder.gates).enumerate() {
        let layer = i + 2;
        match mode {
            GateMode::Off => {
                x = block.forward(ctx, x);
                trace.push(LayerRecord { layer, probability: None, executed: true });
            }
            GateMode::Hard => {
                let p = gate_probability(ctx, &encoder.reducer, gate, x)?;
                let pv = ctx.g.scalar(p);
                let executed = decide(pv, beta) == Decision::Execute;
                if executed {
                    x = block.forward(ctx, x);
                }
                trace.push(LayerRecord { layer, probability: Some(pv.as_f64()), executed });
            }
            GateMode::Soft => {
                let p = gate_probability(ctx, &encoder.reducer, gate, x)?;
                let pv = ctx.g.scalar(p);
                let y = block.forward(ctx, x);
                let delta = ctx.g.sub(y, x);
                let delta = ctx.g.scale_by(delta, p);
                x = ctx.g.add(x, delta);
                trace.push(LayerRecord { layer, probability: Some(pv.as_f64()), executed: true });
            }
        }
    }
    let out = encoder.final_norm.forward(ctx, x);
    Ok((out, trace))
}

/// 3x3 convolution (no bias), per-channel normalisation over cells, learned affine, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ConvBnRelu {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (cin * 9 + cout) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), uniform_tensor(rng, cin * 9, cout, limit), true),
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, cout, T::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, cout), true),
        }
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, grid: usize) -> Var {
        let cols = ctx.g.im2col(x, grid, grid, 3, 3);
        let w = ctx.p(self.weight);
        let y = ctx.g.matmul(cols, w);
        let y = ctx.g.norm_cols(y);
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        let y = ctx.g.mul_row(y, gamma);
        let y = ctx.g.add_row(y, beta);
        ctx.g.relu(y)
    }
}

/// Number of Conv-BN-ReLU stages in the head.
pub const HEAD_STAGES: usize = 4;

#[derive(Clone, Debug)]
pub struct Head {
    pub stages: Vec<ConvBnRelu>,
    pub score: Linear,
    pub offset: Linear,
    pub size: Linear,
    pub grid: usize,
    pub width: usize,
}

/// Initial normalised size output: a target of side `sqrt(w h)` fills a
/// quarter of a search crop cut with area factor 4.
pub const SIZE_PRIOR: f64 = 0.25;

/// Channel widths of the four head stages for token width `d`.
pub fn head_channels(d: usize) -> [usize; HEAD_STAGES] {
    [d, (d / 2).max(8), (d / 4).max(8), (d / 4).max(8)]
}

impl Head {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, width: usize, grid: usize, rng: &mut ChaCha8Rng) -> Self {
        let chans = head_channels(width);
        let mut cin = width;
        let stages = chans
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let s = ConvBnRelu::new(store, &format!("head.stage{}", i + 1), cin, cout, rng);
                cin = cout;
                s
            })
            .collect();
        let size = Linear::new(store, "head.size", cin, 2, rng);
        let logit = (SIZE_PRIOR / (1.0 - SIZE_PRIOR)).ln();
        *store.get_mut(size.bias) = Tensor::filled(1, 2, T::lit(logit));
        Self {
            stages,
            score: Linear::new(store, "head.score", cin, 1, rng),
            offset: Linear::new(store, "head.offset", cin, 2, rng),
            size,
            grid,
            width,
        }
    }
}

/// Head outputs as graph variables.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `1 x G²` raw classification logits.
    pub logits: Var,
    /// `1 x G²` log-probabilities (log-softmax of `logits`).
    pub log_score: Var,
    /// `G² x 2` offsets in `(0, 1)`.
    pub offset: Var,
    /// `G² x 2` normalised sizes in `(0, 1)`.
    pub size: Var,
}

/// Map the `G²` search-initial tokens to score, offset and size maps.
pub fn predict<T: Scalar>(ctx: &mut Ctx<'_, T>, head: &Head, search_tokens: Var) -> Result<HeadVars> {
    let (n, d) = ctx.g.value(search_tokens).shape();
    if n != head.grid * head.grid || d != head.width {
        return Err(Error::shape(format!("head expects {}x{} tokens, got {n}x{d}", head.grid * head.grid, head.width)));
    }
    let mut x = search_tokens;
    for stage in &head.stages {
        x = stage.forward(ctx, x, head.grid);
    }
    let logits = head.score.forward(ctx, x);
    let logits = ctx.g.reshape(logits, 1, n);
    let log_score = ctx.g.log_softmax_rows(logits);
    let offset = head.offset.forward(ctx, x);
    let offset = ctx.g.sigmoid(offset);
    let size = head.size.forward(ctx, x);
    let size = ctx.g.sigmoid(size);
    Ok(HeadVars { logits, log_score, offset, size })
}

/// Value-level head output over a `G x G` grid, cells row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    pub grid: usize,
    /// `G²` probabilities summing to one.
    pub score: Vec<T>,
    /// `G²` `(x, y)` offsets within the cell.
    pub offset: Vec<[T; 2]>,
    /// `G²` `(w, h)` sizes as fractions of the search side.
    pub size: Vec<[T; 2]>,
}

impl<T: Scalar> HeadOutput<T> {
    pub fn from_vars(ctx: &Ctx<'_, T>, vars: &HeadVars) -> Self {
        let score: Vec<T> = ctx.g.value(vars.log_score).data().iter().map(|v| v.exp()).collect();
        let pairs = |t: &Tensor<T>| t.data().chunks(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>();
        let grid = (score.len() as f64).sqrt().round() as usize;
        Self { grid, score, offset: pairs(ctx.g.value(vars.offset)), size: pairs(ctx.g.value(vars.size)) }
    }

    pub fn cell(&self, row: usize, col: usize) -> usize {
        row * self.grid + col
    }

    /// Index of the highest score, first in row-major order on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.score.iter().enumerate().skip(1) {
            if s > self.score[best] {
                best = i;
            }
        }
        best
    }

    /// Box implied by the offset and size maps at `cell`, in search-crop pixels.
    pub fn box_at(&self, cell: usize, search_size: T) -> BBox<T> {
        let g = T::from_usize_lossy(self.grid);
        let (row, col) = (cell / self.grid, cell % self.grid);
        let cx = (T::from_usize_lossy(col) + self.offset[cell][0]) / g * search_size;
        let cy = (T::from_usize_lossy(row) + self.offset[cell][1]) / g * search_size;
        let w = self.size[cell][0] * search_size;
        let h = self.size[cell][1] * search_size;
        let half = lit::<T>(0.5);
        BBox::new_unchecked(cx - half * w, cy - half * h, w, h)
    }
}

/// Decode the box at the highest-scoring cell plus its score.
pub fn decode_box<T: Scalar>(out: &HeadOutput<T>, search_size: T) -> (BBox<T>, T) {
    let cell = out.argmax();
    (out.box_at(cell, search_size), out.score[cell])
}

/// Token range the head consumes.
pub fn search_segment(layout: &TokenLayout) -> (usize, usize) {
    let s = layout.segment(SegmentName::SearchInitial);
    (s.offset, s.len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(grid: usize, cell: usize) -> HeadOutput<f64> {
        let mut score = vec![0.0; grid * grid];
        score[cell] = 1.0;
        HeadOutput { grid, score, offset: vec![[0.5, 0.5]; grid * grid], size: vec![[0.25, 0.25]; grid * grid] }
    }

    #[test]
    fn decode_one_hot_cell() {
        let out = one_hot(16, 0);
        let (b, conf) = decode_box(&out, 256.0);
        assert_eq!(b.center(), (8.0, 8.0));
        assert_eq!((b.x, b.y, b.w, b.h), (-24.0, -24.0, 64.0, 64.0));
        assert_eq!(conf, 1.0);
    }

    #[test]
    fn uniform_scores_pick_first_cell() {
        let mut out = one_hot(8, 5);
        out.score = vec![1.0 / 64.0; 64];
        assert_eq!(out.argmax(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::desk().validate().is_ok());
        assert!(EncoderConfig { heads: 3, ..EncoderConfig::desk() }.validate().is_err());
        assert!(EncoderConfig { beta: 1.5, ..EncoderConfig::desk() }.validate().is_err());
        assert!(EncoderConfig { depth: 0, ..EncoderConfig::desk() }.validate().is_err());
    }
}
