//! End-to-end network: patch embedding, template fusion, gated encoder, head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{encode, predict, search_segment, Encoder, EncoderConfig, GateMode, Head, HeadOutput, HeadVars};
use crate::dfa::ActivationTrace;
use crate::dfb::{blend, CrossAttentionParams};
use crate::error::{Error, Result};
use crate::imaging::{Image, PixelNorm};
use crate::params::{Ctx, ParamStore};
use crate::patching::{slice_patches_var, PatchEmbedding, PatchGrid, PatchKind, Stream, TokenLayout};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub search_size: usize,
    pub template_size: usize,
    pub patch_size: usize,
    pub encoder: EncoderConfig,
    pub norm: PixelNorm,
    /// Seed for weight initialisation and the gate reduction vector.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            search_size: 64,
            template_size: 32,
            patch_size: 8,
            encoder: EncoderConfig::desk(),
            norm: PixelNorm::default(),
            seed: 0,
        }
    }

    /// Reference geometry: 256² search, 128² templates, 16-pixel patches.
    pub fn full_scale() -> Self {
        Self {
            search_size: 256,
            template_size: 128,
            patch_size: 16,
            encoder: EncoderConfig::full_scale(),
            ..Self::desk()
        }
    }

    pub fn search_grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.search_size, self.patch_size)
    }

    pub fn template_grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.template_size, self.patch_size)
    }

    pub fn layout(&self) -> Result<TokenLayout> {
        Ok(TokenLayout::for_grids(&self.search_grid()?, &self.template_grid()?))
    }

    pub fn validate(&self) -> Result<()> {
        self.search_grid()?;
        self.template_grid()?;
        self.encoder.validate()?;
        if !(self.norm.std > 0.0) {
            return Err(Error::Config("pixel normalisation std must be positive".into()));
        }
        Ok(())
    }
}

/// Normalised network inputs.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    pub search: Image<T>,
    pub static_template: Image<T>,
    pub dynamic_template: Image<T>,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub head: HeadVars,
    pub trace: ActivationTrace,
    pub joint_tokens: Var,
    pub encoded: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embedding: PatchEmbedding,
    pub dfb_initial: CrossAttentionParams,
    pub dfb_overlapped: CrossAttentionParams,
    pub encoder: Encoder,
    pub head: Head,
    pub layout: TokenLayout,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let search = config.search_grid()?;
        let template = config.template_grid()?;
        let layout = TokenLayout::for_grids(&search, &template);
        let d = config.encoder.width;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let embedding = PatchEmbedding::new(&mut store, search, template, d, &mut rng)?;
        let heads = config.encoder.heads;
        let dfb_initial = CrossAttentionParams::new(&mut store, "dfb.initial", d, heads, &mut rng)?;
        let dfb_overlapped = CrossAttentionParams::new(&mut store, "dfb.overlapped", d, heads, &mut rng)?;
        let reducer_seed = config.seed ^ 0x005e_ed0f_9a7e;
        let encoder = Encoder::new(&mut store, &config.encoder, layout.total(), reducer_seed, &mut rng)?;
        let head = Head::new(&mut store, d, search.initial_grid(), &mut rng);
        Ok(Self { config: config.clone(), store, embedding, dfb_initial, dfb_overlapped, encoder, head, layout })
    }

    pub fn num_tokens(&self) -> usize {
        self.layout.total()
    }

    pub fn grid(&self) -> usize {
        self.head.grid
    }

    /// Place an image into the graph as a `1 x (side*side*3)` row.
    pub fn image_var(ctx: &mut Ctx<'_, T>, image: &Image<T>, differentiable: bool) -> Var {
        let t = Tensor::row_vector(image.data.clone());
        if differentiable {
            ctx.g.param(t)
        } else {
            ctx.g.constant(t)
        }
    }

    fn check_side(image: Var, ctx: &Ctx<'_, T>, side: usize, what: &str) -> Result<()> {
        let n = ctx.g.value(image).len();
        if n != side * side * 3 {
            return Err(Error::shape(format!("{what} image has {n} values, expected {side}x{side}x3")));
        }
        Ok(())
    }

    /// Joint token sequence `[f_X; f_Xo; f_Z; f_Zo]` before encoding.
    pub fn tokens(&self, ctx: &mut Ctx<'_, T>, search: Var, static_t: Var, dynamic_t: Var) -> Result<Var> {
        Self::check_side(search, ctx, self.config.search_size, "search")?;
        Self::check_side(static_t, ctx, self.config.template_size, "static template")?;
        Self::check_side(dynamic_t, ctx, self.config.template_size, "dynamic template")?;
        let e = &self.embedding;
        let (sg, tg) = (e.search, e.template);

        let stream = |ctx: &mut Ctx<'_, T>, img: Var, grid: &PatchGrid, kind: PatchKind, s: Stream| {
            let p = slice_patches_var(ctx, img, grid, kind);
            e.embed(ctx, p, s)
        };
        let fx = stream(ctx, search, &sg, PatchKind::Initial, Stream::Search)?;
        let fxo = stream(ctx, search, &sg, PatchKind::Overlapped, Stream::SearchO)?;
        let fzs = stream(ctx, static_t, &tg, PatchKind::Initial, Stream::Static)?;
        let fzso = stream(ctx, static_t, &tg, PatchKind::Overlapped, Stream::StaticO)?;
        let fzd = stream(ctx, dynamic_t, &tg, PatchKind::Initial, Stream::Dynamic)?;
        let fzdo = stream(ctx, dynamic_t, &tg, PatchKind::Overlapped, Stream::DynamicO)?;

        let (fz, fzo) = if self.config.encoder.ablate_dfb {
            (ctx.g.concat_rows(&[fzs, fzd]), ctx.g.concat_rows(&[fzso, fzdo]))
        } else {
            (blend(ctx, &self.dfb_initial, fzs, fzd)?, blend(ctx, &self.dfb_overlapped, fzso, fzdo)?)
        };
        Ok(ctx.g.concat_rows(&[fx, fxo, fz, fzo]))
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx<'_, T>,
        search: Var,
        static_t: Var,
        dynamic_t: Var,
        mode: GateMode,
    ) -> Result<ForwardVars> {
        let joint = self.tokens(ctx, search, static_t, dynamic_t)?;
        let (encoded, trace) = encode(ctx, &self.encoder, joint, &self.layout, mode)?;
        let (off, len) = search_segment(&self.layout);
        let search_tokens = ctx.g.slice_rows(encoded, off, len);
        let head = predict(ctx, &self.head, search_tokens)?;
        Ok(ForwardVars { head, trace, joint_tokens: joint, encoded })
    }

    /// Inference with the configuration's gate mode and no gradient tracking.
    pub fn infer(&self, input: &ModelInput<T>) -> Result<(HeadOutput<T>, ActivationTrace)> {
        self.infer_with_mode(input, self.encoder.inference_mode())
    }

    pub fn infer_with_mode(&self, input: &ModelInput<T>, mode: GateMode) -> Result<(HeadOutput<T>, ActivationTrace)> {
        let mut ctx = Ctx::new(&self.store, false);
        let s = Self::image_var(&mut ctx, &input.search, false);
        let zs = Self::image_var(&mut ctx, &input.static_template, false);
        let zd = Self::image_var(&mut ctx, &input.dynamic_template, false);
        let f = self.forward(&mut ctx, s, zs, zd, mode)?;
        Ok((HeadOutput::from_vars(&ctx, &f.head), f.trace))
    }

    /// Same weights under a different encoder/ablation configuration.
    pub fn with_encoder_flags(&self, beta: f64, ablate_dfa: bool, ablate_dfb: bool) -> Self {
        let mut m = self.clone();
        m.config.encoder.beta = beta;
        m.config.encoder.ablate_dfa = ablate_dfa;
        m.config.encoder.ablate_dfb = ablate_dfb;
        m.encoder.config = m.config.encoder.clone();
        m
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for id in self.store.ids() {
            store.add(self.store.name(id), self.store.get(id).cast(), self.store.is_trainable(id));
        }
        Model {
            config: self.config.clone(),
            store,
            embedding: self.embedding.clone(),
            dfb_initial: self.dfb_initial.clone(),
            dfb_overlapped: self.dfb_overlapped.clone(),
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            layout: self.layout.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(cfg: &ModelConfig, seed: usize) -> ModelInput<f64> {
        let img = |side: usize, k: usize| {
            Image::from_fn(side, side, |x, y, c| (((x * 13 + y * 7 + c * 3 + k) % 17) as f64 - 8.0) / 8.0)
        };
        ModelInput {
            search: img(cfg.search_size, seed),
            static_template: img(cfg.template_size, seed + 1),
            dynamic_template: img(cfg.template_size, seed + 2),
        }
    }

    #[test]
    fn desk_forward_shapes() {
        let cfg = ModelConfig::desk();
        let m = Model::<f64>::new(&cfg).unwrap();
        assert_eq!(m.num_tokens(), 64 + 49 + 32 + 18);
        let (out, trace) = m.infer(&input(&cfg, 0)).unwrap();
        assert_eq!(out.score.len(), 64);
        assert_eq!(out.offset.len(), 64);
        assert!((out.score.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // zero-initialised gates give p = 0.5 > 0.3
        assert_eq!(trace.executed_count(), 4);
        assert!(trace.records[1..].iter().all(|r| r.probability == Some(0.5)));
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let cfg = ModelConfig::desk();
        let m = Model::<f64>::new(&cfg).unwrap();
        let mut bad = input(&cfg, 0);
        bad.search = Image::zeros(32, 32);
        assert!(matches!(m.infer(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn construction_is_seeded() {
        let a = Model::<f32>::new(&ModelConfig::desk()).unwrap();
        let b = Model::<f32>::new(&ModelConfig::desk()).unwrap();
        let c = Model::<f32>::new(&ModelConfig { seed: 1, ..ModelConfig::desk() }).unwrap();
        let id = a.store.find("encoder.block1.qkv.weight").unwrap();
        assert_eq!(a.store.get(id), b.store.get(id));
        assert_ne!(a.store.get(id), c.store.get(id));
    }
}
