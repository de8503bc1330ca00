//! Initial and overlapped patch grids, the joint token layout, and patch embedding.
//!
//! An image of side `G * patch` yields `G²` initial patches tiling it and
//! `(G-1)²` overlapped patches of the same size shifted by half a patch, so
//! every overlapped patch straddles the corner shared by four initial ones.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::params::{normal_tensor, Ctx, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_side: usize,
    pub patch_side: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchKind {
    Initial,
    Overlapped,
}

impl PatchGrid {
    pub fn new(image_side: usize, patch_side: usize) -> Result<Self> {
        if patch_side < 2 || !patch_side.is_multiple_of(2) {
            return Err(Error::Config(format!("patch side must be even and >= 2, got {patch_side}")));
        }
        if image_side == 0 || !image_side.is_multiple_of(patch_side) || image_side / patch_side < 2 {
            return Err(Error::Config(format!(
                "image side {image_side} must be a multiple (>= 2x) of patch side {patch_side}"
            )));
        }
        Ok(Self { image_side, patch_side })
    }

    /// `G`: initial patches per row.
    pub fn initial_grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// `G - 1`: overlapped patches per row.
    pub fn o_grid(&self) -> usize {
        self.initial_grid() - 1
    }

    pub fn o_offset(&self) -> usize {
        self.patch_side / 2
    }

    pub fn count(&self, kind: PatchKind) -> usize {
        match kind {
            PatchKind::Initial => self.initial_grid().pow(2),
            PatchKind::Overlapped => self.o_grid().pow(2),
        }
    }

    /// Flattened pixel length of one RGB patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * 3
    }

    /// Top-left pixel of patch `(row, col)`.
    pub fn patch_origin(&self, kind: PatchKind, row: usize, col: usize) -> (usize, usize) {
        let off = match kind {
            PatchKind::Initial => 0,
            PatchKind::Overlapped => self.o_offset(),
        };
        (off + col * self.patch_side, off + row * self.patch_side)
    }

    /// Flat indices into an interleaved RGB image buffer, one row per patch in
    /// row-major patch order, pixels row-major then channel within each patch.
    pub fn gather_index(&self, kind: PatchKind) -> Vec<usize> {
        let n = match kind {
            PatchKind::Initial => self.initial_grid(),
            PatchKind::Overlapped => self.o_grid(),
        };
        let p = self.patch_side;
        let mut idx = Vec::with_capacity(n * n * self.patch_dim());
        for r in 0..n {
            for c in 0..n {
                let (x0, y0) = self.patch_origin(kind, r, c);
                for dy in 0..p {
                    for dx in 0..p {
                        let base = ((y0 + dy) * self.image_side + x0 + dx) * 3;
                        idx.extend([base, base + 1, base + 2]);
                    }
                }
            }
        }
        idx
    }
}

/// Slice an image into flattened patches, one row each.
pub fn slice_patches<T: Scalar>(image: &Image<T>, grid: &PatchGrid, kind: PatchKind) -> Result<Tensor<T>> {
    check_image(image, grid)?;
    let data = grid.gather_index(kind).into_iter().map(|i| image.data[i]).collect();
    Tensor::from_vec(grid.count(kind), grid.patch_dim(), data)
}

fn check_image<T>(image: &Image<T>, grid: &PatchGrid) -> Result<()> {
    if image.width != grid.image_side
        || image.height != grid.image_side
        || image.data.len() != grid.image_side.pow(2) * 3
    {
        return Err(Error::shape(format!(
            "image {}x{} does not match patch grid side {}",
            image.width, image.height, grid.image_side
        )));
    }
    Ok(())
}

/// In-graph counterpart of [`slice_patches`] over a `1 x (side*side*3)` image variable.
pub fn slice_patches_var<T: Scalar>(ctx: &mut Ctx<'_, T>, image: Var, grid: &PatchGrid, kind: PatchKind) -> Var {
    ctx.g.gather(image, grid.gather_index(kind), grid.count(kind), grid.patch_dim())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentName {
    SearchInitial,
    SearchO,
    TemplateFused,
    TemplateOFused,
}

impl SegmentName {
    pub const ORDER: [SegmentName; 4] = [Self::SearchInitial, Self::SearchO, Self::TemplateFused, Self::TemplateOFused];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: SegmentName,
    pub offset: usize,
    pub len: usize,
}

/// Segment layout of the joint token sequence `[f_X; f_Xo; f_Z; f_Zo]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    segments: Vec<Segment>,
}

impl TokenLayout {
    /// Layout for the given search and template grids; fused template segments
    /// carry two streams each.
    pub fn for_grids(search: &PatchGrid, template: &PatchGrid) -> Self {
        let lens = [
            search.count(PatchKind::Initial),
            search.count(PatchKind::Overlapped),
            2 * template.count(PatchKind::Initial),
            2 * template.count(PatchKind::Overlapped),
        ];
        Self::from_lengths(lens)
    }

    pub fn from_lengths(lens: [usize; 4]) -> Self {
        let mut offset = 0;
        let segments = SegmentName::ORDER
            .iter()
            .zip(lens)
            .map(|(&name, len)| {
                let s = Segment { name, offset, len };
                offset += len;
                s
            })
            .collect();
        Self { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: SegmentName) -> Segment {
        *self.segments.iter().find(|s| s.name == name).expect("all segments present")
    }

    /// Total token count `k`.
    pub fn total(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }
}

/// An ordered token matrix (`k x d`) with its segment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet<T> {
    pub tokens: Tensor<T>,
    pub layout: TokenLayout,
}

impl<T: Scalar> TokenSet<T> {
    pub fn new(tokens: Tensor<T>, layout: TokenLayout) -> Result<Self> {
        if tokens.rows() != layout.total() {
            return Err(Error::shape(format!("{} tokens do not match layout total {}", tokens.rows(), layout.total())));
        }
        Ok(Self { tokens, layout })
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn segment_tokens(&self, name: SegmentName) -> Tensor<T> {
        let s = self.layout.segment(name);
        self.tokens.slice_rows(s.offset, s.len)
    }
}

/// Streams that receive their own positional embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Search,
    SearchO,
    Static,
    StaticO,
    Dynamic,
    DynamicO,
}

/// Shared linear patch projection plus one positional table per stream.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    pub projection: Linear,
    pub positional: [ParamId; 6],
    pub search: PatchGrid,
    pub template: PatchGrid,
}

impl PatchEmbedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        search: PatchGrid,
        template: PatchGrid,
        width: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        if search.patch_side != template.patch_side {
            return Err(Error::Config("search and template must share the patch size".into()));
        }
        let projection = Linear::new(store, "embed.proj", search.patch_dim(), width, rng);
        let tables = [
            ("embed.pos.search", search.count(PatchKind::Initial)),
            ("embed.pos.search_o", search.count(PatchKind::Overlapped)),
            ("embed.pos.static", template.count(PatchKind::Initial)),
            ("embed.pos.static_o", template.count(PatchKind::Overlapped)),
            ("embed.pos.dynamic", template.count(PatchKind::Initial)),
            ("embed.pos.dynamic_o", template.count(PatchKind::Overlapped)),
        ];
        let positional = tables.map(|(name, n)| store.add(name, normal_tensor(rng, n, width, 0.02), true));
        Ok(Self { projection, positional, search, template })
    }

    pub fn positional_for(&self, stream: Stream) -> ParamId {
        self.positional[stream as usize]
    }

    /// Project flattened patches and add the stream's positional table.
    pub fn embed<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, patches: Var, stream: Stream) -> Result<Var> {
        let pos = ctx.p(self.positional_for(stream));
        let w = ctx.p(self.projection.weight);
        let (n, dim) = ctx.g.value(patches).shape();
        if dim != ctx.g.value(w).rows() {
            return Err(Error::shape(format!(
                "patch length {dim} does not match projection input {}",
                ctx.g.value(w).rows()
            )));
        }
        if n != ctx.g.value(pos).rows() {
            return Err(Error::shape(format!("{n} patches for a positional table of {}", ctx.g.value(pos).rows())));
        }
        let x = self.projection.forward(ctx, patches);
        Ok(ctx.g.add(x, pos))
    }
}

/// Value-level embedding of one segment.
pub fn embed<T: Scalar>(
    store: &ParamStore<T>,
    embedding: &PatchEmbedding,
    patches: &Tensor<T>,
    stream: Stream,
) -> Result<Tensor<T>> {
    let mut ctx = Ctx::new(store, false);
    let p = ctx.g.constant(patches.clone());
    let out = embedding.embed(&mut ctx, p, stream)?;
    Ok(ctx.g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(side: usize) -> Image<f64> {
        Image::from_fn(side, side, |x, y, c| (y * side * 3 + x * 3 + c) as f64)
    }

    #[test]
    fn patch_counts_match_reference_grids() {
        let full_search = PatchGrid::new(256, 16).unwrap();
        assert_eq!(full_search.count(PatchKind::Initial), 256);
        assert_eq!(full_search.count(PatchKind::Overlapped), 225);
        let full_template = PatchGrid::new(128, 16).unwrap();
        assert_eq!(full_template.count(PatchKind::Initial), 64);
        assert_eq!(full_template.count(PatchKind::Overlapped), 49);
        let img = ramp(128);
        assert_eq!(slice_patches(&img, &full_template, PatchKind::Overlapped).unwrap().rows(), 49);
    }

    #[test]
    fn counts_hold_for_every_admissible_grid() {
        for p in [2, 4, 8, 16] {
            for g in 2..10 {
                let grid = PatchGrid::new(g * p, p).unwrap();
                assert_eq!(grid.count(PatchKind::Initial), g * g);
                assert_eq!(grid.count(PatchKind::Overlapped), (g - 1) * (g - 1));
            }
        }
    }

    #[test]
    fn size_mismatch_is_a_shape_error() {
        let grid = PatchGrid::new(32, 8).unwrap();
        assert!(matches!(slice_patches(&ramp(24), &grid, PatchKind::Initial), Err(Error::Shape(_))));
        assert!(PatchGrid::new(30, 8).is_err());
    }

    #[test]
    fn initial_patches_tile_losslessly() {
        let grid = PatchGrid::new(32, 8).unwrap();
        let img = ramp(32);
        let patches = slice_patches(&img, &grid, PatchKind::Initial).unwrap();
        let mut rebuilt = Image::<f64>::zeros(32, 32);
        let g = grid.initial_grid();
        for pr in 0..g {
            for pc in 0..g {
                let row = patches.row(pr * g + pc);
                for dy in 0..8 {
                    for dx in 0..8 {
                        for c in 0..3 {
                            let (x, y) = (pc * 8 + dx, pr * 8 + dy);
                            rebuilt.data[(y * 32 + x) * 3 + c] = row[(dy * 8 + dx) * 3 + c];
                        }
                    }
                }
            }
        }
        assert_eq!(rebuilt, img);
    }

    #[test]
    fn overlapped_patch_straddles_four_initial_patches() {
        let grid = PatchGrid::new(64, 8).unwrap();
        let p = grid.patch_side;
        for r in 0..grid.o_grid() {
            for c in 0..grid.o_grid() {
                let (x0, y0) = grid.patch_origin(PatchKind::Overlapped, r, c);
                let mut hits = 0;
                for ir in 0..grid.initial_grid() {
                    for ic in 0..grid.initial_grid() {
                        let (ix, iy) = grid.patch_origin(PatchKind::Initial, ir, ic);
                        let ox = (x0 + p).min(ix + p) as isize - x0.max(ix) as isize;
                        let oy = (y0 + p).min(iy + p) as isize - y0.max(iy) as isize;
                        if ox > 0 && oy > 0 {
                            hits += 1;
                        }
                    }
                }
                assert_eq!(hits, 4);
            }
        }
    }

    fn embedding(width: usize) -> (ParamStore<f64>, PatchEmbedding) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = PatchEmbedding::new(
            &mut store,
            PatchGrid::new(64, 8).unwrap(),
            PatchGrid::new(32, 8).unwrap(),
            width,
            &mut rng,
        )
        .unwrap();
        (store, e)
    }

    #[test]
    fn zero_inputs_embed_to_zero() {
        let (mut store, e) = embedding(16);
        let pos = e.positional_for(Stream::SearchO);
        store.assign(pos, Tensor::zeros(49, 16)).unwrap();
        let out = embed(&store, &e, &Tensor::zeros(49, 192), Stream::SearchO).unwrap();
        assert_eq!(out.shape(), (49, 16));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_shapes_and_determinism() {
        let (store, e) = embedding(32);
        let img = Image::from_fn(64, 64, |x, y, c| ((x * 31 + y * 17 + c) % 13) as f64 / 13.0);
        let grid = PatchGrid::new(64, 8).unwrap();
        let patches = slice_patches(&img, &grid, PatchKind::Overlapped).unwrap();
        let a = embed(&store, &e, &patches, Stream::SearchO).unwrap();
        let b = embed(&store, &e, &patches, Stream::SearchO).unwrap();
        assert_eq!(a.shape(), (49, 32));
        assert_eq!(a, b);
        assert!(embed(&store, &e, &patches, Stream::Search).is_err());
        assert!(embed(&store, &e, &Tensor::zeros(49, 100), Stream::SearchO).is_err());
    }

    #[test]
    fn positional_tables_break_permutation_equivariance() {
        let (mut store, e) = embedding(8);
        let mut patches = Tensor::<f64>::zeros(16, 192);
        for (i, v) in patches.data_mut().iter_mut().enumerate() {
            *v = ((i * 7919) % 101) as f64 / 101.0;
        }
        let mut swapped = patches.clone();
        for c in 0..192 {
            swapped.set(0, c, patches.get(1, c));
            swapped.set(1, c, patches.get(0, c));
        }
        let a = embed(&store, &e, &patches, Stream::Static).unwrap();
        let b = embed(&store, &e, &swapped, Stream::Static).unwrap();
        assert_ne!(a.row(0), b.row(1));
        // without positional information the projection simply permutes rows
        store.assign(e.positional_for(Stream::Static), Tensor::zeros(16, 8)).unwrap();
        let a = embed(&store, &e, &patches, Stream::Static).unwrap();
        let b = embed(&store, &e, &swapped, Stream::Static).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
    }

    #[test]
    fn layout_order_and_totals() {
        let l = TokenLayout::for_grids(&PatchGrid::new(256, 16).unwrap(), &PatchGrid::new(128, 16).unwrap());
        let lens: Vec<usize> = l.segments().iter().map(|s| s.len).collect();
        assert_eq!(lens, vec![256, 225, 128, 98]);
        assert_eq!(l.total(), 707);
        assert_eq!(l.segment(SegmentName::TemplateOFused).offset, 609);
    }
}
