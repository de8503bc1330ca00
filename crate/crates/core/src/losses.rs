//! Training objective: weighted cell cross-entropy plus SIoU at the target cell.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{HeadOutput, HeadVars};
use crate::error::{Error, Result};
use crate::geometry::{siou_loss_with_grad, BBox};
use crate::params::Ctx;
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Cross-entropy weight.
    pub lambda1: f64,
    /// SIoU weight.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 2.0, lambda2: 2.0 }
    }
}

/// `-ln p(cell)` for a normalised `grid x grid` score map.
pub fn ce_loss<T: Scalar>(score: &[T], grid: usize, cell: (usize, usize)) -> Result<T> {
    if score.len() != grid * grid {
        return Err(Error::shape(format!("score map has {} cells, expected {}", score.len(), grid * grid)));
    }
    if cell.0 >= grid || cell.1 >= grid {
        return Err(Error::Index(format!("cell {cell:?} outside {grid}x{grid} grid")));
    }
    Ok(-score[cell.0 * grid + cell.1].ln())
}

/// Grid cell `(row, col)` containing the box centre, or a rejection if the
/// centre lies outside the search region.
pub fn target_cell<T: Scalar>(gt: &BBox<T>, search_size: T, grid: usize) -> Result<(usize, usize)> {
    let (cx, cy) = gt.center();
    let inside = |v: T| v >= T::zero() && v < search_size;
    if !inside(cx) || !inside(cy) {
        return Err(Error::SampleRejected(format!(
            "target centre ({cx}, {cy}) outside search region of side {search_size}"
        )));
    }
    let g = T::from_usize_lossy(grid);
    let to_cell = |v: T| ((v / search_size * g).floor().to_usize().unwrap_or(0)).min(grid - 1);
    Ok((to_cell(cy), to_cell(cx)))
}

/// Loss components and gradients with respect to the head maps.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub total: T,
    pub ce: T,
    pub siou: T,
    pub cell: (usize, usize),
    pub grad_score: Vec<T>,
    pub grad_offset: Vec<[T; 2]>,
    pub grad_size: Vec<[T; 2]>,
}

/// `λ₁ · CE + λ₂ · SIoU` with the regression term evaluated at the target cell.
pub fn total_loss<T: Scalar>(
    out: &HeadOutput<T>,
    gt_in_search: &BBox<T>,
    search_size: T,
    weights: &LossWeights,
) -> Result<LossOutput<T>> {
    gt_in_search.validate()?;
    let grid = out.grid;
    let cell = target_cell(gt_in_search, search_size, grid)?;
    let idx = out.cell(cell.0, cell.1);
    let ce = ce_loss(&out.score, grid, cell)?;
    let pred = out.box_at(idx, search_size);
    let (siou, g) = siou_loss_with_grad(&pred, gt_in_search);
    let (l1, l2) = (lit::<T>(weights.lambda1), lit::<T>(weights.lambda2));

    let n = grid * grid;
    let mut grad_score = vec![T::zero(); n];
    grad_score[idx] = -l1 / out.score[idx];
    let mut grad_offset = vec![[T::zero(); 2]; n];
    let mut grad_size = vec![[T::zero(); 2]; n];
    let step = search_size / T::from_usize_lossy(grid);
    let half = lit::<T>(0.5) * search_size;
    grad_offset[idx] = [l2 * g[0] * step, l2 * g[1] * step];
    grad_size[idx] = [l2 * (g[2] * search_size - g[0] * half), l2 * (g[3] * search_size - g[1] * half)];

    Ok(LossOutput { total: l1 * ce + l2 * siou, ce, siou, cell, grad_score, grad_offset, grad_size })
}

/// In-graph loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub siou: Var,
    /// 1x4 predicted box at the target cell, in search pixels.
    pub pred_box: Var,
}

pub fn total_loss_graph<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    head: &HeadVars,
    grid: usize,
    gt_in_search: &BBox<T>,
    search_size: T,
    weights: &LossWeights,
) -> Result<LossVars> {
    gt_in_search.validate()?;
    let (row, col) = target_cell(gt_in_search, search_size, grid)?;
    let idx = row * grid + col;
    let g = &mut ctx.g;

    let logp = g.pick(head.log_score, 0, idx);
    let ce = g.scale(logp, -T::one());

    let step = search_size / T::from_usize_lossy(grid);
    let ox = g.pick(head.offset, idx, 0);
    let oy = g.pick(head.offset, idx, 1);
    let sw = g.pick(head.size, idx, 0);
    let sh = g.pick(head.size, idx, 1);
    let cx = g.scale(ox, step);
    let cx = g.add_scalar(cx, T::from_usize_lossy(col) * step);
    let cy = g.scale(oy, step);
    let cy = g.add_scalar(cy, T::from_usize_lossy(row) * step);
    let w = g.scale(sw, search_size);
    let h = g.scale(sh, search_size);
    let hw = g.scale(w, lit(0.5));
    let hh = g.scale(h, lit(0.5));
    let x = g.sub(cx, hw);
    let y = g.sub(cy, hh);
    let pred_box = g.concat_cols(&[x, y, w, h]);
    let siou = g.siou(pred_box, gt_in_search);

    let a = g.scale(ce, lit(weights.lambda1));
    let b = g.scale(siou, lit(weights.lambda2));
    let total = g.add(a, b);
    Ok(LossVars { total, ce, siou, pred_box })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(grid: usize, cell: usize, o: [f64; 2], s: [f64; 2]) -> HeadOutput<f64> {
        let mut score = vec![0.0; grid * grid];
        score[cell] = 1.0;
        HeadOutput { grid, score, offset: vec![o; grid * grid], size: vec![s; grid * grid] }
    }

    #[test]
    fn ce_examples() {
        let uniform = vec![1.0 / 64.0; 64];
        assert!((ce_loss(&uniform, 8, (3, 4)).unwrap() - 64f64.ln()).abs() < 1e-12);
        assert!((ce_loss(&uniform, 8, (3, 4)).unwrap() - 4.1589).abs() < 1e-4);
        let hot = one_hot(8, 10, [0.5; 2], [0.5; 2]);
        assert_eq!(ce_loss(&hot.score, 8, (1, 2)).unwrap(), 0.0);
        assert!(matches!(ce_loss(&uniform, 8, (8, 0)), Err(Error::Index(_))));
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        // centre (20, 28) on a 64 px / 8-cell grid: cell (3, 2), offsets (0.5, 0.5)
        let gt = BBox::new(12.0, 20.0, 16.0, 16.0).unwrap();
        let out = one_hot(8, 3 * 8 + 2, [0.5, 0.5], [0.25, 0.25]);
        let l = total_loss(&out, &gt, 64.0, &LossWeights::default()).unwrap();
        assert_eq!(l.cell, (3, 2));
        assert_eq!((l.total, l.ce, l.siou), (0.0, 0.0, 0.0));
    }

    #[test]
    fn zero_weights_zero_loss() {
        let gt = BBox::new(12.0, 20.0, 16.0, 16.0).unwrap();
        let out = HeadOutput {
            grid: 8,
            score: vec![1.0 / 64.0; 64],
            offset: vec![[0.1, 0.9]; 64],
            size: vec![[0.7, 0.2]; 64],
        };
        let l = total_loss(&out, &gt, 64.0, &LossWeights { lambda1: 0.0, lambda2: 0.0 }).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(l.ce > 0.0 && l.siou > 0.0);
    }

    #[test]
    fn centre_outside_is_rejected() {
        let gt = BBox::new(60.0, 10.0, 10.0, 10.0).unwrap();
        let out = one_hot(8, 0, [0.5; 2], [0.5; 2]);
        assert!(matches!(total_loss(&out, &gt, 64.0, &LossWeights::default()), Err(Error::SampleRejected(_))));
    }
}
