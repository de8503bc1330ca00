//! Pair sampling, augmentation and the AdamW training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{decode_box, HeadOutput};
use crate::checkpoint;
use crate::data::{mkdir, write_json, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{box_to_crop_coords, iou_unchecked, make_crop, BBox, CropSpec};
use crate::imaging::{sample_crop, Image};
use crate::losses::{total_loss_graph, LossWeights};
use crate::model::Model;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Ctx;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// 0-based epoch from which `lr * lr_decay_factor` applies.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Largest frame distance between the static template and the search frame.
    pub max_gap: usize,
    pub template_factor: f64,
    pub search_factor: f64,
    /// Uniform per-axis shift of the search centre, in units of `sqrt(w * h)`.
    pub center_jitter: f64,
    /// Search side is scaled by `exp(u)`, `u ~ U(-scale_jitter, scale_jitter)`.
    pub scale_jitter: f64,
    /// Per-crop intensity gain drawn from `U(1 - b, 1 + b)`.
    pub brightness_jitter: f64,
    pub flip_probability: f64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            pairs_per_epoch: 512,
            batch_size: 8,
            lr: 1e-3,
            lr_decay_epoch: 16,
            lr_decay_factor: 0.1,
            weight_decay: 1e-4,
            seed: 0,
            max_gap: 50,
            template_factor: 2.0,
            search_factor: 4.0,
            center_jitter: 1.0,
            scale_jitter: 0.3,
            brightness_jitter: 0.3,
            flip_probability: 0.5,
            loss: LossWeights::default(),
        }
    }

    /// Reference schedule: 150 epochs of 60k pairs, batch 32, lr 1e-4 decayed at 120.
    pub fn full_scale() -> Self {
        Self { epochs: 150, pairs_per_epoch: 60_000, batch_size: 32, lr: 1e-4, lr_decay_epoch: 120, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.pairs_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, pairs_per_epoch and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay_factor > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and lr_decay_factor must be positive, weight_decay non-negative");
        }
        if self.max_gap < 2 {
            return bad("max_gap must be at least 2");
        }
        if !(self.template_factor > 0.0 && self.search_factor > 0.0) {
            return bad("crop factors must be positive");
        }
        if !(0.0..1.0).contains(&self.brightness_jitter) || !(0.0..=1.0).contains(&self.flip_probability) {
            return bad("brightness_jitter must lie in [0, 1) and flip_probability in [0, 1]");
        }
        if !(self.center_jitter >= 0.0 && self.scale_jitter >= 0.0) {
            return bad("jitters must be non-negative");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pairs_per_epoch.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }
}

/// One training example, intensities in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct TrainingPair<T> {
    pub sequence: usize,
    /// Static, dynamic and search frame indices (0-based, strictly increasing).
    pub frames: [usize; 3],
    pub static_template: Image<T>,
    pub dynamic_template: Image<T>,
    pub search: Image<T>,
    /// Ground truth in search-crop pixels.
    pub gt: BBox<T>,
    pub flipped: bool,
}

/// Frame triple `a < b < c` with `c - a <= max_gap`.
pub fn sample_frames(len: usize, max_gap: usize, rng: &mut ChaCha8Rng) -> Result<[usize; 3]> {
    if len < 3 {
        return Err(Error::SequenceTooShort(format!("{len} frames, need at least 3")));
    }
    let a = rng.random_range(0..len - 2);
    let hi = (len - 1).min(a + max_gap.max(2));
    let b = rng.random_range(a + 1..hi);
    let c = rng.random_range(b + 1..=hi);
    Ok([a, b, c])
}

/// Draw one pair from `data`. Sequences shorter than three frames are never chosen.
pub fn sample_pair<T: Scalar>(
    data: &[Sequence],
    cfg: &TrainConfig,
    template_size: usize,
    search_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingPair<T>> {
    let usable: Vec<usize> = (0..data.len()).filter(|&i| data[i].len() >= 3).collect();
    if usable.is_empty() {
        return Err(Error::SequenceTooShort("no sequence has at least 3 frames".into()));
    }
    let sequence = usable[rng.random_range(0..usable.len())];
    let seq = &data[sequence];
    let frames = sample_frames(seq.len(), cfg.max_gap, rng)?;
    let [a, b, c] = frames;
    let template = |i: usize| -> Result<Image<T>> {
        let crop = make_crop(
            seq.frames[i].size(),
            &seq.groundtruth[i].cast::<T>(),
            T::lit(cfg.template_factor),
            template_size,
        )?;
        Ok(sample_crop(&seq.frames[i], &crop))
    };
    let mut static_template = template(a)?;
    let mut dynamic_template = template(b)?;

    let gt_frame = seq.groundtruth[c];
    let base = cfg.search_factor * gt_frame.area().sqrt();
    let side = base * rng.random_range(-cfg.scale_jitter..=cfg.scale_jitter).exp();
    // keep the target centre well inside the crop whatever the jitter
    let reach = (cfg.center_jitter * gt_frame.area().sqrt()).min(0.4 * side);
    let mut shift = || if reach > 0.0 { rng.random_range(-reach..=reach) } else { 0.0 };
    let (gcx, gcy) = gt_frame.center();
    let (dx, dy) = (shift(), shift());
    let crop = CropSpec::new((T::lit(gcx + dx), T::lit(gcy + dy)), T::lit(side), search_size)?;
    let mut search = sample_crop(&seq.frames[c], &crop);
    let mut gt = box_to_crop_coords(&gt_frame.cast::<T>(), &crop);

    for img in [&mut static_template, &mut dynamic_template, &mut search] {
        let k = rng.random_range(1.0 - cfg.brightness_jitter..=1.0 + cfg.brightness_jitter);
        img.scale_intensity(T::lit(k));
    }
    let flipped = rng.random_bool(cfg.flip_probability);
    if flipped {
        static_template = static_template.flip_horizontal();
        dynamic_template = dynamic_template.flip_horizontal();
        search = search.flip_horizontal();
        gt.x = T::from_usize_lossy(search_size) - gt.x - gt.w;
    }
    Ok(TrainingPair { sequence, frames, static_template, dynamic_template, search, gt, flipped })
}

/// Per-step batch means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub siou: f64,
    pub lr: f64,
}

pub fn loss_curve_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("step,loss_total,loss_ce,loss_siou,lr\n");
    for r in curve {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.total, r.ce, r.siou, r.lr);
    }
    s
}

/// Where training writes its artifacts. Unset paths are skipped.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub loss_curve: Option<PathBuf>,
    /// Directory for the diagnostic dump written when a loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub curve: Vec<LossRecord>,
    /// Mean IoU of the decoded training predictions, per epoch.
    pub epoch_iou: Vec<f64>,
    pub best_epoch: usize,
}

/// Loss and gradients for one pair; the model runs with training-mode gates.
pub struct PairOutcome<T> {
    pub total: T,
    pub ce: T,
    pub siou: T,
    pub iou: T,
    pub grads: Vec<Option<Tensor<T>>>,
}

pub fn pair_gradients<T: Scalar>(
    model: &Model<T>,
    pair: &TrainingPair<T>,
    weights: &LossWeights,
) -> Result<PairOutcome<T>> {
    let norm = model.config.norm;
    let mut ctx = Ctx::new(&model.store, true);
    let s = Model::image_var(&mut ctx, &pair.search.normalized(&norm), false);
    let zs = Model::image_var(&mut ctx, &pair.static_template.normalized(&norm), false);
    let zd = Model::image_var(&mut ctx, &pair.dynamic_template.normalized(&norm), false);
    let f = model.forward(&mut ctx, s, zs, zd, model.encoder.training_mode())?;
    let search_size = T::from_usize_lossy(model.config.search_size);
    let loss = total_loss_graph(&mut ctx, &f.head, model.grid(), &pair.gt, search_size, weights)?;
    let out = HeadOutput::from_vars(&ctx, &f.head);
    let (pred, _) = decode_box(&out, search_size);
    let grads = ctx.g.backward(loss.total);
    Ok(PairOutcome {
        total: ctx.g.scalar(loss.total),
        ce: ctx.g.scalar(loss.ce),
        siou: ctx.g.scalar(loss.siou),
        iou: iou_unchecked(&pred, &pair.gt),
        grads: ctx.param_grads(&grads),
    })
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    step: usize,
    lr: f64,
    loss_total: f64,
    loss_ce: f64,
    loss_siou: f64,
    pairs: Vec<DumpPair<'a>>,
}

#[derive(Serialize)]
struct DumpPair<'a> {
    sequence: &'a str,
    frames: [usize; 3],
    gt_in_search: [f64; 4],
    flipped: bool,
}

fn write_dump<T: Scalar>(
    dir: &Path,
    step: usize,
    lr: f64,
    losses: (f64, f64, f64),
    batch: &[TrainingPair<T>],
    data: &[Sequence],
) -> Result<PathBuf> {
    mkdir(dir)?;
    let path = dir.join(format!("nonfinite_step{step}.json"));
    let pairs = batch
        .iter()
        .map(|p| DumpPair {
            sequence: &data[p.sequence].name,
            frames: p.frames,
            gt_in_search: [p.gt.x, p.gt.y, p.gt.w, p.gt.h].map(|v| v.as_f64()),
            flipped: p.flipped,
        })
        .collect();
    let dump = NonFiniteDump { step, lr, loss_total: losses.0, loss_ce: losses.1, loss_siou: losses.2, pairs };
    write_json(&path, &dump)?;
    Ok(path)
}

/// Train `model` in place. Samples of a batch are processed in order and
/// their gradients summed, so a fixed seed reproduces the run exactly.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &[Sequence],
    cfg: &TrainConfig,
    artifacts: &Artifacts,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.store, AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() });
    let (ts, ss) = (model.config.template_size, model.config.search_size);
    let inv_batch = T::one() / T::from_usize_lossy(cfg.batch_size);

    let mut curve = Vec::with_capacity(cfg.total_steps());
    let mut epoch_iou = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut remaining = cfg.pairs_per_epoch;
        let (mut iou_sum, mut iou_n) = (0.0, 0usize);
        while remaining > 0 {
            let n = remaining.min(cfg.batch_size);
            remaining -= n;
            let batch = (0..n).map(|_| sample_pair::<T>(data, cfg, ts, ss, &mut rng)).collect::<Result<Vec<_>>>()?;
            let mut acc: Vec<Option<Tensor<T>>> = vec![None; model.store.len()];
            let (mut total, mut ce, mut siou) = (0.0, 0.0, 0.0);
            for pair in &batch {
                let o = pair_gradients(model, pair, &cfg.loss)?;
                total += o.total.as_f64();
                ce += o.ce.as_f64();
                siou += o.siou.as_f64();
                iou_sum += o.iou.as_f64();
                iou_n += 1;
                for (slot, g) in acc.iter_mut().zip(o.grads) {
                    match (slot.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *slot = Some(g),
                        _ => {}
                    }
                }
            }
            let k = n as f64;
            let record = LossRecord { step, total: total / k, ce: ce / k, siou: siou / k, lr };
            let grads_finite = acc.iter().flatten().all(|g| g.all_finite());
            if !record.total.is_finite() || !grads_finite {
                let dir = artifacts.dump_dir.clone().unwrap_or_else(std::env::temp_dir);
                let dump = write_dump(&dir, step, lr, (record.total, record.ce, record.siou), &batch, data)?;
                return Err(Error::NonFinite { step, dump });
            }
            let scale = if n == cfg.batch_size { inv_batch } else { T::one() / T::from_usize_lossy(n) };
            for g in acc.iter_mut().flatten() {
                g.scale_in_place(scale);
            }
            opt.step(&mut model.store, &acc, lr);
            curve.push(record);
            step += 1;
        }
        let mean_iou = iou_sum / iou_n.max(1) as f64;
        let last = curve.last().map_or(f64::NAN, |r: &LossRecord| r.total);
        log::info!(
            "epoch {}/{}: step {step}, lr {lr:e}, last loss {last:.4}, mean IoU {mean_iou:.3}",
            epoch + 1,
            cfg.epochs
        );
        epoch_iou.push(mean_iou);
        if best.is_none_or(|(_, b)| mean_iou > b) {
            best = Some((epoch, mean_iou));
            if let Some(p) = &artifacts.best_checkpoint {
                checkpoint::save(model, p)?;
            }
        }
    }
    if let Some(p) = &artifacts.checkpoint {
        checkpoint::save(model, p)?;
    }
    if let Some(p) = &artifacts.loss_curve {
        std::fs::write(p, loss_curve_csv(&curve)).map_err(|e| Error::io(p, e))?;
    }
    Ok(TrainReport { steps: step, curve, epoch_iou, best_epoch: best.map_or(0, |b| b.0) })
}

/// Mean IoU of inference-mode predictions on `n` freshly sampled pairs.
pub fn evaluate_pairs<T: Scalar>(
    model: &Model<T>,
    data: &[Sequence],
    cfg: &TrainConfig,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ts, ss) = (model.config.template_size, model.config.search_size);
    let norm = model.config.norm;
    let mut sum = 0.0;
    for _ in 0..n {
        let p = sample_pair::<T>(data, cfg, ts, ss, &mut rng)?;
        let input = crate::model::ModelInput {
            search: p.search.normalized(&norm),
            static_template: p.static_template.normalized(&norm),
            dynamic_template: p.dynamic_template.normalized(&norm),
        };
        let (out, _) = model.infer(&input)?;
        let (pred, _) = decode_box(&out, T::from_usize_lossy(ss));
        sum += iou_unchecked(&pred, &p.gt).as_f64();
    }
    Ok(sum / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};
    use crate::model::ModelConfig;

    fn tiny_data() -> Vec<Sequence> {
        generate(&SynthConfig {
            num_sequences: 2,
            frames_per_sequence: 20,
            frame_size: 64,
            object_size_range: [8.0, 14.0],
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn three_frames_give_the_only_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(sample_frames(3, 50, &mut rng).unwrap(), [0, 1, 2]);
        }
        assert!(matches!(sample_frames(2, 50, &mut rng), Err(Error::SequenceTooShort(_))));
        for _ in 0..200 {
            let [a, b, c] = sample_frames(120, 50, &mut rng).unwrap();
            assert!(a < b && b < c && c - a <= 50 && c < 120);
        }
    }

    #[test]
    fn sampled_targets_lie_inside_search() {
        let data = tiny_data();
        let cfg = TrainConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = sample_pair::<f64>(&data, &cfg, 32, 64, &mut rng).unwrap();
            let (cx, cy) = p.gt.center();
            assert!((0.0..64.0).contains(&cx) && (0.0..64.0).contains(&cy));
            assert_eq!(p.search.width, 64);
            assert_eq!(p.static_template.width, 32);
        }
    }

    #[test]
    fn pair_stream_is_seeded() {
        let data = tiny_data();
        let cfg = TrainConfig::desk();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| sample_pair::<f32>(&data, &cfg, 32, 64, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        let (a, b) = (draw(9), draw(9));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.frames, x.gt, &x.search), (y.frames, y.gt, &y.search));
        }
    }

    #[test]
    fn lr_schedule_steps_once() {
        let cfg = TrainConfig { lr: 1e-3, lr_decay_epoch: 3, lr_decay_factor: 0.1, ..TrainConfig::desk() };
        assert_eq!(cfg.lr_at(2), 1e-3);
        assert_eq!(cfg.lr_at(3), 1e-3 * 0.1);
        assert_eq!(cfg.lr_at(100), 1e-3 * 0.1);
        assert_eq!(TrainConfig::full_scale().lr_at(119), 1e-4);
    }

    #[test]
    fn zero_loss_weights_leave_only_weight_decay() {
        let data = tiny_data();
        let mut model = Model::<f64>::new(&ModelConfig::desk()).unwrap();
        let before = model.store.clone();
        let cfg = TrainConfig {
            epochs: 1,
            pairs_per_epoch: 2,
            batch_size: 2,
            lr: 1e-2,
            weight_decay: 0.5,
            loss: LossWeights { lambda1: 0.0, lambda2: 0.0 },
            ..TrainConfig::desk()
        };
        let r = train(&mut model, &data, &cfg, &Artifacts::default()).unwrap();
        assert_eq!(r.steps, 1);
        assert_eq!(r.curve[0].total, 0.0);
        for id in model.store.ids() {
            let k = if model.store.is_trainable(id) { 1.0 - 1e-2 * 0.5 } else { 1.0 };
            let expect = before.get(id).map(|v| v * k);
            assert!(model.store.get(id).max_abs_diff(&expect) < 1e-15, "{}", model.store.name(id));
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = tiny_data();
        let cfg = TrainConfig { epochs: 1, pairs_per_epoch: 4, batch_size: 2, ..TrainConfig::desk() };
        let run = || {
            let mut m = Model::<f32>::new(&ModelConfig::desk()).unwrap();
            let r = train(&mut m, &data, &cfg, &Artifacts::default()).unwrap();
            (r, m.store)
        };
        let (ra, sa) = run();
        let (rb, sb) = run();
        assert_eq!(ra, rb);
        for id in sa.ids() {
            assert_eq!(sa.get(id), sb.get(id));
        }
        assert!(ra.curve.iter().all(|r| r.total.is_finite()));
        assert!(loss_curve_csv(&ra.curve).starts_with("step,loss_total,loss_ce,loss_siou,lr\n0,"));
    }
}
