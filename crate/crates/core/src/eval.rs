//! One-pass evaluation metrics and the benchmark harness.
//!
//! * Precision: share of frames whose centre error is at most 20 px.
//! * Normalised precision: centre error divided per axis by the annotated
//!   width and height; the reported value is the curve at 0.2.
//! * Success AUC: mean over `τ ∈ {0, 0.05, …, 1}` of the share of frames with
//!   IoU strictly above `τ`.
//!
//! All rates are percentages. Dataset-level values weight sequences by frame count.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tracker::{track_sequence, TrackRun, Tracker, TrackerConfig};

pub const PRECISION_THRESHOLD: f64 = 20.0;
pub const NORM_PRECISION_THRESHOLD: f64 = 0.2;
pub const SUCCESS_POINTS: usize = 21;

fn check_lengths(results: &[BBox<f64>], gt: &[BBox<f64>]) -> Result<()> {
    if results.len() != gt.len() {
        return Err(Error::shape(format!("{} result boxes for {} annotations", results.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(Error::shape("empty sequence".to_string()));
    }
    Ok(())
}

fn center_errors<'a>(results: &'a [BBox<f64>], gt: &'a [BBox<f64>]) -> impl Iterator<Item = (f64, f64, &'a BBox<f64>)> {
    results.iter().zip(gt).map(|(r, g)| {
        let ((rx, ry), (gx, gy)) = (r.center(), g.center());
        (rx - gx, ry - gy, g)
    })
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

pub fn precision(results: &[BBox<f64>], gt: &[BBox<f64>], threshold: f64) -> Result<f64> {
    check_lengths(results, gt)?;
    let hits = center_errors(results, gt).filter(|(dx, dy, _)| dx.hypot(*dy) <= threshold).count();
    Ok(percent(hits, gt.len()))
}

pub fn norm_precision(results: &[BBox<f64>], gt: &[BBox<f64>], threshold: f64) -> Result<f64> {
    check_lengths(results, gt)?;
    let hits = center_errors(results, gt).filter(|(dx, dy, g)| (dx / g.w).hypot(dy / g.h) <= threshold).count();
    Ok(percent(hits, gt.len()))
}

pub fn success_thresholds() -> Vec<f64> {
    (0..SUCCESS_POINTS).map(|i| i as f64 / (SUCCESS_POINTS - 1) as f64).collect()
}

/// Success rate (percent) at each threshold of [`success_thresholds`].
pub fn success_curve(results: &[BBox<f64>], gt: &[BBox<f64>]) -> Result<Vec<f64>> {
    check_lengths(results, gt)?;
    let ious: Vec<f64> = results.iter().zip(gt).map(|(r, g)| iou_unchecked(r, g)).collect();
    Ok(success_thresholds().iter().map(|&t| percent(ious.iter().filter(|&&v| v > t).count(), ious.len())).collect())
}

pub fn success_auc(results: &[BBox<f64>], gt: &[BBox<f64>]) -> Result<f64> {
    let curve = success_curve(results, gt)?;
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}

/// Precision curve over `0..=50` px in 1 px steps.
pub fn precision_curve(results: &[BBox<f64>], gt: &[BBox<f64>]) -> Result<Vec<(f64, f64)>> {
    (0..=50).map(|t| Ok((t as f64, precision(results, gt, t as f64)?))).collect()
}

/// Normalised precision curve over `0..=0.5` in steps of 0.01.
pub fn norm_precision_curve(results: &[BBox<f64>], gt: &[BBox<f64>]) -> Result<Vec<(f64, f64)>> {
    (0..=50)
        .map(|i| {
            let t = i as f64 / 100.0;
            Ok((t, norm_precision(results, gt, t)?))
        })
        .collect()
}

pub fn curve_csv(header: &str, points: &[(f64, f64)]) -> String {
    let mut s = format!("{header}\n");
    for (t, v) in points {
        let _ = writeln!(s, "{t},{v}");
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub frames: usize,
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "P_norm")]
    pub norm_precision: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
    pub mean_layers: Option<f64>,
    pub fps: Option<f64>,
}

impl SequenceMetrics {
    pub fn compute(name: &str, results: &[BBox<f64>], gt: &[BBox<f64>]) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            frames: gt.len(),
            precision: precision(results, gt, PRECISION_THRESHOLD)?,
            norm_precision: norm_precision(results, gt, NORM_PRECISION_THRESHOLD)?,
            auc: success_auc(results, gt)?,
            mean_layers: None,
            fps: None,
        })
    }

    pub fn from_run(seq: &Sequence, run: &TrackRun) -> Result<Self> {
        let mut m = Self::compute(&seq.name, &run.boxes, &seq.groundtruth)?;
        m.mean_layers = Some(run.mean_layers());
        m.fps = Some(run.fps());
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "P_norm")]
    pub norm_precision: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
    pub mean_layers: Option<f64>,
    pub fps: Option<f64>,
}

impl OverallMetrics {
    /// Frame-weighted reduction. `fps` is recomputed from per-sequence frame
    /// rates as total stepped frames over total time.
    pub fn reduce(per_sequence: &[SequenceMetrics]) -> Self {
        let n: usize = per_sequence.iter().map(|m| m.frames).sum();
        let w = |f: fn(&SequenceMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_sequence.iter().map(|m| f(m) * m.frames as f64).sum::<f64>() / n as f64
            }
        };
        let stepped = |m: &SequenceMetrics| m.frames.saturating_sub(1) as f64;
        let all = |f: fn(&SequenceMetrics) -> Option<f64>| {
            per_sequence.iter().all(|m| f(m).is_some()) && !per_sequence.is_empty()
        };
        let steps: f64 = per_sequence.iter().map(stepped).sum();
        let mean_layers = all(|m| m.mean_layers).then(|| {
            per_sequence.iter().map(|m| m.mean_layers.unwrap_or(0.0) * stepped(m)).sum::<f64>() / steps.max(1.0)
        });
        let fps = all(|m| m.fps).then(|| {
            let secs: f64 =
                per_sequence.iter().map(|m| m.fps.filter(|&f| f > 0.0).map_or(0.0, |f| stepped(m) / f)).sum();
            if secs > 0.0 {
                steps / secs
            } else {
                0.0
            }
        });
        Self {
            precision: w(|m| m.precision),
            norm_precision: w(|m| m.norm_precision),
            auc: w(|m| m.auc),
            mean_layers,
            fps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: serde_json::Value,
    pub per_sequence: Vec<SequenceMetrics>,
    pub overall: OverallMetrics,
}

impl MetricsReport {
    pub fn new(config: serde_json::Value, per_sequence: Vec<SequenceMetrics>) -> Self {
        let overall = OverallMetrics::reduce(&per_sequence);
        Self { config, per_sequence, overall }
    }
}

/// Which module an ablation switches off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Dfb,
    Dfa,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dfb" => Ok(Self::Dfb),
            "dfa" => Ok(Self::Dfa),
            other => Err(Error::Config(format!("unknown ablation {other:?}; expected dfb or dfa"))),
        }
    }
}

/// One benchmarked configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSetting {
    pub label: String,
    pub beta: f64,
    pub ablate_dfa: bool,
    pub ablate_dfb: bool,
}

/// `start:stop:step`, inclusive of `stop` up to rounding.
pub fn parse_sweep(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::Config(format!("beta sweep {text:?} must be START:STOP:STEP with STEP > 0"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> =
        parts.iter().map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
    let (a, b, s) = (nums[0], nums[1], nums[2]);
    if !(s > 0.0) || !a.is_finite() || !b.is_finite() || b < a {
        return Err(bad());
    }
    let n = ((b - a) / s + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| {
            let v = a + i as f64 * s;
            (v * 1e9).round() / 1e9
        })
        .collect())
}

/// Sweep settings (full model at each β) followed by the ablation table: the
/// full model and every non-empty subset of `ablations`, at `base_beta`.
pub fn bench_settings(betas: &[f64], ablations: &[Ablation], base_beta: f64) -> Vec<BenchSetting> {
    let mut out: Vec<BenchSetting> = betas
        .iter()
        .map(|&beta| BenchSetting { label: format!("beta={beta}"), beta, ablate_dfa: false, ablate_dfb: false })
        .collect();
    if ablations.is_empty() {
        return out;
    }
    let dfb = ablations.contains(&Ablation::Dfb);
    let dfa = ablations.contains(&Ablation::Dfa);
    let mut table = vec![(false, false)];
    if dfb {
        table.push((true, false));
    }
    if dfa {
        table.push((false, true));
    }
    if dfb && dfa {
        table.push((true, true));
    }
    for (no_dfb, no_dfa) in table {
        let label = match (no_dfb, no_dfa) {
            (false, false) => "full".to_string(),
            (true, false) => "w/o DFB".to_string(),
            (false, true) => "w/o DFA".to_string(),
            (true, true) => "w/o DFB+DFA".to_string(),
        };
        out.push(BenchSetting { label, beta: base_beta, ablate_dfa: no_dfa, ablate_dfb: no_dfb });
    }
    out
}

/// Track every sequence under one setting and summarise.
pub fn evaluate_setting<T: Scalar>(
    model: &Model<T>,
    data: &[Sequence],
    tracker_cfg: &TrackerConfig,
    setting: &BenchSetting,
    extra_config: serde_json::Value,
) -> Result<MetricsReport> {
    let m = model.with_encoder_flags(setting.beta, setting.ablate_dfa, setting.ablate_dfb);
    let mut tracker = Tracker::new(m, tracker_cfg.clone())?;
    let per_sequence = data
        .iter()
        .map(|seq| {
            let run = track_sequence(&mut tracker, seq)?;
            SequenceMetrics::from_run(seq, &run)
        })
        .collect::<Result<Vec<_>>>()?;
    let config = serde_json::json!({
        "setting": setting,
        "model": tracker.model.config,
        "tracker": tracker_cfg,
        "run": extra_config,
    });
    Ok(MetricsReport::new(config, per_sequence))
}

pub fn run_benchmark<T: Scalar>(
    model: &Model<T>,
    data: &[Sequence],
    tracker_cfg: &TrackerConfig,
    settings: &[BenchSetting],
    extra_config: serde_json::Value,
) -> Result<Vec<MetricsReport>> {
    settings.iter().map(|s| evaluate_setting(model, data, tracker_cfg, s, extra_config.clone())).collect()
}
