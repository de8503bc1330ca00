//! File-level workflows behind the command-line tools. All of them run in
//! single precision and write their effective configuration next to, or
//! inside, every artifact they produce.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, load_dataset, load_sequence, read_boxes, write_boxes, write_json, Manifest, GROUNDTRUTH};
use crate::dfa::ActivationTrace;
use crate::error::{Error, Result};
use crate::eval::{
    bench_settings, curve_csv, norm_precision_curve, precision_curve, run_benchmark, success_curve, success_thresholds,
    Ablation, MetricsReport, SequenceMetrics,
};
use crate::model::Model;
use crate::tracker::{track_sequence, write_overlays, TrackRun, Tracker, TrackerConfig};
use crate::training::{self, Artifacts, TrainReport};

/// Scalar type used by the file-level workflows.
pub type Real = f32;

pub fn gen_data(out: &Path, cfg: &RunConfig) -> Result<Manifest> {
    data::write_dataset(out, &cfg.synth)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{name}{suffix}"))
}

/// Paths written by [`train`] besides the checkpoint itself.
pub fn train_artifacts(out: &Path) -> Artifacts {
    Artifacts {
        checkpoint: None,
        best_checkpoint: Some(sibling(out, ".best")),
        loss_curve: Some(sibling(out, ".loss.csv")),
        dump_dir: Some(out.parent().map(Path::to_path_buf).unwrap_or_default()),
    }
}

pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<TrainReport> {
    let dataset = load_dataset(data_dir)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        data::mkdir(dir)?;
    }
    let mut model = Model::<Real>::new(&cfg.model)?;
    let report = training::train(&mut model, &dataset, &cfg.train, &train_artifacts(out))?;
    let provenance = serde_json::json!({
        "run": cfg.to_json(),
        "data": data_dir.display().to_string(),
        "steps": report.steps,
        "epoch_iou": report.epoch_iou,
        "best_epoch": report.best_epoch,
    });
    checkpoint::save_with_provenance(&model, provenance, out)?;
    Ok(report)
}

pub fn load_model(ckpt: &Path) -> Result<Model<Real>> {
    checkpoint::load(ckpt)
}

#[derive(Serialize)]
struct TrackProvenance<'a> {
    checkpoint: String,
    sequence: String,
    model: &'a crate::model::ModelConfig,
    tracker: &'a TrackerConfig,
    mean_layers: f64,
}

/// Track one sequence directory. Writes the result file, its provenance
/// sidecar `<out>.provenance.json` and optionally a trace file and overlays.
pub fn track(
    ckpt: &Path,
    seq_dir: &Path,
    tracker_cfg: &TrackerConfig,
    out: &Path,
    trace: Option<&Path>,
    overlay: Option<&Path>,
) -> Result<TrackRun> {
    let model = load_model(ckpt)?;
    let seq = load_sequence(seq_dir)?;
    let mut tracker = Tracker::new(model, tracker_cfg.clone())?;
    let run = track_sequence(&mut tracker, &seq)?;
    for p in [Some(out), trace].into_iter().flatten() {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            data::mkdir(dir)?;
        }
    }
    write_boxes(out, &run.boxes)?;
    if let Some(t) = trace {
        std::fs::write(t, run.trace_text()).map_err(|e| Error::io(t, e))?;
    }
    if let Some(dir) = overlay {
        write_overlays(dir, &seq, &run)?;
    }
    let prov = TrackProvenance {
        checkpoint: ckpt.display().to_string(),
        sequence: seq_dir.display().to_string(),
        model: &tracker.model.config,
        tracker: tracker_cfg,
        mean_layers: run.mean_layers(),
    };
    write_json(&sibling(out, ".provenance.json"), &prov)?;
    Ok(run)
}

/// Score `results/<sequence>.txt` against every sequence of `data_dir`.
/// A `results/<sequence>.trace.txt` file, when present, supplies the
/// executed-layer count.
pub fn eval(results_dir: &Path, data_dir: &Path, report: &Path, curves: Option<&Path>) -> Result<MetricsReport> {
    if !results_dir.is_dir() {
        return Err(Error::MissingFile(results_dir.to_path_buf()));
    }
    let mut per_sequence = Vec::new();
    let (mut all_res, mut all_gt) = (Vec::new(), Vec::new());
    for dir in data::sequence_dirs(data_dir)? {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let gt = read_boxes(&dir.join(GROUNDTRUTH))?;
        let res = read_boxes(&results_dir.join(format!("{name}.txt")))?;
        let mut m = SequenceMetrics::compute(&name, &res, &gt)?;
        let trace_path = results_dir.join(format!("{name}.trace.txt"));
        if trace_path.is_file() {
            let text = std::fs::read_to_string(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
            let traces = ActivationTrace::parse_file(&text, &trace_path.display().to_string())?;
            if !traces.is_empty() {
                let sum: usize = traces.iter().map(|(_, t)| t.executed_count()).sum();
                m.mean_layers = Some(sum as f64 / traces.len() as f64);
            }
        }
        per_sequence.push(m);
        all_res.extend(res);
        all_gt.extend(gt);
    }
    let config = serde_json::json!({
        "results": results_dir.display().to_string(),
        "data": data_dir.display().to_string(),
        "precision_threshold_px": crate::eval::PRECISION_THRESHOLD,
        "norm_precision_threshold": crate::eval::NORM_PRECISION_THRESHOLD,
        "success_points": crate::eval::SUCCESS_POINTS,
    });
    let rep = MetricsReport::new(config, per_sequence);
    write_json(report, &rep)?;
    if let Some(dir) = curves {
        data::mkdir(dir)?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        let success: Vec<(f64, f64)> =
            success_thresholds().into_iter().zip(success_curve(&all_res, &all_gt)?).collect();
        write("success.csv", curve_csv("threshold,success", &success))?;
        write("precision.csv", curve_csv("threshold_px,precision", &precision_curve(&all_res, &all_gt)?))?;
        write("norm_precision.csv", curve_csv("threshold,norm_precision", &norm_precision_curve(&all_res, &all_gt)?))?;
    }
    Ok(rep)
}

#[derive(Serialize)]
struct BenchFile<'a> {
    checkpoint: String,
    data: String,
    reports: &'a [MetricsReport],
}

pub fn bench(
    ckpt: &Path,
    data_dir: &Path,
    betas: &[f64],
    ablations: &[Ablation],
    tracker_cfg: &TrackerConfig,
    report: &Path,
) -> Result<Vec<MetricsReport>> {
    let model = load_model(ckpt)?;
    let dataset = load_dataset(data_dir)?;
    let settings = bench_settings(betas, ablations, model.config.encoder.beta);
    let extra = serde_json::json!({ "checkpoint": ckpt.display().to_string(), "data": data_dir.display().to_string() });
    let reports = run_benchmark(&model, &dataset, tracker_cfg, &settings, extra)?;
    let file =
        BenchFile { checkpoint: ckpt.display().to_string(), data: data_dir.display().to_string(), reports: &reports };
    write_json(report, &file)?;
    Ok(reports)
}
