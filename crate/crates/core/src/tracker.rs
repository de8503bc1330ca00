//! Online one-pass tracking: initialise on the first frame, then crop, infer,
//! decode and map back to frame space every frame, refreshing the dynamic
//! template at a fixed interval.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::decode_box;
use crate::data::{frame_file_name, mkdir, Sequence};
use crate::dfa::ActivationTrace;
use crate::error::{Error, Result};
use crate::geometry::{crop_to_frame_coords, make_crop, BBox};
use crate::imaging::{sample_crop, Frame, Image};
use crate::model::{Model, ModelInput};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Frames between dynamic-template refreshes.
    pub update_interval: usize,
    pub template_factor: f64,
    pub search_factor: f64,
    /// Smallest side of a reported box, pixels.
    pub min_side: f64,
    /// When set, a scheduled refresh is skipped if the confidence is below this value.
    pub confidence_guard: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { update_interval: 25, template_factor: 2.0, search_factor: 4.0, min_side: 2.0, confidence_guard: None }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.update_interval == 0 {
            return Err(Error::Config("update_interval must be at least 1".into()));
        }
        if !(self.template_factor > 0.0 && self.search_factor > 0.0 && self.min_side > 0.0) {
            return Err(Error::Config("crop factors and min_side must be positive".into()));
        }
        Ok(())
    }
}

/// Template crops in `[0, 1]` intensities plus the refresh counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateState<T> {
    pub static_crop: Image<T>,
    pub dynamic_crop: Image<T>,
    pub dynamic_age: usize,
    pub update_interval: usize,
    /// Last reported box, frame pixels.
    pub last_box: BBox<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T> {
    pub bbox: BBox<T>,
    pub confidence: T,
    pub trace: ActivationTrace,
    pub template_updated: bool,
}

#[derive(Clone, Debug)]
pub struct Tracker<T: Scalar> {
    pub model: Model<T>,
    pub config: TrackerConfig,
    state: Option<TemplateState<T>>,
}

impl<T: Scalar> Tracker<T> {
    pub fn new(model: Model<T>, config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { model, config, state: None })
    }

    pub fn state(&self) -> Option<&TemplateState<T>> {
        self.state.as_ref()
    }

    fn template(&self, frame: &Frame, b: &BBox<T>) -> Result<Image<T>> {
        let crop = make_crop(frame.size(), b, T::lit(self.config.template_factor), self.model.config.template_size)?;
        Ok(sample_crop(frame, &crop))
    }

    /// Set both templates from the first frame.
    pub fn init(&mut self, frame: &Frame, gt: &BBox<T>) -> Result<()> {
        gt.validate()?;
        let (fw, fh) = frame.size();
        let (cx, cy) = gt.center();
        let inside = |v: T, lim: usize| v >= T::zero() && v <= T::from_usize_lossy(lim);
        if !inside(cx, fw) || !inside(cy, fh) {
            return Err(Error::InvalidBox(format!(
                "initial box {} has its centre outside the {fw}x{fh} frame",
                gt.to_line()
            )));
        }
        let crop = self.template(frame, gt)?;
        self.state = Some(TemplateState {
            static_crop: crop.clone(),
            dynamic_crop: crop,
            dynamic_age: 0,
            update_interval: self.config.update_interval,
            last_box: *gt,
        });
        Ok(())
    }

    pub fn step(&mut self, frame: &Frame) -> Result<StepOutput<T>> {
        let state = self.state.as_ref().ok_or_else(|| Error::State("step called before init".into()))?;
        let mc = &self.model.config;
        let crop = make_crop(frame.size(), &state.last_box, T::lit(self.config.search_factor), mc.search_size)?;
        let search = sample_crop(frame, &crop);
        let input = ModelInput {
            search: search.normalized(&mc.norm),
            static_template: state.static_crop.normalized(&mc.norm),
            dynamic_template: state.dynamic_crop.normalized(&mc.norm),
        };
        let (out, trace) = self.model.infer(&input)?;
        let (in_crop, confidence) = decode_box(&out, T::from_usize_lossy(mc.search_size));
        let (fw, fh) = frame.size();
        let bbox = crop_to_frame_coords(&in_crop, &crop).clamp_to_frame(
            T::from_usize_lossy(fw),
            T::from_usize_lossy(fh),
            T::lit(self.config.min_side),
        );

        let mut age = state.dynamic_age + 1;
        let mut template_updated = false;
        let mut dynamic = None;
        if age >= state.update_interval {
            let guard_ok = self.config.confidence_guard.is_none_or(|c| confidence.as_f64() >= c);
            if guard_ok {
                dynamic = Some(self.template(frame, &bbox)?);
                template_updated = true;
            }
            age = 0;
        }
        let state = self.state.as_mut().expect("initialised");
        if let Some(d) = dynamic {
            state.dynamic_crop = d;
        }
        state.dynamic_age = age;
        state.last_box = bbox;
        Ok(StepOutput { bbox, confidence, trace, template_updated })
    }
}

/// Outcome of one one-pass run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRun {
    /// One box per frame; the first is the initialisation box.
    pub boxes: Vec<BBox<f64>>,
    pub confidences: Vec<f64>,
    /// Traces of frames `2..=n` (1-based).
    pub traces: Vec<ActivationTrace>,
    /// Wall-clock seconds spent in `step` over the run.
    pub step_seconds: f64,
}

impl TrackRun {
    pub fn mean_layers(&self) -> f64 {
        if self.traces.is_empty() {
            return 0.0;
        }
        self.traces.iter().map(|t| t.executed_count() as f64).sum::<f64>() / self.traces.len() as f64
    }

    pub fn fps(&self) -> f64 {
        if self.step_seconds > 0.0 {
            self.traces.len() as f64 / self.step_seconds
        } else {
            0.0
        }
    }

    /// Trace file text; frame indices are 1-based and start at 2.
    pub fn trace_text(&self) -> String {
        self.traces.iter().enumerate().map(|(i, t)| t.to_lines(i + 2)).collect()
    }
}

/// Run a fresh tracker over an in-memory sequence.
pub fn track_sequence<T: Scalar>(tracker: &mut Tracker<T>, seq: &Sequence) -> Result<TrackRun> {
    let first = *seq
        .groundtruth
        .first()
        .ok_or_else(|| Error::SequenceTooShort(format!("{} has no annotated frame", seq.name)))?;
    tracker.init(&seq.frames[0], &first.cast())?;
    let n = seq.frames.len();
    let mut boxes = Vec::with_capacity(n);
    let mut confidences = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n.saturating_sub(1));
    boxes.push(first);
    confidences.push(1.0);
    let mut step_seconds = 0.0;
    for frame in &seq.frames[1..] {
        let t0 = Instant::now();
        let out = tracker.step(frame)?;
        step_seconds += t0.elapsed().as_secs_f64();
        boxes.push(out.bbox.cast());
        confidences.push(out.confidence.as_f64());
        traces.push(out.trace);
    }
    Ok(TrackRun { boxes, confidences, traces, step_seconds })
}

/// Write one overlay PNG per frame: prediction in green, annotation in red.
pub fn write_overlays(dir: &Path, seq: &Sequence, run: &TrackRun) -> Result<()> {
    mkdir(dir)?;
    for (i, (frame, pred)) in seq.frames.iter().zip(&run.boxes).enumerate() {
        let mut f = frame.clone();
        if let Some(gt) = seq.groundtruth.get(i) {
            f.draw_box(gt, [220, 40, 40]);
        }
        f.draw_box(pred, [40, 230, 60]);
        f.save_png(&dir.join(frame_file_name(i)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sequence, SynthConfig};
    use crate::model::ModelConfig;

    fn setup(interval: usize) -> (Tracker<f32>, Sequence) {
        let model = Model::new(&ModelConfig::desk()).unwrap();
        let cfg = TrackerConfig { update_interval: interval, ..Default::default() };
        let seq = generate_sequence(
            &SynthConfig {
                frames_per_sequence: 12,
                frame_size: 64,
                object_size_range: [8.0, 14.0],
                ..Default::default()
            },
            0,
        )
        .unwrap();
        (Tracker::new(model, cfg).unwrap(), seq)
    }

    #[test]
    fn init_sets_equal_templates_and_is_idempotent() {
        let (mut t, seq) = setup(25);
        assert!(matches!(t.step(&seq.frames[0]), Err(Error::State(_))));
        let gt = seq.groundtruth[0].cast::<f32>();
        t.init(&seq.frames[0], &gt).unwrap();
        let s1 = t.state().unwrap().clone();
        assert_eq!(s1.static_crop, s1.dynamic_crop);
        assert_eq!(s1.dynamic_age, 0);
        t.init(&seq.frames[0], &gt).unwrap();
        assert_eq!(&s1, t.state().unwrap());
        assert!(t.init(&seq.frames[0], &BBox::new_unchecked(1.0, 1.0, 0.0, 3.0)).is_err());
    }

    #[test]
    fn dynamic_template_refreshes_on_schedule() {
        let (mut t, seq) = setup(4);
        t.init(&seq.frames[0], &seq.groundtruth[0].cast()).unwrap();
        let static_crop = t.state().unwrap().static_crop.clone();
        let mut updated = Vec::new();
        for (i, f) in seq.frames.iter().enumerate().skip(1) {
            let out = t.step(f).unwrap();
            let s = t.state().unwrap();
            assert!(s.dynamic_age < s.update_interval);
            assert_eq!(s.static_crop, static_crop);
            let (w, h) = (f.width() as f32, f.height() as f32);
            let b = out.bbox;
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.right() <= w && b.bottom() <= h && b.w > 0.0 && b.h > 0.0);
            if out.template_updated {
                updated.push(i + 1);
            }
        }
        assert_eq!(updated, vec![5, 9]);
    }

    #[test]
    fn zero_beta_matches_disabled_gates() {
        let (t, seq) = setup(25);
        let m = t.model.clone();
        let mut a = Tracker::new(m.with_encoder_flags(0.0, false, false), TrackerConfig::default()).unwrap();
        let mut b = Tracker::new(m.with_encoder_flags(0.3, true, false), TrackerConfig::default()).unwrap();
        let ra = track_sequence(&mut a, &seq).unwrap();
        let rb = track_sequence(&mut b, &seq).unwrap();
        assert_eq!(ra.boxes, rb.boxes);
        assert_eq!(ra.mean_layers(), 4.0);
        let rc = track_sequence(&mut a, &seq).unwrap();
        assert_eq!((ra.boxes, ra.traces), (rc.boxes, rc.traces));
    }
}
