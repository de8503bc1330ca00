//! Synthetic low-light sequences and dataset I/O.
//!
//! Every sequence draws from its own ChaCha8 stream: the generator is seeded
//! with `SynthConfig::seed` and sequence `i` uses stream `i + 1`, so sequences
//! are independent of how many others are generated and of generation order.
//!
//! On-disk layout:
//!
//! ```text
//! DIR/manifest.json            {"format", "prng", "config", "config_hash", "sequences": [...]}
//! DIR/seq_000/00000001.png     frames, 1-indexed
//! DIR/seq_000/groundtruth.txt  one "x,y,w,h" line per frame, two decimals
//! DIR/seq_000/meta.json        {"seed", "stream", "config_hash", "frames"}
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::imaging::Frame;

pub const MANIFEST: &str = "manifest.json";
pub const GROUNDTRUTH: &str = "groundtruth.txt";
pub const META: &str = "meta.json";
pub const PRNG_NAME: &str = "ChaCha8 (rand_chacha), stream = sequence index + 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_sequences: usize,
    pub frames_per_sequence: usize,
    /// Square frame side in pixels.
    pub frame_size: usize,
    /// Background intensity in `[0, 1]`.
    pub background_mean: f64,
    /// Per-pixel Gaussian noise std in `[0, 1]` intensity units.
    pub noise_std: f64,
    /// Inclusive `[min, max]` range of the target's geometric-mean side.
    pub object_size_range: [f64; 2],
    /// Std of the per-frame velocity innovation, pixels.
    pub motion_step: f64,
    /// Relative amplitude of the global illumination flicker.
    pub illumination_flicker: f64,
    pub num_distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_sequences: 10,
            frames_per_sequence: 120,
            frame_size: 128,
            background_mean: 20.0 / 255.0,
            noise_std: 4.0 / 255.0,
            object_size_range: [14.0, 26.0],
            motion_step: 0.6,
            illumination_flicker: 0.1,
            num_distractors: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_sequences == 0 || self.frames_per_sequence == 0 {
            return bad("num_sequences and frames_per_sequence must be at least 1".into());
        }
        if self.frame_size < 16 {
            return bad(format!("frame_size {} is below the 16 px minimum", self.frame_size));
        }
        let [lo, hi] = self.object_size_range;
        if !(lo >= 4.0 && hi >= lo && hi <= self.frame_size as f64 / 2.0) {
            return bad(format!("object_size_range [{lo}, {hi}] must satisfy 4 <= min <= max <= frame_size / 2"));
        }
        if !(0.0..=1.0).contains(&self.background_mean) || !(0.0..1.0).contains(&self.illumination_flicker) {
            return bad("background_mean must lie in [0, 1] and illumination_flicker in [0, 1)".into());
        }
        if !(self.noise_std >= 0.0 && self.motion_step >= 0.0) {
            return bad("noise_std and motion_step must be non-negative".into());
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// One annotated sequence held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Frame>,
    pub groundtruth: Vec<BBox<f64>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub seed: u64,
    pub stream: u64,
    pub config_hash: String,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub prng: String,
    pub config: SynthConfig,
    pub config_hash: String,
    pub sequences: Vec<String>,
}

/// Appearance of one moving object.
struct Sprite {
    color: [f64; 3],
    freq: (f64, f64),
    phase: f64,
    contrast: f64,
}

impl Sprite {
    fn random(rng: &mut ChaCha8Rng, brightness: f64) -> Self {
        let base = rng.random_range(0.55..0.85) * brightness;
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.75..1.0));
        Self {
            color: tint.map(|t| base * t),
            freq: (rng.random_range(1.0..3.0), rng.random_range(1.0..3.0)),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            contrast: rng.random_range(0.25..0.45),
        }
    }

    /// Intensity at normalised object coordinates `(u, v) in [0, 1]²`.
    fn shade(&self, u: f64, v: f64, c: usize) -> f64 {
        let tau = std::f64::consts::TAU;
        let t = (tau * self.freq.0 * u + self.phase).sin() * (tau * self.freq.1 * v).cos();
        // darker rim so the extent is visible
        let rim = 1.0 - 0.35 * ((2.0 * u - 1.0).abs().max((2.0 * v - 1.0).abs())).powi(4);
        self.color[c] * (1.0 + self.contrast * t) * rim
    }
}

/// Smoothed random walk of a box that stays inside the frame.
struct Walker {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    log_size: f64,
    log_size_v: f64,
    aspect: f64,
    size_range: [f64; 2],
}

impl Walker {
    fn random(rng: &mut ChaCha8Rng, frame: f64, size_range: [f64; 2]) -> Self {
        let size = rng.random_range(size_range[0]..=size_range[1]);
        let aspect: f64 = rng.random_range(0.7..1.4);
        let margin = size * aspect.max(1.0 / aspect) * 0.5 + 1.0;
        Self {
            cx: rng.random_range(margin..frame - margin),
            cy: rng.random_range(margin..frame - margin),
            vx: 0.0,
            vy: 0.0,
            log_size: size.ln(),
            log_size_v: 0.0,
            aspect,
            size_range,
        }
    }

    fn size(&self) -> (f64, f64) {
        let s = self.log_size.exp();
        (s * self.aspect.sqrt(), s / self.aspect.sqrt())
    }

    fn step(&mut self, rng: &mut ChaCha8Rng, frame: f64, motion: f64) {
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        self.vx = 0.85 * self.vx + motion * n.sample(rng);
        self.vy = 0.85 * self.vy + motion * n.sample(rng);
        self.log_size_v = 0.9 * self.log_size_v + 0.004 * n.sample(rng);
        let (lo, hi) = (self.size_range[0].ln(), self.size_range[1].ln());
        self.log_size += self.log_size_v;
        if self.log_size < lo || self.log_size > hi {
            self.log_size = self.log_size.clamp(lo, hi);
            self.log_size_v = -self.log_size_v;
        }
        self.cx += self.vx;
        self.cy += self.vy;
        let (w, h) = self.size();
        let reflect = |c: &mut f64, v: &mut f64, half: f64| {
            let (a, b) = (half + 0.5, frame - half - 0.5);
            if *c < a {
                *c = a + (a - *c).min(b - a);
                *v = -*v;
            } else if *c > b {
                *c = b - (*c - b).min(b - a);
                *v = -*v;
            }
        };
        reflect(&mut self.cx, &mut self.vx, w / 2.0);
        reflect(&mut self.cy, &mut self.vy, h / 2.0);
    }

    /// Box rounded to the annotation precision, clamped to the frame.
    fn bbox(&self, frame: f64) -> BBox<f64> {
        let (w, h) = self.size();
        let b = BBox::new_unchecked(self.cx - w / 2.0, self.cy - h / 2.0, w, h).clamp_to_frame(frame, frame, 2.0);
        // snap edges to hundredths so the written annotation reloads exactly
        let snap = |lo: f64, hi: f64| {
            let (a, z) = ((lo * 100.0).round(), (hi * 100.0).round());
            (a / 100.0, (z - a) / 100.0)
        };
        let (x, w) = snap(b.x, b.right());
        let (y, h) = snap(b.y, b.bottom());
        BBox::new_unchecked(x, y, w, h)
    }
}

fn paint(canvas: &mut [f64], size: usize, b: &BBox<f64>, sprite: &Sprite) {
    let x0 = b.x.floor().max(0.0) as usize;
    let y0 = b.y.floor().max(0.0) as usize;
    let x1 = (b.right().ceil() as usize).min(size);
    let y1 = (b.bottom().ceil() as usize).min(size);
    for y in y0..y1 {
        let py = y as f64 + 0.5;
        if py < b.y || py >= b.bottom() {
            continue;
        }
        let v = (py - b.y) / b.h;
        for x in x0..x1 {
            let px = x as f64 + 0.5;
            if px < b.x || px >= b.right() {
                continue;
            }
            let u = (px - b.x) / b.w;
            for c in 0..3 {
                canvas[(y * size + x) * 3 + c] = sprite.shade(u, v, c);
            }
        }
    }
}

/// Generate sequence `index` of the dataset described by `config`.
pub fn generate_sequence(config: &SynthConfig, index: usize) -> Result<Sequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let size = config.frame_size;
    let fs = size as f64;

    let target_sprite = Sprite::random(&mut rng, 1.0);
    let mut target = Walker::random(&mut rng, fs, config.object_size_range);
    let small = [config.object_size_range[0] * 0.6, config.object_size_range[1] * 0.6];
    let mut distractors: Vec<(Sprite, Walker)> = (0..config.num_distractors)
        .map(|_| {
            let mut s = Sprite::random(&mut rng, 0.6);
            s.freq = target_sprite.freq;
            (s, Walker::random(&mut rng, fs, [small[0].max(4.0), small[1].max(4.0)]))
        })
        .collect();
    let flicker_period = rng.random_range(15.0..40.0);
    let flicker_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("noise std");

    let mut frames = Vec::with_capacity(config.frames_per_sequence);
    let mut groundtruth = Vec::with_capacity(config.frames_per_sequence);
    let mut canvas = vec![0.0f64; size * size * 3];
    for t in 0..config.frames_per_sequence {
        if t > 0 {
            target.step(&mut rng, fs, config.motion_step);
            for (_, w) in &mut distractors {
                w.step(&mut rng, fs, config.motion_step);
            }
        }
        canvas.fill(config.background_mean);
        for (s, w) in &distractors {
            paint(&mut canvas, size, &w.bbox(fs), s);
        }
        let gt = target.bbox(fs);
        paint(&mut canvas, size, &gt, &target_sprite);

        let gain = 1.0
            + config.illumination_flicker * (std::f64::consts::TAU * t as f64 / flicker_period + flicker_phase).sin();
        let mut bytes = Vec::with_capacity(size * size * 3);
        for &v in &canvas {
            let n = if config.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            bytes.push(((v * gain + n) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
        frames.push(Frame::new(size, size, bytes)?);
        groundtruth.push(gt);
    }
    Ok(Sequence { name: sequence_name(index), frames, groundtruth })
}

pub fn sequence_name(index: usize) -> String {
    format!("seq_{index:03}")
}

pub fn generate(config: &SynthConfig) -> Result<Vec<Sequence>> {
    (0..config.num_sequences).map(|i| generate_sequence(config, i)).collect()
}

/// Generate and write a dataset. Sequences are produced and written one at a
/// time so memory stays bounded by a single sequence.
pub fn write_dataset(dir: &Path, config: &SynthConfig) -> Result<Manifest> {
    config.validate()?;
    mkdir(dir)?;
    let hash = config.hash();
    let mut names = Vec::new();
    for i in 0..config.num_sequences {
        let seq = generate_sequence(config, i)?;
        let meta =
            SequenceMeta { seed: config.seed, stream: i as u64 + 1, config_hash: hash.clone(), frames: seq.len() };
        write_sequence(&dir.join(&seq.name), &seq, &meta)?;
        names.push(seq.name);
    }
    let manifest = Manifest {
        format: "darter-synthetic".into(),
        prng: PRNG_NAME.into(),
        config: config.clone(),
        config_hash: hash,
        sequences: names,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn write_sequence(dir: &Path, seq: &Sequence, meta: &SequenceMeta) -> Result<()> {
    mkdir(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.save_png(&dir.join(frame_file_name(i)))?;
    }
    write_boxes(&dir.join(GROUNDTRUTH), &seq.groundtruth)?;
    write_json(&dir.join(META), meta)
}

pub fn frame_file_name(index: usize) -> String {
    format!("{:08}.png", index + 1)
}

/// Load one sequence directory: all `*.png` frames in name order plus `groundtruth.txt`.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let gt_path = dir.join(GROUNDTRUTH);
    let groundtruth = read_boxes(&gt_path)?;
    let frames = frame_paths(dir)?.iter().map(|p| Frame::load_png(p)).collect::<Result<Vec<_>>>()?;
    if frames.len() != groundtruth.len() {
        return Err(Error::Parse {
            path: gt_path.display().to_string(),
            line: groundtruth.len().min(frames.len()) + 1,
            msg: format!("{} annotation lines for {} frames", groundtruth.len(), frames.len()),
        });
    }
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Sequence { name, frames, groundtruth })
}

pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

/// Sequence directories of a dataset: the manifest order when a manifest is
/// present, otherwise every sub-directory holding a `groundtruth.txt`, sorted.
pub fn sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let manifest = dir.join(MANIFEST);
    if manifest.exists() {
        let m: Manifest = read_json(&manifest)?;
        return Ok(m.sequences.iter().map(|s| dir.join(s)).collect());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(GROUNDTRUTH).is_file())
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sequence>> {
    sequence_dirs(dir)?.iter().map(|d| load_sequence(d)).collect()
}

/// Parse annotation text; errors carry the 1-based line number.
pub fn parse_boxes(text: &str, origin: &str) -> Result<Vec<BBox<f64>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| BBox::parse_line(l).map_err(|msg| Error::Parse { path: origin.to_string(), line: i + 1, msg }))
        .collect()
}

pub fn format_boxes(boxes: &[BBox<f64>]) -> String {
    let mut s = String::with_capacity(boxes.len() * 24);
    for b in boxes {
        s.push_str(&b.to_line());
        s.push('\n');
    }
    s
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_boxes(&text, &path.display().to_string())
}

pub fn write_boxes(path: &Path, boxes: &[BBox<f64>]) -> Result<()> {
    std::fs::write(path, format_boxes(boxes)).map_err(|e| Error::io(path, e))
}

pub(crate) fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Json { path: path.to_path_buf(), msg: e.to_string() })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), msg: e.to_string() })
}
