//! Synthetic untrimmed videos with frame-accurate action annotations, and
//! the `TDVID` container they are stored in.
//!
//! Backgrounds are noisy, slowly drifting colour fields. Each action instance
//! renders one procedural motion pattern: a translating square (class 0), a
//! rotating bar (class 1) or a pulsing disc (class 2). Higher class ids reuse
//! the three patterns with other colours.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VIDEO_MAGIC: &[u8; 8] = b"TDVID\0\0\x01";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Shortest instance the clip sampler can represent with 16 distinct frames.
pub const MIN_INSTANCE_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub instance_len_range: [usize; 2],
    pub min_gap: usize,
    pub max_instances_per_video: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_videos: 48,
            frames_per_video: 300,
            height: 32,
            width: 32,
            num_classes: 3,
            instance_len_range: [32, 48],
            min_gap: 16,
            max_instances_per_video: 3,
            noise_level: 0.2,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.instance_len_range;
        if lo < MIN_INSTANCE_LEN {
            return Err(Error::validation(
                "dataset.instance_len_range",
                format!("minimum instance length {lo} is below {MIN_INSTANCE_LEN}"),
            ));
        }
        if hi < lo {
            return Err(Error::validation(
                "dataset.instance_len_range",
                format!("range [{lo}, {hi}] is empty"),
            ));
        }
        if self.min_gap < 1 {
            return Err(Error::validation("dataset.min_gap", "must be at least 1"));
        }
        if self.num_classes < 1 {
            return Err(Error::validation("dataset.num_classes", "must be at least 1"));
        }
        if self.frames_per_video < hi {
            return Err(Error::validation(
                "dataset.frames_per_video",
                format!("{} frames cannot hold an instance of {hi}", self.frames_per_video),
            ));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::validation(
                "dataset.height",
                "frames must be at least 8×8",
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::validation(
                "dataset.noise_level",
                format!("{} is outside [0, 1]", self.noise_level),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionInstance {
    pub label: usize,
    /// Inclusive.
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
}

impl ActionInstance {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame <= self.start_frame
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: String,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<ActionInstance>,
}

/// RGB frames, `T × H × W × 3` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameVolume {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl FrameVolume {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        let expected = frames * height * width * 3;
        if data.len() != expected {
            return Err(Error::Shape {
                op: "frame volume",
                expected: vec![frames, height, width, 3],
                actual: vec![data.len()],
            });
        }
        Ok(FrameVolume {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for item `index` of a seeded collection.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5EED)))
}

const PALETTE: [[f64; 3]; 6] = [
    [250.0, 30.0, 30.0],
    [30.0, 235.0, 50.0],
    [40.0, 70.0, 250.0],
    [245.0, 230.0, 20.0],
    [235.0, 30.0, 235.0],
    [20.0, 230.0, 235.0],
];

/// Pattern family and colour of an action class.
fn class_style(label: usize) -> (usize, [f64; 3]) {
    let pattern = label % 3;
    let color = PALETTE[(pattern + 3 * (label / 3)) % PALETTE.len()];
    (pattern, color)
}

struct Background {
    base: [f64; 3],
    gradient: [f64; 3],
    drift_amp: f64,
    drift_period: f64,
    drift_phase: f64,
}

/// Per-instance motion parameters; all positions in pixels.
struct Motion {
    center: [f64; 2],
    velocity: [f64; 2],
    angle: f64,
    spin: f64,
    period: f64,
    phase: f64,
}

fn place_instances(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<ActionInstance> {
    let [lo, hi] = spec.instance_len_range;
    if spec.max_instances_per_video == 0 {
        return Vec::new();
    }
    let wanted = rng.gen_range(1..=spec.max_instances_per_video);
    let mut lengths: Vec<usize> = (0..wanted).map(|_| rng.gen_range(lo..=hi)).collect();
    while lengths.len() > 1
        && lengths.iter().sum::<usize>() + (lengths.len() - 1) * spec.min_gap
            > spec.frames_per_video
    {
        lengths.pop();
    }
    let used = lengths.iter().sum::<usize>() + (lengths.len() - 1) * spec.min_gap;
    let slack = spec.frames_per_video - used;
    // Split the slack into len+1 nonnegative parts via sorted cut points.
    let mut cuts: Vec<usize> = (0..lengths.len()).map(|_| rng.gen_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut instances = Vec::with_capacity(lengths.len());
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (i, (&len, &cut)) in lengths.iter().zip(&cuts).enumerate() {
        cursor += cut - prev_cut + if i > 0 { spec.min_gap } else { 0 };
        prev_cut = cut;
        instances.push(ActionInstance {
            label: rng.gen_range(0..spec.num_classes),
            start_frame: cursor,
            end_frame: cursor + len,
        });
        cursor += len;
    }
    instances
}

fn random_motion(h: f64, w: f64, rng: &mut ChaCha8Rng) -> Motion {
    let speed = rng.gen_range(0.6..1.4);
    let heading = rng.gen_range(0.0..2.0 * PI);
    let spin = rng.gen_range(0.15..0.3) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
    Motion {
        center: [
            rng.gen_range(0.35 * h..0.65 * h),
            rng.gen_range(0.35 * w..0.65 * w),
        ],
        velocity: [speed * heading.sin(), speed * heading.cos()],
        angle: rng.gen_range(0.0..PI),
        spin,
        period: rng.gen_range(10.0..18.0),
        phase: rng.gen_range(0.0..2.0 * PI),
    }
}

/// Reflects a coordinate into `[lo, hi]` (triangle wave).
fn bounce(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (x - lo).rem_euclid(2.0 * span);
    lo + if m > span { 2.0 * span - m } else { m }
}

/// Coverage test of the pattern at pixel centre `(y, x)` after `u` frames.
fn pattern_covers(pattern: usize, m: &Motion, u: f64, h: f64, w: f64, y: f64, x: f64) -> bool {
    let size = h.min(w);
    match pattern {
        0 => {
            let half = 0.23 * size;
            let cy = bounce(m.center[0] + m.velocity[0] * u, half, h - half);
            let cx = bounce(m.center[1] + m.velocity[1] * u, half, w - half);
            (y - cy).abs() <= half && (x - cx).abs() <= half
        }
        1 => {
            let theta = m.angle + m.spin * u;
            let (dy, dx) = (y - m.center[0], x - m.center[1]);
            let along = dx * theta.cos() + dy * theta.sin();
            let across = -dx * theta.sin() + dy * theta.cos();
            along.abs() <= 0.42 * size && across.abs() <= 0.14 * size
        }
        _ => {
            let r = size * (0.35 + 0.08 * (2.0 * PI * u / m.period + m.phase).sin());
            let (dy, dx) = (y - m.center[0], x - m.center[1]);
            dy * dy + dx * dx <= r * r
        }
    }
}

fn background_pixel(bg: &Background, t: usize, y: usize, x: usize, h: usize, w: usize) -> [f64; 3] {
    let drift = bg.drift_amp * (2.0 * PI * t as f64 / bg.drift_period + bg.drift_phase).sin();
    let gy = y as f64 / h as f64 - 0.5;
    let gx = x as f64 / w as f64 - 0.5;
    let mut px = [0.0; 3];
    for c in 0..3 {
        px[c] = bg.base[c] + bg.gradient[c] * (gx + 0.5 * gy) + drift;
    }
    px
}

fn random_background(rng: &mut ChaCha8Rng) -> Background {
    let mut channel = |lo: f64, hi: f64| [0; 3].map(|_| rng.gen_range(lo..hi));
    let base = channel(95.0, 160.0);
    let gradient = channel(-30.0, 30.0);
    Background {
        base,
        gradient,
        drift_amp: rng.gen_range(5.0..15.0),
        drift_period: rng.gen_range(150.0..400.0),
        drift_phase: rng.gen_range(0.0..2.0 * PI),
    }
}

/// Renders video `index`; with `draw_actions` off the same random streams are
/// consumed but no pattern is composited, giving the pure background.
fn render_video(spec: &DatasetSpec, index: usize, draw_actions: bool) -> (VideoRecord, FrameVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64));
    let (t_len, h, w) = (spec.frames_per_video, spec.height, spec.width);
    let instances = place_instances(spec, &mut rng);
    let motions: Vec<Motion> = instances
        .iter()
        .map(|_| random_motion(h as f64, w as f64, &mut rng))
        .collect();
    let bg = random_background(&mut rng);
    let noise_amp = 40.0 * spec.noise_level;

    let mut data = Vec::with_capacity(t_len * h * w * 3);
    let mut active = 0;
    for t in 0..t_len {
        while active < instances.len() && instances[active].end_frame <= t {
            active += 1;
        }
        let current = instances
            .get(active)
            .filter(|i| draw_actions && i.start_frame <= t)
            .map(|i| (i, &motions[active]));
        for y in 0..h {
            for x in 0..w {
                let mut px = background_pixel(&bg, t, y, x, h, w);
                for v in px.iter_mut() {
                    *v += noise_amp * rng.gen_range(-1.0..1.0);
                }
                if let Some((inst, motion)) = current {
                    let (pattern, color) = class_style(inst.label);
                    let u = (t - inst.start_frame) as f64;
                    let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
                    if pattern_covers(pattern, motion, u, h as f64, w as f64, yc, xc) {
                        px = color;
                    }
                }
                data.extend(px.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
            }
        }
    }
    let record = VideoRecord {
        id: format!("video_{index:05}"),
        num_frames: t_len,
        height: h,
        width: w,
        instances,
    };
    let frames = FrameVolume {
        frames: t_len,
        height: h,
        width: w,
        data,
    };
    (record, frames)
}

/// Generates `spec.num_videos` annotated videos. Each video draws from its own
/// derived seed, so the result does not depend on thread scheduling.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Vec<VideoRecord>, Vec<FrameVolume>)> {
    spec.validate()?;
    Ok((0..spec.num_videos)
        .into_par_iter()
        .map(|i| render_video(spec, i, true))
        .collect::<Vec<_>>()
        .into_iter()
        .unzip())
}

/// The frames of video `index` with every action pattern left out.
pub fn render_background_only(spec: &DatasetSpec, index: usize) -> FrameVolume {
    render_video(spec, index, false).1
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoHeader {
    id: String,
    num_frames: usize,
    height: usize,
    width: usize,
    instances: Vec<ActionInstance>,
}

pub fn encode_video(record: &VideoRecord, frames: &FrameVolume) -> Result<Vec<u8>> {
    if frames.frames != record.num_frames
        || frames.height != record.height
        || frames.width != record.width
        || frames.data.len() != record.num_frames * record.height * record.width * 3
    {
        return Err(Error::Shape {
            op: "encode_video",
            expected: vec![record.num_frames, record.height, record.width, 3],
            actual: vec![frames.frames, frames.height, frames.width, frames.data.len()],
        });
    }
    let header = VideoHeader {
        id: record.id.clone(),
        num_frames: record.num_frames,
        height: record.height,
        width: record.width,
        instances: record.instances.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + frames.data.len());
    out.extend_from_slice(VIDEO_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&frames.data);
    Ok(out)
}

fn json_error_offset(json: &[u8], err: &serde_json::Error) -> usize {
    let line_start: usize = json
        .split(|&b| b == b'\n')
        .take(err.line().saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum();
    (line_start + err.column().saturating_sub(1)).min(json.len())
}

/// Parses a `TDVID` byte buffer; `path` is only used in error messages.
pub fn decode_video(bytes: &[u8], path: &Path) -> Result<(VideoRecord, FrameVolume)> {
    if bytes.len() < 8 || &bytes[..8] != VIDEO_MAGIC {
        return Err(Error::UnrecognizedFormat {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < 12 {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected: 12,
            actual: bytes.len() as u64,
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected: header_end as u64,
            actual: bytes.len() as u64,
        });
    }
    let json = &bytes[12..header_end];
    let header: VideoHeader = serde_json::from_slice(json).map_err(|e| Error::HeaderParse {
        path: path.to_path_buf(),
        offset: 12 + json_error_offset(json, &e),
        message: e.to_string(),
    })?;
    let payload = &bytes[header_end..];
    let expected = header.num_frames * header.height * header.width * 3;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: payload.len() as u64,
        });
    }
    let frames = FrameVolume {
        frames: header.num_frames,
        height: header.height,
        width: header.width,
        data: payload.to_vec(),
    };
    let record = VideoRecord {
        id: header.id,
        num_frames: header.num_frames,
        height: header.height,
        width: header.width,
        instances: header.instances,
    };
    Ok((record, frames))
}

pub fn encode_video_file(record: &VideoRecord, frames: &FrameVolume, path: &Path) -> Result<u64> {
    let bytes = encode_video(record, frames)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn decode_video_file(path: &Path) -> Result<(VideoRecord, FrameVolume)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_video(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub videos: Vec<String>,
}

/// Writes every video as `<id>.tdvid` plus `manifest.json` into `dir`.
pub fn write_dataset(
    dir: &Path,
    spec: &DatasetSpec,
    records: &[VideoRecord],
    frames: &[FrameVolume],
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut videos = Vec::with_capacity(records.len());
    for (record, volume) in records.iter().zip(frames) {
        let name = format!("{}.tdvid", record.id);
        encode_video_file(record, volume, &dir.join(&name))?;
        videos.push(name);
    }
    let manifest = Manifest {
        spec: spec.clone(),
        videos,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::HeaderParse {
        offset: json_error_offset(text.as_bytes(), &e),
        path,
        message: e.to_string(),
    })
}

/// A decoded dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub records: Vec<VideoRecord>,
    pub frames: Vec<FrameVolume>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let (records, frames) = generate_dataset(spec)?;
        Ok(Dataset {
            spec: spec.clone(),
            records,
            frames,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let mut records = Vec::with_capacity(manifest.videos.len());
        let mut frames = Vec::with_capacity(manifest.videos.len());
        for name in &manifest.videos {
            let path: PathBuf = dir.join(name);
            let (r, f) = decode_video_file(&path)?;
            records.push(r);
            frames.push(f);
        }
        Ok(Dataset {
            spec: manifest.spec,
            records,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
