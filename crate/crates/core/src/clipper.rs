//! Multi-scale temporal sliding windows and per-clip training labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthvid::ActionInstance;
use crate::tensor::Tensor;

/// Frames sampled from every window.
pub const CLIP_FRAMES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    /// Window lengths in frames, strictly increasing.
    pub lengths: Vec<usize>,
    /// Sliding stride for each entry of `lengths`.
    pub strides: Vec<usize>,
}

impl Default for WindowSpec {
    fn default() -> Self {
        let lengths = vec![16, 32, 64, 128, 256, 512];
        let strides = lengths
            .iter()
            .map(|&l| if l <= 32 { 16 } else { 32 })
            .collect();
        WindowSpec { lengths, strides }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() {
            return Err(Error::validation("windows.lengths", "at least one length required"));
        }
        if self.strides.len() != self.lengths.len() {
            return Err(Error::validation(
                "windows.strides",
                format!(
                    "{} strides given for {} lengths",
                    self.strides.len(),
                    self.lengths.len()
                ),
            ));
        }
        if self.lengths[0] < CLIP_FRAMES {
            return Err(Error::validation(
                "windows.lengths",
                format!("length {} is below {CLIP_FRAMES}", self.lengths[0]),
            ));
        }
        if self.lengths.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::validation("windows.lengths", "must be strictly increasing"));
        }
        if self.strides.contains(&0) {
            return Err(Error::validation("windows.strides", "must be at least 1"));
        }
        Ok(())
    }

    pub fn stride(&self, length: usize) -> Option<usize> {
        self.lengths
            .iter()
            .position(|&l| l == length)
            .map(|i| self.strides[i])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub video_id: String,
    pub start: usize,
    pub length: usize,
}

impl Window {
    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

/// All windows that fit inside a video of `num_frames` frames, ordered by
/// (length, start). Lengths longer than the video contribute nothing.
pub fn enumerate_windows(video_id: &str, num_frames: usize, spec: &WindowSpec) -> Vec<Window> {
    let mut out = Vec::new();
    for (&length, &stride) in spec.lengths.iter().zip(&spec.strides) {
        if length > num_frames {
            continue;
        }
        let count = (num_frames - length) / stride + 1;
        out.extend((0..count).map(|k| Window {
            video_id: video_id.to_string(),
            start: k * stride,
            length,
        }));
    }
    out
}

/// `start + floor(i · length / 16)` for `i = 0..16`.
pub fn sample_frame_indices(window: &Window) -> [usize; CLIP_FRAMES] {
    std::array::from_fn(|i| window.start + i * window.length / CLIP_FRAMES)
}

/// Frames shared by `[a0, a1)` and `[b0, b1)`.
pub fn overlap(a0: usize, a1: usize, b0: usize, b1: usize) -> usize {
    a1.min(b1).saturating_sub(a0.max(b0))
}

/// Fraction of the window covered by (pairwise disjoint) action instances.
pub fn temporal_actionness(window: &Window, instances: &[ActionInstance]) -> f64 {
    let covered: usize = instances
        .iter()
        .map(|i| overlap(window.start, window.end(), i.start_frame, i.end_frame))
        .sum();
    covered as f64 / window.length as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proposal {
    Action,
    Background,
}

impl Proposal {
    /// Index into the two proposal logits.
    pub fn index(self) -> usize {
        match self {
            Proposal::Action => 0,
            Proposal::Background => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipLabel {
    pub proposal: Proposal,
    /// Action class in `[0, N)`, or `N` for background.
    pub category: usize,
    pub actionness: f64,
}

/// Default actionness at or above which a clip counts as an action clip.
pub const DEFAULT_POSITIVE_THRESHOLD: f64 = 0.5;

/// Labels a window: action iff actionness ≥ `positive_threshold`, with the
/// category of the instance overlapping it most (ties to the smaller id).
pub fn assign_labels(
    window: &Window,
    instances: &[ActionInstance],
    num_classes: usize,
    positive_threshold: f64,
) -> ClipLabel {
    let actionness = temporal_actionness(window, instances);
    if actionness > 0.0 && actionness >= positive_threshold {
        let (_, category) = instances
            .iter()
            .map(|i| {
                (
                    overlap(window.start, window.end(), i.start_frame, i.end_frame),
                    i.label,
                )
            })
            .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
            .expect("positive actionness implies an instance");
        ClipLabel {
            proposal: Proposal::Action,
            category,
            actionness,
        }
    } else {
        ClipLabel {
            proposal: Proposal::Background,
            category: num_classes,
            actionness,
        }
    }
}

/// A preprocessed network input: 16 frames of `C × H' × W'`.
#[derive(Clone, Debug)]
pub struct Clip {
    pub window: Window,
    pub frame_indices: [usize; CLIP_FRAMES],
    pub pixels: Tensor,
}
