//! From per-clip head outputs to ranked temporal detections.
//!
//! Each clip's class probabilities are scaled by its predicted actionness and
//! by a video-level softmax weight over the non-action probabilities of all
//! clips of the video (`w_m ∝ exp(−α p_b^m)`), optionally rescored with a
//! per-class duration prior, then reduced with per-class temporal NMS.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clipper::Window;
use crate::error::{Error, Result};
use crate::net3d::layers::softmax;
use crate::net3d::model::NetOutputs;
use crate::synthvid::ActionInstance;

#[derive(Clone, Debug, PartialEq)]
pub struct ClipScores {
    pub window: Window,
    /// Probability that the clip is background.
    pub p_b: f64,
    /// Class probabilities over `N + 1` categories (background last).
    pub p_l: Vec<f64>,
    pub p_a: f64,
}

impl ClipScores {
    pub fn from_outputs(window: Window, out: &NetOutputs) -> Self {
        let prop = softmax(&out.prop_logits);
        ClipScores {
            window,
            p_b: prop[1],
            p_l: softmax(&out.cls_logits),
            p_a: out.actionness,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocConfig {
    /// Temperature of the video-level weighting.
    pub alpha: f64,
    pub nms_delta: f64,
    /// Keep at most this many detections per video; `None` keeps all.
    pub top_k: Option<usize>,
    pub duration_prior_enabled: bool,
    pub prior_smoothing: f64,
    /// Scale class scores by predicted actionness; off replaces `p_a` by 1.
    pub use_actionness: bool,
    /// Drop clips whose background probability exceeds this value.
    pub discard_background_above: Option<f64>,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        PostprocConfig {
            alpha: 1.0,
            nms_delta: 0.4,
            top_k: None,
            duration_prior_enabled: false,
            prior_smoothing: 1.0,
            use_actionness: true,
            discard_background_above: None,
        }
    }
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation("postproc.alpha", "must be finite and ≥ 0"));
        }
        if !(0.0..1.0).contains(&self.nms_delta) {
            return Err(Error::validation("postproc.nms_delta", "must lie in [0, 1)"));
        }
        if !(self.prior_smoothing > 0.0) {
            return Err(Error::validation("postproc.prior_smoothing", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub video_id: String,
    pub label: usize,
    pub start_frame: usize,
    pub end_frame: usize,
    pub score: f64,
}

/// Smoothed per-class frequency of window lengths among training instances.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationPrior {
    lengths: Vec<usize>,
    counts: Vec<Vec<usize>>,
    smoothing: f64,
}

impl DurationPrior {
    /// `counts[class][i]` counts instances whose duration maps to `lengths[i]`.
    pub fn from_counts(lengths: Vec<usize>, counts: Vec<Vec<usize>>, smoothing: f64) -> Self {
        DurationPrior {
            lengths,
            counts,
            smoothing,
        }
    }

    /// Assigns each instance to the window length closest to its duration
    /// (ties to the shorter length).
    pub fn from_instances<'a>(
        instances: impl IntoIterator<Item = &'a ActionInstance>,
        num_classes: usize,
        lengths: &[usize],
        smoothing: f64,
    ) -> Self {
        let mut counts = vec![vec![0; lengths.len()]; num_classes];
        for inst in instances {
            let d = inst.len();
            if let Some((i, _)) = lengths
                .iter()
                .enumerate()
                .min_by_key(|(_, &l)| (l as i64 - d as i64).abs())
            {
                if let Some(row) = counts.get_mut(inst.label) {
                    row[i] += 1;
                }
            }
        }
        Self::from_counts(lengths.to_vec(), counts, smoothing)
    }

    /// `(count + ε) / (Σ counts + ε · |lengths|)`; unseen lengths count 0.
    pub fn prob(&self, class: usize, length: usize) -> f64 {
        let row = self.counts.get(class);
        let total: usize = row.map_or(0, |r| r.iter().sum());
        let count = row
            .and_then(|r| self.lengths.iter().position(|&l| l == length).map(|i| r[i]))
            .unwrap_or(0);
        (count as f64 + self.smoothing)
            / (total as f64 + self.smoothing * self.lengths.len() as f64)
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }
}

/// Clip-level refinement: class probabilities scaled by actionness.
pub fn refine_clip(scores: &ClipScores) -> Vec<f64> {
    scores.p_l.iter().map(|p| scores.p_a * p).collect()
}

/// `w_m = exp(−α p_b^m) / Σ_n exp(−α p_b^n)`.
pub fn video_weights(p_b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if p_b.is_empty() {
        return Err(Error::Empty("clip list"));
    }
    let logits: Vec<f64> = p_b.iter().map(|&p| -alpha * p).collect();
    Ok(softmax(&logits))
}

pub fn duration_rescore(score: f64, length: usize, class: usize, prior: &DurationPrior) -> f64 {
    score * prior.prob(class, length)
}

/// Intersection over union of `[s, e)` intervals.
pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Score descending, then earlier start, then longer segment.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.start_frame.cmp(&b.start_frame))
        .then(b.end_frame.cmp(&a.end_frame))
}

/// Greedy NMS: keep the best remaining candidate and drop every remaining
/// candidate whose tIoU with it exceeds `delta`.
pub fn temporal_nms(mut candidates: Vec<Detection>, delta: f64) -> Vec<Detection> {
    candidates.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::new();
    for cand in candidates {
        let span = (cand.start_frame, cand.end_frame);
        if kept
            .iter()
            .all(|k| temporal_iou((k.start_frame, k.end_frame), span) <= delta)
        {
            kept.push(cand);
        }
    }
    kept
}

/// Full post-processing chain for the clips of one video.
pub fn detect_video(
    clips: &[ClipScores],
    num_classes: usize,
    cfg: &PostprocConfig,
    prior: Option<&DurationPrior>,
) -> Vec<Detection> {
    let clips: Vec<&ClipScores> = clips
        .iter()
        .filter(|c| cfg.discard_background_above.is_none_or(|th| c.p_b <= th))
        .collect();
    if clips.is_empty() {
        return Vec::new();
    }
    let p_b: Vec<f64> = clips.iter().map(|c| c.p_b).collect();
    let weights = video_weights(&p_b, cfg.alpha).expect("non-empty");

    let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); num_classes];
    for (clip, w) in clips.iter().zip(&weights) {
        let p_a = if cfg.use_actionness { clip.p_a } else { 1.0 };
        for (class, bucket) in per_class.iter_mut().enumerate() {
            let mut score = w * (p_a * clip.p_l[class]);
            if cfg.duration_prior_enabled {
                if let Some(prior) = prior {
                    score = duration_rescore(score, clip.window.length, class, prior);
                }
            }
            bucket.push(Detection {
                video_id: clip.window.video_id.clone(),
                label: class,
                start_frame: clip.window.start,
                end_frame: clip.window.end(),
                score,
            });
        }
    }
    let mut out: Vec<Detection> = per_class
        .into_iter()
        .flat_map(|c| temporal_nms(c, cfg.nms_delta))
        .collect();
    out.sort_by(|a, b| rank_order(a, b).then(a.label.cmp(&b.label)));
    if let Some(k) = cfg.top_k {
        out.truncate(k);
    }
    out
}

/// Orders detections by video id, then descending score.
pub fn sort_for_output(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(rank_order(a, b))
            .then(a.label.cmp(&b.label))
    });
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut sorted = dets.to_vec();
    sort_for_output(&mut sorted);
    let json = serde_json::to_string_pretty(&sorted).expect("detections serialize");
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::HeaderParse {
        path: path.to_path_buf(),
        offset: 0,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(s: usize, e: usize, score: f64) -> Detection {
        Detection {
            video_id: "v".into(),
            label: 0,
            start_frame: s,
            end_frame: e,
            score,
        }
    }

    fn clip(start: usize, length: usize, p_b: f64, p_l: Vec<f64>, p_a: f64) -> ClipScores {
        ClipScores {
            window: Window {
                video_id: "v".into(),
                start,
                length,
            },
            p_b,
            p_l,
            p_a,
        }
    }

    #[test]
    fn refine_cases() {
        let c = clip(0, 16, 0.1, vec![0.2, 0.8], 1.0);
        assert_eq!(refine_clip(&c), vec![0.2, 0.8]);
        let c = clip(0, 16, 0.1, vec![0.2, 0.8], 0.5);
        assert_eq!(refine_clip(&c), vec![0.1, 0.4]);
    }

    #[test]
    fn weights_cases() {
        let w = video_weights(&[0.3; 5], 2.0).unwrap();
        assert!(w.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let w = video_weights(&[0.1, 0.9, 0.4], 0.0).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let w = video_weights(&[0.0, 1.0], 2f64.ln()).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!(video_weights(&[], 1.0).is_err());
    }

    #[test]
    fn prior_cases() {
        let lengths = vec![16, 32, 64, 128, 256, 512];
        let prior = DurationPrior::from_counts(lengths.clone(), vec![vec![3, 1, 0, 0, 0, 0]], 1.0);
        assert!((prior.prob(0, 16) - 0.4).abs() < 1e-15);
        assert!((prior.prob(0, 100) - 0.1).abs() < 1e-15);
        let single = DurationPrior::from_counts(vec![32], vec![vec![5], vec![0]], 1.0);
        assert_eq!(single.prob(0, 32), 1.0);
        assert_eq!(single.prob(1, 32), 1.0);
        let inst = [ActionInstance {
            label: 0,
            start_frame: 0,
            end_frame: 40,
        }];
        let p = DurationPrior::from_instances(&inst, 1, &[32, 64], 1.0);
        assert!((p.prob(0, 32) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tiou_cases() {
        assert!((temporal_iou((10, 20), (15, 25)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(temporal_iou((3, 9), (3, 9)), 1.0);
        assert_eq!(temporal_iou((0, 5), (5, 9)), 0.0);
    }

    #[test]
    fn nms_hand_case() {
        let kept = temporal_nms(
            vec![det(0, 10, 0.9), det(2, 12, 0.8), det(20, 30, 0.7)],
            0.5,
        );
        let spans: Vec<_> = kept.iter().map(|d| (d.start_frame, d.score)).collect();
        assert_eq!(spans, vec![(0, 0.9), (20, 0.7)]);
    }

    #[test]
    fn nms_strict_inequality() {
        let kept = temporal_nms(vec![det(0, 10, 0.9), det(0, 10, 0.5), det(1, 10, 0.4)], 0.95);
        assert_eq!(kept.len(), 2);
        // δ = 0 suppresses any overlap but keeps disjoint segments
        let kept = temporal_nms(vec![det(0, 10, 0.9), det(9, 12, 0.5), det(10, 20, 0.4)], 0.0);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_tie_break_prefers_earlier_then_longer() {
        let kept = temporal_nms(vec![det(4, 10, 0.5), det(2, 10, 0.5), det(2, 12, 0.5)], 0.1);
        assert_eq!((kept[0].start_frame, kept[0].end_frame), (2, 12));
    }

    #[test]
    fn single_clip_chain() {
        let c = clip(32, 64, 1e-9, vec![1.0 - 2e-9, 1e-9, 1e-9], 1.0 - 1e-9);
        let dets = detect_video(&[c], 2, &PostprocConfig::default(), None);
        assert_eq!(dets[0].label, 0);
        assert_eq!((dets[0].start_frame, dets[0].end_frame), (32, 96));
        assert!((dets[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn disjoint_windows_both_survive() {
        let a = clip(0, 16, 0.1, vec![0.9, 0.05, 0.05], 0.9);
        let b = clip(32, 16, 0.1, vec![0.05, 0.9, 0.05], 0.9);
        for delta in [0.0, 0.4, 0.9] {
            let cfg = PostprocConfig {
                nms_delta: delta,
                top_k: Some(2),
                ..PostprocConfig::default()
            };
            let dets = detect_video(&[a.clone(), b.clone()], 2, &cfg, None);
            let mut got: Vec<_> = dets.iter().map(|d| (d.label, d.start_frame)).collect();
            got.sort();
            assert_eq!(got, vec![(0, 0), (1, 32)]);
        }
    }

    #[test]
    fn background_clips_are_suppressed_not_dropped() {
        let a = clip(0, 16, 0.99, vec![0.4, 0.1, 0.5], 0.2);
        let dets = detect_video(&[a.clone()], 2, &PostprocConfig::default(), None);
        assert_eq!(dets.len(), 2);
        let cfg = PostprocConfig {
            discard_background_above: Some(0.5),
            ..PostprocConfig::default()
        };
        assert!(detect_video(&[a], 2, &cfg, None).is_empty());
        assert!(detect_video(&[], 2, &PostprocConfig::default(), None).is_empty());
    }

    #[test]
    fn prior_disabled_leaves_scores() {
        let a = clip(0, 16, 0.2, vec![0.7, 0.3], 0.8);
        let prior = DurationPrior::from_counts(vec![16, 32], vec![vec![0, 9]], 1.0);
        let off = detect_video(&[a.clone()], 1, &PostprocConfig::default(), Some(&prior));
        let on_cfg = PostprocConfig {
            duration_prior_enabled: true,
            ..PostprocConfig::default()
        };
        let on = detect_video(&[a], 1, &on_cfg, Some(&prior));
        assert!((off[0].score - 0.56).abs() < 1e-12);
        assert!((on[0].score - 0.56 * prior.prob(0, 16)).abs() < 1e-12);
    }
}
