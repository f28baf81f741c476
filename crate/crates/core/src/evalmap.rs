//! Per-class average precision at several tIoU thresholds, and mAP.
//!
//! AP uses all-point interpolation over the ranked detection list; a
//! detection is a true positive when it overlaps an unmatched ground truth of
//! the same video and class with tIoU ≥ α, consuming the best-overlapping one.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postproc::{rank_order, temporal_iou, Detection};
use crate::synthvid::VideoRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tiou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tiou_thresholds: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiou_thresholds.is_empty() {
            return Err(Error::validation("eval.tiou_thresholds", "at least one threshold required"));
        }
        if let Some(a) = self.tiou_thresholds.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::validation(
                "eval.tiou_thresholds",
                format!("{a} is outside (0, 1]"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub label: usize,
    pub start_frame: usize,
    pub end_frame: usize,
}

pub fn ground_truth_from_records(records: &[VideoRecord]) -> Vec<GroundTruth> {
    records
        .iter()
        .flat_map(|r| {
            r.instances.iter().map(|i| GroundTruth {
                video_id: r.id.clone(),
                label: i.label,
                start_frame: i.start_frame,
                end_frame: i.end_frame,
            })
        })
        .collect()
}

/// TP/FP flag per detection, in the given (ranked) order. Both slices are
/// expected to hold a single class.
pub fn match_detections(dets: &[&Detection], gts: &[&GroundTruth], alpha: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.video_id != d.video_id {
                    continue;
                }
                let iou = temporal_iou((d.start_frame, d.end_frame), (g.start_frame, g.end_frame));
                if iou >= alpha && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP of a ranked TP/FP list.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            tp as f64 / (i + 1) as f64
        })
        .collect();
    let mut ap = 0.0;
    let mut running_max = 0.0f64;
    for (p, &f) in precision.iter().zip(flags).rev() {
        running_max = running_max.max(*p);
        if f {
            ap += running_max;
        }
    }
    ap / num_gt as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tiou_thresholds: Vec<f64>,
    /// `ap[class][k]` at `tiou_thresholds[k]`.
    pub ap: Vec<Vec<f64>>,
    pub map: Vec<f64>,
    pub num_detections: Vec<usize>,
    pub num_ground_truth: Vec<usize>,
}

impl EvalReport {
    pub fn map_at(&self, alpha: f64) -> Option<f64> {
        self.tiou_thresholds
            .iter()
            .position(|&a| (a - alpha).abs() < 1e-12)
            .map(|k| self.map[k])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for a in &self.tiou_thresholds {
            out.push_str(&format!(",{a}"));
        }
        out.push('\n');
        let mut row = |name: String, values: &[f64]| {
            out.push_str(&name);
            for v in values {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        };
        for (c, ap) in self.ap.iter().enumerate() {
            row(c.to_string(), ap);
        }
        row("mAP".into(), &self.map);
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json` next to each other.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let json_path = csv_path.with_extension("json");
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))
    }
}

pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruth],
    num_classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if let Some(d) = dets.iter().find(|d| d.label >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: d.label,
            num_classes,
        });
    }
    if let Some(g) = gts.iter().find(|g| g.label >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: g.label,
            num_classes,
        });
    }
    let mut ap = vec![vec![0.0; cfg.tiou_thresholds.len()]; num_classes];
    let mut num_detections = vec![0; num_classes];
    let mut num_ground_truth = vec![0; num_classes];
    for class in 0..num_classes {
        let mut class_dets: Vec<&Detection> = dets.iter().filter(|d| d.label == class).collect();
        class_dets.sort_by(|a, b| rank_order(a, b).then(a.video_id.cmp(&b.video_id)));
        let class_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.label == class).collect();
        num_detections[class] = class_dets.len();
        num_ground_truth[class] = class_gts.len();
        for (k, &alpha) in cfg.tiou_thresholds.iter().enumerate() {
            let flags = match_detections(&class_dets, &class_gts, alpha);
            ap[class][k] = average_precision(&flags, class_gts.len());
        }
    }
    let scored: Vec<usize> = (0..num_classes).filter(|&c| num_ground_truth[c] > 0).collect();
    let map = (0..cfg.tiou_thresholds.len())
        .map(|k| {
            if scored.is_empty() {
                0.0
            } else {
                scored.iter().map(|&c| ap[c][k]).sum::<f64>() / scored.len() as f64
            }
        })
        .collect();
    Ok(EvalReport {
        tiou_thresholds: cfg.tiou_thresholds.clone(),
        ap,
        map,
        num_detections,
        num_ground_truth,
    })
}
