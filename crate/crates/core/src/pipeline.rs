//! Inference over whole videos: enumerate windows, preprocess, run the
//! network in eval mode and post-process into detections.

use rayon::prelude::*;

use crate::augment::{eval_clip, AugmentConfig};
use crate::clipper::{enumerate_windows, sample_frame_indices, WindowSpec};
use crate::error::{Error, Result};
use crate::net3d::model::{forward, ArchConfig, Mode, NetParams};
use crate::postproc::{detect_video, ClipScores, Detection, DurationPrior, PostprocConfig};
use crate::synthvid::{FrameVolume, VideoRecord};

/// Inputs shared by every video of an inference run.
#[derive(Clone, Copy)]
pub struct Inference<'a> {
    pub params: &'a NetParams,
    pub arch: &'a ArchConfig,
    pub windows: &'a WindowSpec,
    pub augment: &'a AugmentConfig,
    pub postproc: &'a PostprocConfig,
    pub prior: Option<&'a DurationPrior>,
}

/// The crop produced by preprocessing must be what the network expects.
pub fn check_compatible(arch: &ArchConfig, augment: &AugmentConfig) -> Result<()> {
    let want = [arch.input.channels, arch.input.height, arch.input.width];
    let got = [3, augment.crop_h, augment.crop_w];
    if want != got {
        return Err(Error::Shape {
            op: "model input",
            expected: want.to_vec(),
            actual: got.to_vec(),
        });
    }
    Ok(())
}

pub fn score_video(
    inf: &Inference<'_>,
    record: &VideoRecord,
    volume: &FrameVolume,
) -> Result<Vec<ClipScores>> {
    enumerate_windows(&record.id, volume.frames, inf.windows)
        .into_par_iter()
        .map(|window| {
            let clip = eval_clip(volume, &sample_frame_indices(&window), inf.augment)?;
            let (out, _) = forward(inf.params, inf.arch, &clip, Mode::Eval)?;
            Ok(ClipScores::from_outputs(window, &out))
        })
        .collect()
}

pub fn detect_videos(
    inf: &Inference<'_>,
    records: &[VideoRecord],
    volumes: &[FrameVolume],
) -> Result<Vec<Detection>> {
    check_compatible(inf.arch, inf.augment)?;
    let mut out = Vec::new();
    for (record, volume) in records.iter().zip(volumes) {
        let scores = score_video(inf, record, volume)?;
        out.extend(detect_video(
            &scores,
            inf.arch.num_action_classes,
            inf.postproc,
            inf.prior,
        ));
    }
    Ok(out)
}
