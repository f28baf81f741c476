//! Spatial preprocessing and training-time augmentation: bilinear resize,
//! corner/centre crops, whole-clip horizontal flip and random shear.
//!
//! Every transform is a convex resampling with border replication, so outputs
//! never leave the value range of their input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clipper::CLIP_FRAMES;
use crate::error::{Error, Result};
use crate::synthvid::FrameVolume;
use crate::tensor::Tensor;

/// `H × W × C` interleaved real image.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape {
                op: "frame",
                expected: vec![height, width, channels],
                actual: vec![data.len()],
            });
        }
        Ok(Frame {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Frame {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Frame `t` of a byte volume mapped to `v / 255 − 0.5`.
    pub fn from_volume(volume: &FrameVolume, t: usize) -> Self {
        let data = volume
            .frame(t)
            .iter()
            .map(|&v| v as f64 / 255.0 - 0.5)
            .collect();
        Frame {
            height: volume.height,
            width: volume.width,
            channels: 3,
            data,
        }
    }

    pub fn flipped(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let p = (y * self.width + x) * self.channels;
                out.extend_from_slice(&self.data[p..p + self.channels]);
            }
        }
        Frame {
            data: out,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShearAxis {
    Horizontal,
    Vertical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub resize_h: usize,
    pub resize_w: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub flip_prob: f64,
    /// Shear angles are drawn uniformly from `[-shear_max_deg, shear_max_deg]`.
    pub shear_max_deg: f64,
    pub corner_crop: bool,
    pub flip: bool,
    pub shear: bool,
    pub shear_axis: ShearAxis,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl AugmentConfig {
    pub fn paper() -> Self {
        AugmentConfig {
            resize_h: 128,
            resize_w: 171,
            crop_h: 112,
            crop_w: 112,
            flip_prob: 0.5,
            shear_max_deg: 25.0,
            corner_crop: true,
            flip: true,
            shear: true,
            shear_axis: ShearAxis::Horizontal,
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        AugmentConfig {
            resize_h: 36,
            resize_w: 36,
            crop_h: 32,
            crop_w: 32,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_h == 0 || self.crop_w == 0 {
            return Err(Error::validation("augment.crop_h", "crop must be non-empty"));
        }
        if self.crop_h > self.resize_h {
            return Err(Error::validation(
                "augment.crop_h",
                format!("crop {} exceeds resize {}", self.crop_h, self.resize_h),
            ));
        }
        if self.crop_w > self.resize_w {
            return Err(Error::validation(
                "augment.crop_w",
                format!("crop {} exceeds resize {}", self.crop_w, self.resize_w),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::validation("augment.flip_prob", "must lie in [0, 1]"));
        }
        if !(0.0..45.0).contains(&self.shear_max_deg) {
            return Err(Error::validation("augment.shear_max_deg", "must lie in [0, 45)"));
        }
        Ok(())
    }
}

/// `a + f (b − a)` clamped to the segment, exact when `a == b` or `f == 0`.
#[inline]
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    (a + f * (b - a)).clamp(a.min(b), a.max(b))
}

/// Source coordinate of output index `d` for a half-pixel-centred resize.
#[inline]
fn resize_coord(d: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let s = ((d as f64 + 0.5) * (input as f64 / output as f64) - 0.5).clamp(0.0, (input - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(input - 1);
    (i0, i1, s - i0 as f64)
}

pub fn resize_bilinear(frame: &Frame, out_h: usize, out_w: usize) -> Frame {
    let c = frame.channels;
    let cols: Vec<_> = (0..out_w)
        .map(|x| resize_coord(x, frame.width, out_w))
        .collect();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, fy) = resize_coord(y, frame.height, out_h);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = lerp(frame.at(y0, x0, ch), frame.at(y0, x1, ch), fx);
                let bottom = lerp(frame.at(y1, x0, ch), frame.at(y1, x1, ch), fx);
                data.push(lerp(top, bottom, fy));
            }
        }
    }
    Frame {
        height: out_h,
        width: out_w,
        channels: c,
        data,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropPosition {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl CropPosition {
    pub const ALL: [CropPosition; 5] = [
        CropPosition::TopLeft,
        CropPosition::TopRight,
        CropPosition::BottomLeft,
        CropPosition::BottomRight,
        CropPosition::Center,
    ];

    /// `(row, column)` offset of the crop inside an `h × w` frame.
    pub fn offset(self, h: usize, w: usize, crop_h: usize, crop_w: usize) -> (usize, usize) {
        let (dy, dx) = (h - crop_h, w - crop_w);
        match self {
            CropPosition::TopLeft => (0, 0),
            CropPosition::TopRight => (0, dx),
            CropPosition::BottomLeft => (dy, 0),
            CropPosition::BottomRight => (dy, dx),
            CropPosition::Center => (dy / 2, dx / 2),
        }
    }
}

pub fn corner_crop(
    frame: &Frame,
    crop_h: usize,
    crop_w: usize,
    position: CropPosition,
) -> Result<Frame> {
    if crop_h > frame.height || crop_w > frame.width {
        return Err(Error::validation(
            "crop",
            format!(
                "{crop_h}×{crop_w} crop does not fit a {}×{} frame",
                frame.height, frame.width
            ),
        ));
    }
    let (oy, ox) = position.offset(frame.height, frame.width, crop_h, crop_w);
    let c = frame.channels;
    let mut data = Vec::with_capacity(crop_h * crop_w * c);
    for y in oy..oy + crop_h {
        let row = (y * frame.width + ox) * c;
        data.extend_from_slice(&frame.data[row..row + crop_w * c]);
    }
    Ok(Frame {
        height: crop_h,
        width: crop_w,
        channels: c,
        data,
    })
}

/// Reverses the width axis of a `T × C × H × W` clip.
pub fn horizontal_flip(clip: &Tensor) -> Tensor {
    let w = *clip.shape().last().unwrap_or(&1);
    let mut out = clip.clone();
    for row in out.data_mut().chunks_mut(w.max(1)) {
        row.reverse();
    }
    out
}

/// Shears about the frame centre, sampling with linear interpolation and
/// replicating the border; the output keeps the input size.
pub fn shear_frame(frame: &Frame, theta_deg: f64, axis: ShearAxis) -> Frame {
    let (h, w, c) = (frame.height, frame.width, frame.channels);
    let k = (theta_deg * std::f64::consts::PI / 180.0).tan();
    let mut data = Vec::with_capacity(frame.data.len());
    match axis {
        ShearAxis::Horizontal => {
            let cy = (h as f64 - 1.0) / 2.0;
            for y in 0..h {
                let shift = k * (y as f64 - cy);
                for x in 0..w {
                    let s = (x as f64 + shift).clamp(0.0, (w - 1) as f64);
                    let x0 = s.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let f = s - x0 as f64;
                    for ch in 0..c {
                        data.push(lerp(frame.at(y, x0, ch), frame.at(y, x1, ch), f));
                    }
                }
            }
        }
        ShearAxis::Vertical => {
            let cx = (w as f64 - 1.0) / 2.0;
            for y in 0..h {
                for x in 0..w {
                    let s = (y as f64 + k * (x as f64 - cx)).clamp(0.0, (h - 1) as f64);
                    let y0 = s.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let f = s - y0 as f64;
                    for ch in 0..c {
                        data.push(lerp(frame.at(y0, x, ch), frame.at(y1, x, ch), f));
                    }
                }
            }
        }
    }
    Frame { data, ..*frame }
}

/// Random choices made for one clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub crop: CropPosition,
    pub flip: bool,
    pub shear_deg: f64,
}

/// Packs equally sized frames into a `T × C × H × W` tensor.
pub fn frames_to_clip(frames: &[Frame]) -> Result<Tensor> {
    let first = frames.first().ok_or(Error::Empty("clip"))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = vec![0.0; frames.len() * c * h * w];
    for (t, f) in frames.iter().enumerate() {
        if (f.height, f.width, f.channels) != (h, w, c) {
            return Err(Error::Shape {
                op: "frames_to_clip",
                expected: vec![h, w, c],
                actual: vec![f.height, f.width, f.channels],
            });
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[((t * c + ch) * h + y) * w + x] = f.at(y, x, ch);
                }
            }
        }
    }
    Tensor::from_vec(&[frames.len(), c, h, w], data)
}

/// Draws crop position, flip and shear angle once and applies them to every
/// frame in the order crop → flip → shear. Frames must already be resized.
pub fn augment_clip<R: Rng + ?Sized>(
    frames: &[Frame],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor, AugmentDraw)> {
    let crop = if cfg.corner_crop {
        CropPosition::ALL[rng.gen_range(0..CropPosition::ALL.len())]
    } else {
        CropPosition::Center
    };
    let flip = cfg.flip && rng.gen::<f64>() < cfg.flip_prob;
    let shear_deg = if cfg.shear && cfg.shear_max_deg > 0.0 {
        rng.gen_range(-cfg.shear_max_deg..=cfg.shear_max_deg)
    } else {
        0.0
    };
    let draw = AugmentDraw {
        crop,
        flip,
        shear_deg,
    };
    let out = frames
        .iter()
        .map(|f| {
            let mut g = corner_crop(f, cfg.crop_h, cfg.crop_w, crop)?;
            if flip {
                g = g.flipped();
            }
            if shear_deg != 0.0 {
                g = shear_frame(&g, shear_deg, cfg.shear_axis);
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((frames_to_clip(&out)?, draw))
}

/// Decodes and resizes the 16 sampled frames of a window.
pub fn load_resized(
    volume: &FrameVolume,
    indices: &[usize; CLIP_FRAMES],
    cfg: &AugmentConfig,
) -> Vec<Frame> {
    indices
        .iter()
        .map(|&t| resize_bilinear(&Frame::from_volume(volume, t), cfg.resize_h, cfg.resize_w))
        .collect()
}

/// Evaluation-time preprocessing: resize then centre crop, no randomness.
pub fn eval_clip(
    volume: &FrameVolume,
    indices: &[usize; CLIP_FRAMES],
    cfg: &AugmentConfig,
) -> Result<Tensor> {
    let frames = load_resized(volume, indices, cfg)
        .iter()
        .map(|f| corner_crop(f, cfg.crop_h, cfg.crop_w, CropPosition::Center))
        .collect::<Result<Vec<_>>>()?;
    frames_to_clip(&frames)
}
