//! Class-balanced batches, the five-term multi-task loss and SGD with
//! momentum over fixed learning-rate stages.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_clip, load_resized, AugmentConfig};
use crate::clipper::{
    assign_labels, enumerate_windows, sample_frame_indices, ClipLabel, Window, WindowSpec,
};
use crate::error::{Error, Result};
use crate::evalmap::{evaluate, ground_truth_from_records, EvalConfig};
use crate::net3d::layers::{softmax_cross_entropy, squared_error_loss};
use crate::net3d::model::{
    backward, forward, ArchConfig, HeadGrads, LayerId, Mode, NetOutputs, NetParams,
};
use crate::pipeline::{check_compatible, detect_videos, Inference};
use crate::postproc::PostprocConfig;
use crate::synthvid::{derive_seed, Dataset};
use crate::tensor::Tensor;

/// Names of the five loss terms, in `loss_weights` order.
pub const LOSS_NAMES: [&str; 5] = ["l_prop", "l_cls", "l_aux5", "l_aux6", "l_reg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceMode {
    /// Equal share for each of the `N + 1` categories.
    Categorization,
    /// Half action clips, half background clips.
    Proposal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub base_lr: f64,
    pub head_cls_lr: f64,
    pub lr_decay_factor: f64,
    /// Iterations per stage; stage `k` runs at `lr_decay_factor^k`.
    pub schedule: Vec<usize>,
    pub stop_lr: f64,
    pub loss_weights: [f64; 5],
    /// `(action, background)`; derived from the balancing mode when absent.
    pub proposal_class_weights: Option<[f64; 2]>,
    pub dropout: f64,
    pub balance_mode: BalanceMode,
    pub positive_threshold: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub validation_fraction: f64,
    pub log_every: usize,
    /// Held-out mAP probe cadence; 0 disables it.
    pub probe_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 30,
            momentum: 0.9,
            base_lr: 1e-4,
            head_cls_lr: 1e-2,
            lr_decay_factor: 0.1,
            schedule: vec![600, 600, 300],
            stop_lr: 1e-6,
            loss_weights: [1.0; 5],
            proposal_class_weights: None,
            dropout: 0.5,
            balance_mode: BalanceMode::Categorization,
            positive_threshold: 0.5,
            grad_clip: Some(10.0),
            validation_fraction: 0.1,
            log_every: 10,
            probe_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let cats = num_classes + 1;
        if self.batch_size == 0 {
            return Err(Error::validation("train.batch_size", "must be at least 1"));
        }
        if self.balance_mode == BalanceMode::Categorization && self.batch_size < cats {
            return Err(Error::validation(
                "train.batch_size",
                format!("{} is below the {cats} categories to balance", self.batch_size),
            ));
        }
        for (name, lr) in [
            ("train.base_lr", self.base_lr),
            ("train.head_cls_lr", self.head_cls_lr),
            ("train.stop_lr", self.stop_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::validation(name, "must be finite and > 0"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::validation("train.lr_decay_factor", "must lie in (0, 1]"));
        }
        if self.loss_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::validation("train.loss_weights", "must be finite and ≥ 0"));
        }
        if let Some(w) = self.proposal_class_weights {
            if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::validation("train.proposal_class_weights", "must be > 0"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("train.dropout", "must lie in [0, 1)"));
        }
        if !(self.positive_threshold > 0.0 && self.positive_threshold <= 1.0) {
            return Err(Error::validation("train.positive_threshold", "must lie in (0, 1]"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::validation("train.grad_clip", "must be > 0"));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::validation("train.validation_fraction", "must lie in [0, 1)"));
        }
        if self.log_every == 0 {
            return Err(Error::validation("train.log_every", "must be at least 1"));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.schedule.iter().sum()
    }
}

/// One training clip: a window of a training video and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub video: usize,
    pub window: Window,
    pub label: ClipLabel,
}

/// Training samples grouped by category (`0..N` actions, `N` background).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPool {
    pub samples: Vec<Sample>,
    pub by_category: Vec<Vec<usize>>,
}

impl LabeledPool {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        let mut by_category = vec![Vec::new(); num_classes + 1];
        for (i, s) in samples.iter().enumerate() {
            let slot = by_category
                .get_mut(s.label.category)
                .ok_or(Error::LabelOutOfRange {
                    label: s.label.category,
                    num_classes,
                })?;
            slot.push(i);
        }
        Ok(LabeledPool {
            samples,
            by_category,
        })
    }

    /// Every window of the given videos, labelled against their instances.
    pub fn from_dataset(
        dataset: &Dataset,
        videos: &[usize],
        windows: &WindowSpec,
        positive_threshold: f64,
    ) -> Result<Self> {
        let n = dataset.spec.num_classes;
        let mut samples = Vec::new();
        for &v in videos {
            let rec = &dataset.records[v];
            for window in enumerate_windows(&rec.id, rec.num_frames, windows) {
                let label = assign_labels(&window, &rec.instances, n, positive_threshold);
                samples.push(Sample {
                    video: v,
                    window,
                    label,
                });
            }
        }
        Self::new(samples, n)
    }

    pub fn num_classes(&self) -> usize {
        self.by_category.len() - 1
    }

    pub fn counts(&self) -> Vec<usize> {
        self.by_category.iter().map(Vec::len).collect()
    }

    fn action_indices(&self) -> Vec<usize> {
        let n = self.num_classes();
        self.by_category[..n].iter().flatten().copied().collect()
    }
}

fn draw<R: Rng>(from: &[usize], count: usize, rng: &mut R, out: &mut Vec<usize>) {
    if count <= from.len() {
        out.extend(sample(rng, from.len(), count).into_iter().map(|i| from[i]));
    } else {
        out.extend((0..count).map(|_| from[rng.gen_range(0..from.len())]));
    }
}

/// Per-category clip counts of a categorization-balanced batch. Categories
/// with no clips are skipped and their share spread over the rest.
pub fn category_quota(pool_counts: &[usize], batch_size: usize) -> Vec<usize> {
    let present: Vec<usize> = (0..pool_counts.len()).filter(|&c| pool_counts[c] > 0).collect();
    let mut quota = vec![0; pool_counts.len()];
    if present.is_empty() {
        return quota;
    }
    let base = batch_size / present.len();
    let extra = batch_size % present.len();
    for (k, &c) in present.iter().enumerate() {
        quota[c] = base + usize::from(k < extra);
    }
    quota
}

/// Sample indices into `pool.samples`, sorted ascending.
pub fn build_balanced_batch<R: Rng>(
    pool: &LabeledPool,
    batch_size: usize,
    mode: BalanceMode,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if pool.samples.is_empty() {
        return Err(Error::Empty("training pool"));
    }
    let mut out = Vec::with_capacity(batch_size);
    match mode {
        BalanceMode::Categorization => {
            let quota = category_quota(&pool.counts(), batch_size);
            for (members, &q) in pool.by_category.iter().zip(&quota) {
                draw(members, q, rng, &mut out);
            }
        }
        BalanceMode::Proposal => {
            let action = pool.action_indices();
            let background = &pool.by_category[pool.num_classes()];
            let (n_act, n_bg) = match (action.is_empty(), background.is_empty()) {
                (false, false) => (batch_size / 2, batch_size - batch_size / 2),
                (true, _) => (0, batch_size),
                (false, true) => (batch_size, 0),
            };
            draw(&action, n_act, rng, &mut out);
            draw(background, n_bg, rng, &mut out);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Proposal-loss class weights `(action, background)`: inverse frequency
/// under the batch distribution the balancing mode induces, mean 1.
pub fn proposal_class_weights(pool: &LabeledPool, mode: BalanceMode) -> Result<[f64; 2]> {
    if pool.samples.is_empty() {
        return Err(Error::Empty("training pool"));
    }
    let counts = pool.counts();
    let n = pool.num_classes();
    let actions_present = counts[..n].iter().filter(|&&c| c > 0).count();
    if actions_present == 0 {
        return Err(Error::validation("training pool", "contains no action clips"));
    }
    if counts[n] == 0 {
        return Err(Error::validation("training pool", "contains no background clips"));
    }
    let action_mass = match mode {
        BalanceMode::Categorization => actions_present as f64 / (actions_present + 1) as f64,
        BalanceMode::Proposal => 0.5,
    };
    let raw = [1.0 / (2.0 * action_mass), 1.0 / (2.0 * (1.0 - action_mass))];
    let mean = (raw[0] + raw[1]) / 2.0;
    Ok([raw[0] / mean, raw[1] / mean])
}

pub fn fuse_losses(losses: [f64; 5], weights: [f64; 5]) -> Result<f64> {
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(LOSS_NAMES[i].into()));
    }
    Ok(losses.iter().zip(&weights).map(|(l, w)| l * w).sum())
}

/// The five per-clip losses and the head gradients of
/// `scale · Σ_k weight_k · loss_k`.
pub fn clip_losses(
    out: &NetOutputs,
    label: &ClipLabel,
    class_weights: [f64; 2],
    loss_weights: [f64; 5],
    scale: f64,
) -> ([f64; 5], HeadGrads) {
    let p = label.proposal.index();
    let (l_prop, g_prop) = softmax_cross_entropy(&out.prop_logits, p, class_weights[p]);
    let (l_cls, g_cls) = softmax_cross_entropy(&out.cls_logits, label.category, 1.0);
    let (l_aux5, g_aux5) = softmax_cross_entropy(&out.aux5_logits, label.category, 1.0);
    let (l_aux6, g_aux6) = softmax_cross_entropy(&out.aux6_logits, label.category, 1.0);
    let (l_reg, g_reg) = squared_error_loss(out.actionness, label.actionness);
    let mul = |g: Vec<f64>, w: f64| g.into_iter().map(|v| v * w * scale).collect();
    let grads = HeadGrads {
        prop: mul(g_prop, loss_weights[0]),
        cls: mul(g_cls, loss_weights[1]),
        aux5: mul(g_aux5, loss_weights[2]),
        aux6: mul(g_aux6, loss_weights[3]),
        actionness: g_reg * loss_weights[4] * scale,
    };
    ([l_prop, l_cls, l_aux5, l_aux6, l_reg], grads)
}

/// A preprocessed clip with its labels and forward mode.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub clip: Tensor,
    pub label: ClipLabel,
    pub mode: Mode,
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    /// Batch-averaged loss terms.
    pub losses: [f64; 5],
    pub fused: f64,
    /// Gradient of `fused` with respect to every parameter.
    pub grads: NetParams,
}

/// Averages each loss over the batch and fuses them; per-clip gradients are
/// computed in parallel and summed in item order.
pub fn batch_loss_and_grad(
    params: &NetParams,
    arch: &ArchConfig,
    items: &[BatchItem],
    class_weights: [f64; 2],
    loss_weights: [f64; 5],
) -> Result<BatchResult> {
    if items.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let scale = 1.0 / items.len() as f64;
    let per_clip = items
        .par_iter()
        .map(|item| {
            let (out, cache) = forward(params, arch, &item.clip, item.mode)?;
            let (losses, head) = clip_losses(&out, &item.label, class_weights, loss_weights, scale);
            Ok((losses, backward(params, &cache, &head)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut losses = [0.0; 5];
    let mut grads = params.zeros_like();
    for (l, g) in &per_clip {
        losses.iter_mut().zip(l).for_each(|(a, b)| *a += b * scale);
        grads.axpy(1.0, g);
    }
    let fused = fuse_losses(losses, loss_weights)?;
    Ok(BatchResult {
        losses,
        fused,
        grads,
    })
}

/// Velocity for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: NetParams,
}

impl OptimizerState {
    pub fn new(params: &NetParams) -> Self {
        OptimizerState {
            velocity: params.zeros_like(),
        }
    }
}

/// Learning rate of each parameter tensor: `head_cls_lr` for the
/// classification head, `base_lr` elsewhere, both times `multiplier`.
pub fn lr_per_tensor(params: &NetParams, base_lr: f64, head_cls_lr: f64, multiplier: f64) -> Vec<f64> {
    (0..params.layers().len())
        .flat_map(|i| {
            let lr = if i == LayerId::HeadCls.index() {
                head_cls_lr
            } else {
                base_lr
            };
            [lr * multiplier; 2]
        })
        .collect()
}

/// `v ← μ·v − lr·g; p ← p + v`, tensor by tensor.
pub fn sgd_momentum_step(
    params: &mut NetParams,
    grads: &NetParams,
    state: &mut OptimizerState,
    lr_per_tensor: &[f64],
    momentum: f64,
) -> Result<()> {
    let expected: Vec<Vec<usize>> = params.tensors().map(|t| t.shape().to_vec()).collect();
    for (other, op) in [(grads, "sgd gradients"), (&state.velocity, "sgd velocity")] {
        for (t, want) in other.tensors().zip(&expected) {
            t.expect_shape(op, want)?;
        }
        if other.tensors().count() != expected.len() || lr_per_tensor.len() != expected.len() {
            return Err(Error::Shape {
                op,
                expected: vec![expected.len()],
                actual: vec![other.tensors().count()],
            });
        }
    }
    for (((p, v), g), &lr) in params
        .tensors_mut()
        .zip(state.velocity.tensors_mut())
        .zip(grads.tensors())
        .zip(lr_per_tensor)
    {
        v.scale(momentum);
        v.axpy(-lr, g);
        p.axpy(1.0, v);
    }
    Ok(())
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr_multiplier: f64,
    pub losses: [f64; 5],
    pub fused: f64,
    pub probe_map: Option<f64>,
}

pub const LOG_HEADER: &str = "iter,lr_multiplier,l_prop,l_cls,l_aux5,l_aux6,l_reg,fused,probe_mAP";

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{}", r.iter, r.lr_multiplier);
        for l in r.losses {
            let _ = write!(out, ",{l}");
        }
        let _ = write!(out, ",{},", r.fused);
        if let Some(m) = r.probe_map {
            let _ = write!(out, "{m}");
        }
        out.push('\n');
    }
    out
}

/// Everything the training loop reads besides the train section itself.
#[derive(Clone, Copy)]
pub struct TrainInputs<'a> {
    pub dataset: &'a Dataset,
    pub windows: &'a WindowSpec,
    pub augment: &'a AugmentConfig,
    pub arch: &'a ArchConfig,
    pub postproc: &'a PostprocConfig,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetParams,
    pub log: Vec<LogRow>,
    pub iterations: usize,
}

/// Splits video indices into (training, held-out probe) sets.
pub fn split_videos(num_videos: usize, validation_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let held = (num_videos as f64 * validation_fraction).floor() as usize;
    let held = held.min(num_videos.saturating_sub(1));
    let cut = num_videos - held;
    ((0..cut).collect(), (cut..num_videos).collect())
}

fn load_item(
    inputs: &TrainInputs<'_>,
    pool: &LabeledPool,
    sample_idx: usize,
    clip_seed: u64,
    dropout: f64,
) -> Result<BatchItem> {
    let s = &pool.samples[sample_idx];
    let frames = load_resized(
        &inputs.dataset.frames[s.video],
        &sample_frame_indices(&s.window),
        inputs.augment,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(inputs.augment.seed, clip_seed));
    let (clip, _) = augment_clip(&frames, inputs.augment, &mut rng)?;
    Ok(BatchItem {
        clip,
        label: s.label,
        mode: Mode::Train {
            dropout,
            seed: derive_seed(clip_seed, 1),
        },
    })
}

fn probe_map(inputs: &TrainInputs<'_>, params: &NetParams, videos: &[usize]) -> Result<f64> {
    let records: Vec<_> = videos.iter().map(|&v| inputs.dataset.records[v].clone()).collect();
    let volumes: Vec<_> = videos.iter().map(|&v| inputs.dataset.frames[v].clone()).collect();
    let inf = Inference {
        params,
        arch: inputs.arch,
        windows: inputs.windows,
        augment: inputs.augment,
        postproc: inputs.postproc,
        prior: None,
    };
    let dets = detect_videos(&inf, &records, &volumes)?;
    let cfg = EvalConfig {
        tiou_thresholds: vec![0.5],
    };
    let report = evaluate(
        &dets,
        &ground_truth_from_records(&records),
        inputs.arch.num_action_classes,
        &cfg,
    )?;
    Ok(report.map[0])
}

fn breakdown(losses: &[f64; 5]) -> String {
    LOSS_NAMES
        .iter()
        .zip(losses)
        .map(|(n, l)| format!("{n}={l}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn train(inputs: &TrainInputs<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let n = inputs.arch.num_action_classes;
    cfg.validate(n)?;
    inputs.arch.validate()?;
    check_compatible(inputs.arch, inputs.augment)?;
    if inputs.dataset.spec.num_classes != n {
        return Err(Error::validation(
            "arch.num_action_classes",
            format!("dataset has {} classes", inputs.dataset.spec.num_classes),
        ));
    }
    let mut params = NetParams::init(inputs.arch, cfg.seed)?;
    let mut log = Vec::new();
    if cfg.total_iterations() == 0 {
        return Ok(TrainOutcome {
            params,
            log,
            iterations: 0,
        });
    }
    if inputs.dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let (train_videos, probe_videos) = split_videos(inputs.dataset.len(), cfg.validation_fraction);
    let pool = LabeledPool::from_dataset(
        inputs.dataset,
        &train_videos,
        inputs.windows,
        cfg.positive_threshold,
    )?;
    let class_weights = match cfg.proposal_class_weights {
        Some(w) => w,
        None => proposal_class_weights(&pool, cfg.balance_mode)?,
    };
    let mut state = OptimizerState::new(&params);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xba7c));
    let total = cfg.total_iterations();
    let mut iter = 0;
    'stages: for (stage, &len) in cfg.schedule.iter().enumerate() {
        let multiplier = cfg.lr_decay_factor.powi(stage as i32);
        if cfg.base_lr * multiplier < cfg.stop_lr {
            break;
        }
        let lrs = lr_per_tensor(&params, cfg.base_lr, cfg.head_cls_lr, multiplier);
        for _ in 0..len {
            let batch = build_balanced_batch(&pool, cfg.batch_size, cfg.balance_mode, &mut batch_rng)?;
            let iter_seed = derive_seed(cfg.seed, 1 + iter as u64);
            let items = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    load_item(inputs, &pool, idx, derive_seed(iter_seed, slot as u64), cfg.dropout)
                })
                .collect::<Result<Vec<_>>>()?;
            let result = match batch_loss_and_grad(
                &params,
                inputs.arch,
                &items,
                class_weights,
                cfg.loss_weights,
            ) {
                Ok(r) => r,
                Err(Error::NonFinite(what)) => {
                    return Err(Error::Diverged {
                        iteration: iter,
                        breakdown: format!("non-finite {what}"),
                    })
                }
                Err(e) => return Err(e),
            };
            if !result.fused.is_finite() || !result.grads.is_finite() {
                return Err(Error::Diverged {
                    iteration: iter,
                    breakdown: breakdown(&result.losses),
                });
            }
            let mut grads = result.grads;
            if let Some(max_norm) = cfg.grad_clip {
                let norm = grads.global_norm();
                if norm > max_norm {
                    grads.scale(max_norm / norm);
                }
            }
            let last = iter + 1 == total;
            let probe = cfg.probe_every > 0
                && !probe_videos.is_empty()
                && (iter % cfg.probe_every == 0 || last);
            if iter % cfg.log_every == 0 || last {
                log.push(LogRow {
                    iter,
                    lr_multiplier: multiplier,
                    losses: result.losses,
                    fused: result.fused,
                    probe_map: if probe {
                        Some(probe_map(inputs, &params, &probe_videos)?)
                    } else {
                        None
                    },
                });
            }
            sgd_momentum_step(&mut params, &grads, &mut state, &lrs, cfg.momentum)?;
            iter += 1;
            if !params.is_finite() {
                return Err(Error::Diverged {
                    iteration: iter - 1,
                    breakdown: format!("non-finite parameters after update; {}", breakdown(&result.losses)),
                });
            }
            if iter >= total {
                break 'stages;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        iterations: iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clipper::Proposal;
    use crate::synthvid::DatasetSpec;

    fn pool_with(counts: &[usize]) -> LabeledPool {
        let n = counts.len() - 1;
        let mut samples = Vec::new();
        for (c, &k) in counts.iter().enumerate() {
            for i in 0..k {
                let proposal = if c == n {
                    Proposal::Background
                } else {
                    Proposal::Action
                };
                samples.push(Sample {
                    video: 0,
                    window: Window {
                        video_id: "v".into(),
                        start: i,
                        length: 16,
                    },
                    label: ClipLabel {
                        proposal,
                        category: c,
                        actionness: if c == n { 0.0 } else { 1.0 },
                    },
                });
            }
        }
        LabeledPool::new(samples, n).unwrap()
    }

    fn category_counts(pool: &LabeledPool, batch: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; pool.by_category.len()];
        for &i in batch {
            counts[pool.samples[i].label.category] += 1;
        }
        counts
    }

    #[test]
    fn categorization_quotas() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pool = pool_with(&[40, 5, 100]);
        let b = build_balanced_batch(&pool, 30, BalanceMode::Categorization, &mut rng).unwrap();
        assert_eq!(category_counts(&pool, &b), vec![10, 10, 10]);
        let pool = pool_with(&[40, 40, 40, 40, 40]);
        let b = build_balanced_batch(&pool, 30, BalanceMode::Categorization, &mut rng).unwrap();
        assert_eq!(category_counts(&pool, &b), vec![6; 5]);
        assert_eq!(category_quota(&[9, 9, 9, 9], 30), vec![8, 8, 7, 7]);
        assert_eq!(category_quota(&[9, 0, 9], 30), vec![15, 0, 15]);
    }

    #[test]
    fn proposal_mode_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = pool_with(&[40, 5, 100]);
        let b = build_balanced_batch(&pool, 30, BalanceMode::Proposal, &mut rng).unwrap();
        let c = category_counts(&pool, &b);
        assert_eq!(c[0] + c[1], 15);
        assert_eq!(c[2], 15);
    }

    #[test]
    fn empty_pool_errors() {
        let pool = LabeledPool::new(Vec::new(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_balanced_batch(&pool, 6, BalanceMode::Categorization, &mut rng).is_err());
        assert!(proposal_class_weights(&pool, BalanceMode::Categorization).is_err());
    }

    #[test]
    fn class_weight_cases() {
        let w = proposal_class_weights(&pool_with(&[3, 7]), BalanceMode::Categorization).unwrap();
        assert_eq!(w, [1.0, 1.0]);
        let w = proposal_class_weights(&pool_with(&[3, 3, 3, 7]), BalanceMode::Categorization).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 1.5).abs() < 1e-15);
        let w = proposal_class_weights(&pool_with(&[3, 3, 3, 7]), BalanceMode::Proposal).unwrap();
        assert_eq!(w, [1.0, 1.0]);
        assert!(proposal_class_weights(&pool_with(&[0, 0, 5]), BalanceMode::Categorization).is_err());
        assert!(proposal_class_weights(&pool_with(&[4, 0]), BalanceMode::Categorization).is_err());
    }

    #[test]
    fn fuse_cases() {
        assert_eq!(fuse_losses([0.0; 5], [1.0; 5]).unwrap(), 0.0);
        let f = fuse_losses([0.1, 0.2, 0.3, 0.4, 0.5], [1.0; 5]).unwrap();
        assert!((f - 1.5).abs() < 1e-15);
        let f = fuse_losses([0.1, 0.2, 0.3, 0.4, 0.5], [1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((f - 1.0).abs() < 1e-15);
        assert!(fuse_losses([0.0, f64::NAN, 0.0, 0.0, 0.0], [1.0; 5]).is_err());
    }

    fn tiny_params() -> NetParams {
        NetParams::init(&ArchConfig::desk(2), 3).unwrap()
    }

    #[test]
    fn sgd_plain_step_zeroes_params() {
        let mut p = tiny_params();
        let g = p.clone();
        let mut st = OptimizerState::new(&p);
        let lrs = vec![1.0; 2 * p.layers().len()];
        sgd_momentum_step(&mut p, &g, &mut st, &lrs, 0.0).unwrap();
        assert!(p.tensors().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn sgd_zero_gradients_keep_params() {
        let mut p = tiny_params();
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = OptimizerState::new(&p);
        let lrs = lr_per_tensor(&p, 0.1, 0.5, 1.0);
        for _ in 0..5 {
            sgd_momentum_step(&mut p, &g, &mut st, &lrs, 0.9).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_momentum_unrolls() {
        let mut p = tiny_params();
        let start = p.clone();
        let g = {
            let mut g = p.zeros_like();
            g.tensors_mut().for_each(|t| t.fill(0.25));
            g
        };
        let mut st = OptimizerState::new(&p);
        let lr = 0.01;
        let lrs = vec![lr; 2 * p.layers().len()];
        sgd_momentum_step(&mut p, &g, &mut st, &lrs, 0.9).unwrap();
        sgd_momentum_step(&mut p, &g, &mut st, &lrs, 0.9).unwrap();
        for (a, b) in p.tensors().zip(start.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y + lr * 0.25 * 2.9).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn head_cls_gets_its_own_rate() {
        let p = tiny_params();
        let lrs = lr_per_tensor(&p, 1e-4, 1e-2, 0.1);
        let k = LayerId::HeadCls.index();
        assert_eq!(lrs[2 * k], 1e-3);
        assert_eq!(lrs[2 * k + 1], 1e-3);
        assert_eq!(lrs[0], 1e-5);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut p = tiny_params();
        let other = NetParams::init(&ArchConfig::desk(3), 0).unwrap();
        let mut st = OptimizerState::new(&p);
        let lrs = vec![0.1; 2 * p.layers().len()];
        assert!(sgd_momentum_step(&mut p, &other, &mut st, &lrs, 0.9).is_err());
    }

    #[test]
    fn split_keeps_one_training_video() {
        assert_eq!(split_videos(48, 0.1), ((0..44).collect(), (44..48).collect()));
        assert_eq!(split_videos(1, 0.5), (vec![0], vec![]));
        assert_eq!(split_videos(5, 0.0).1.len(), 0);
    }

    #[test]
    fn zero_iterations_return_init() {
        let spec = DatasetSpec {
            num_videos: 0,
            ..DatasetSpec::default()
        };
        let dataset = Dataset::generate(&spec).unwrap();
        let arch = ArchConfig::desk(spec.num_classes);
        let cfg = TrainConfig {
            schedule: vec![0, 0],
            ..TrainConfig::default()
        };
        let inputs = TrainInputs {
            dataset: &dataset,
            windows: &WindowSpec::default(),
            augment: &AugmentConfig::desk(),
            arch: &arch,
            postproc: &PostprocConfig::default(),
        };
        let out = train(&inputs, &cfg).unwrap();
        assert_eq!(out.params, NetParams::init(&arch, cfg.seed).unwrap());
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn log_csv_has_nine_columns() {
        let rows = vec![
            LogRow {
                iter: 0,
                lr_multiplier: 1.0,
                losses: [0.5; 5],
                fused: 2.5,
                probe_map: Some(0.25),
            },
            LogRow {
                iter: 10,
                lr_multiplier: 1.0,
                losses: [0.5; 5],
                fused: 2.5,
                probe_map: None,
            },
        ];
        let csv = log_to_csv(&rows);
        for line in csv.lines() {
            assert_eq!(line.split(',').count(), 9);
        }
        assert_eq!(csv.lines().nth(1).unwrap(), "0,1,0.5,0.5,0.5,0.5,0.5,2.5,0.25");
    }
}
