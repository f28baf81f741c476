//! The three-headed 3D ConvNet: eight 3×3×3 convolutions with five pooling
//! stages, two shared fully connected layers, three output heads and two
//! auxiliary classifiers (one on globally pooled conv5, one on fc6).

use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Conv3dCache, PoolCache};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CONV: usize = 8;

pub const CONV_NAMES: [&str; NUM_CONV] = [
    "conv1a", "conv2a", "conv3a", "conv3b", "conv4a", "conv4b", "conv5a", "conv5b",
];

/// Layer slots in manifest order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerId {
    Conv(usize),
    Fc6,
    Fc7,
    HeadProp,
    HeadCls,
    HeadReg,
    AuxConv5,
    AuxFc6,
}

impl LayerId {
    pub const COUNT: usize = NUM_CONV + 7;

    pub fn index(self) -> usize {
        match self {
            LayerId::Conv(i) => i,
            LayerId::Fc6 => NUM_CONV,
            LayerId::Fc7 => NUM_CONV + 1,
            LayerId::HeadProp => NUM_CONV + 2,
            LayerId::HeadCls => NUM_CONV + 3,
            LayerId::HeadReg => NUM_CONV + 4,
            LayerId::AuxConv5 => NUM_CONV + 5,
            LayerId::AuxFc6 => NUM_CONV + 6,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Some(match i {
            i if i < NUM_CONV => LayerId::Conv(i),
            8 => LayerId::Fc6,
            9 => LayerId::Fc7,
            10 => LayerId::HeadProp,
            11 => LayerId::HeadCls,
            12 => LayerId::HeadReg,
            13 => LayerId::AuxConv5,
            14 => LayerId::AuxFc6,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerId::Conv(i) => CONV_NAMES[i],
            LayerId::Fc6 => "fc6",
            LayerId::Fc7 => "fc7",
            LayerId::HeadProp => "head_prop",
            LayerId::HeadCls => "head_cls",
            LayerId::HeadReg => "head_reg",
            LayerId::AuxConv5 => "aux_conv5",
            LayerId::AuxFc6 => "aux_fc6",
        }
    }
}

/// Pooling after each conv layer; `None` where no pooling stage follows.
pub fn pool_after(conv: usize) -> Option<[usize; 3]> {
    match conv {
        0 => Some([1, 2, 2]),
        1 | 3 | 5 | 7 => Some([2, 2, 2]),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDims {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub preset: Preset,
    pub input: InputDims,
    pub conv_channels: Vec<usize>,
    pub fc_widths: [usize; 2],
    pub num_action_classes: usize,
}

impl ArchConfig {
    /// C3D widths on 112×112 inputs.
    pub fn paper(num_action_classes: usize) -> Self {
        ArchConfig {
            preset: Preset::Paper,
            input: InputDims {
                frames: 16,
                channels: 3,
                height: 112,
                width: 112,
            },
            conv_channels: vec![64, 128, 256, 256, 512, 512, 512, 512],
            fc_widths: [4096, 4096],
            num_action_classes,
        }
    }

    /// Narrow network on 32×32 inputs, sized for single-core CPU training.
    pub fn desk(num_action_classes: usize) -> Self {
        ArchConfig {
            preset: Preset::Desk,
            input: InputDims {
                frames: 16,
                channels: 3,
                height: 32,
                width: 32,
            },
            conv_channels: vec![4, 8, 16, 16, 32, 32, 32, 32],
            fc_widths: [128, 128],
            num_action_classes,
        }
    }

    pub fn for_preset(preset: Preset, num_action_classes: usize) -> Self {
        match preset {
            Preset::Paper => Self::paper(num_action_classes),
            Preset::Desk => Self::desk(num_action_classes),
        }
    }

    /// Number of classifier outputs (action classes plus background).
    pub fn num_categories(&self) -> usize {
        self.num_action_classes + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != NUM_CONV {
            return Err(Error::validation(
                "arch.conv_channels",
                format!("expected {NUM_CONV} conv widths, got {}", self.conv_channels.len()),
            ));
        }
        if let Some(i) = self.conv_channels.iter().position(|&c| c == 0) {
            return Err(Error::validation(
                format!("arch.conv_channels[{i}]"),
                "width must be positive",
            ));
        }
        if self.fc_widths.contains(&0) {
            return Err(Error::validation("arch.fc_widths", "width must be positive"));
        }
        if self.num_action_classes == 0 {
            return Err(Error::validation("arch.num_action_classes", "must be at least 1"));
        }
        if self.input.frames != 16 {
            return Err(Error::validation("arch.input.frames", "clips are 16 frames"));
        }
        if self.input.channels == 0 {
            return Err(Error::validation("arch.input.channels", "must be positive"));
        }
        self.conv5_dims().map(|_| ())
    }

    /// `[T, H, W]` after every pooling stage, failing if a stage no longer fits.
    fn stage_dims(&self) -> Result<Vec<[usize; 3]>> {
        let mut dims = [self.input.frames, self.input.height, self.input.width];
        let mut out = Vec::with_capacity(NUM_CONV + 1);
        for conv in 0..NUM_CONV {
            out.push(dims);
            if let Some(extent) = pool_after(conv) {
                for axis in 0..3 {
                    if dims[axis] < extent[axis] {
                        return Err(Error::validation(
                            "arch.input",
                            format!(
                                "input {}x{}x{} collapses before pooling after {}",
                                self.input.frames,
                                self.input.height,
                                self.input.width,
                                CONV_NAMES[conv]
                            ),
                        ));
                    }
                    dims[axis] = layers::pooled_extent(dims[axis], extent[axis]);
                }
            }
        }
        out.push(dims);
        Ok(out)
    }

    /// `[T, H, W]` of the conv5b activation (before pool5).
    pub fn conv5_dims(&self) -> Result<[usize; 3]> {
        Ok(self.stage_dims()?[NUM_CONV - 1])
    }

    /// Length of the flattened pool5 output feeding fc6.
    pub fn flat_features(&self) -> Result<usize> {
        let dims = self.stage_dims()?;
        let [t, h, w] = dims[NUM_CONV];
        Ok(self.conv_channels[NUM_CONV - 1] * t * h * w)
    }

    /// `(weight shape, bias shape)` for every layer in manifest order.
    pub fn layer_shapes(&self) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        self.validate()?;
        let mut shapes = Vec::with_capacity(LayerId::COUNT);
        let mut c_in = self.input.channels;
        for &c_out in &self.conv_channels {
            shapes.push((vec![c_out, c_in, 3, 3, 3], vec![c_out]));
            c_in = c_out;
        }
        let [fc6, fc7] = self.fc_widths;
        let k = self.num_categories();
        let c5 = self.conv_channels[NUM_CONV - 1];
        shapes.push((vec![fc6, self.flat_features()?], vec![fc6]));
        shapes.push((vec![fc7, fc6], vec![fc7]));
        shapes.push((vec![2, fc7], vec![2]));
        shapes.push((vec![k, fc7], vec![k]));
        shapes.push((vec![1, fc7], vec![1]));
        shapes.push((vec![k, c5], vec![k]));
        shapes.push((vec![k, fc6], vec![k]));
        Ok(shapes)
    }

    pub fn num_params(&self) -> Result<usize> {
        Ok(self
            .layer_shapes()?
            .iter()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

static NEXT_PARAMS_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_PARAMS_ID.fetch_add(1, Ordering::Relaxed)
}

/// All trainable tensors of the network (also used to hold gradients).
///
/// Every mutable borrow bumps an internal version so that activation caches
/// produced by an earlier forward pass are detected as stale.
#[derive(Debug)]
pub struct NetParams {
    layers: Vec<Layer>,
    id: u64,
    version: u64,
}

impl Clone for NetParams {
    fn clone(&self) -> Self {
        NetParams {
            layers: self.layers.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for NetParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl NetParams {
    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        let layers = arch
            .layer_shapes()?
            .into_iter()
            .map(|(w, b)| Layer {
                weight: Tensor::zeros(&w),
                bias: Tensor::zeros(&b),
            })
            .collect();
        Ok(Self::from_layers(layers))
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, layer) in params.layers.iter_mut().enumerate() {
            let fan_in: usize = layer.weight.shape()[1..].iter().product();
            let gain = match LayerId::from_index(i) {
                Some(LayerId::Conv(_) | LayerId::Fc6 | LayerId::Fc7) => 6.0,
                _ => 1.0,
            };
            let bound = (gain / fan_in as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(params)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Self {
        NetParams {
            layers,
            id: fresh_id(),
            version: 0,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn layer(&self, id: LayerId) -> &Layer {
        &self.layers[id.index()]
    }

    pub fn layer_mut(&mut self, id: LayerId) -> &mut Layer {
        self.version += 1;
        &mut self.layers[id.index()]
    }

    /// `(name, tensor)` pairs in manifest order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let name = LayerId::from_index(i).map_or("layer", LayerId::name);
                [
                    (format!("{name}.weight"), &l.weight),
                    (format!("{name}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers_mut()
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                weight: Tensor::zeros(l.weight.shape()),
                bias: Tensor::zeros(l.bias.shape()),
            })
            .collect();
        Self::from_layers(layers)
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &NetParams) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.axpy(scale, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors_mut().for_each(|t| t.scale(factor));
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    /// Flat coordinate access: `(tensor index in manifest order, offset)`.
    pub fn get(&self, tensor: usize, offset: usize) -> f64 {
        let l = &self.layers[tensor / 2];
        if tensor % 2 == 0 {
            l.weight.data()[offset]
        } else {
            l.bias.data()[offset]
        }
    }

    pub fn set(&mut self, tensor: usize, offset: usize, value: f64) {
        let l = &mut self.layers_mut()[tensor / 2];
        if tensor % 2 == 0 {
            l.weight.data_mut()[offset] = value;
        } else {
            l.bias.data_mut()[offset] = value;
        }
    }

    fn stamp(&self) -> (u64, u64) {
        (self.id, self.version)
    }
}

/// Forward-pass mode. Training applies inverted dropout after fc6 and fc7
/// with a mask drawn from `seed`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    Train { dropout: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetOutputs {
    pub prop_logits: Vec<f64>,
    pub cls_logits: Vec<f64>,
    pub aux5_logits: Vec<f64>,
    pub aux6_logits: Vec<f64>,
    pub actionness: f64,
}

/// Gradients of the loss with respect to each head's output. `actionness` is
/// taken with respect to the sigmoid output, not its logit.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub prop: Vec<f64>,
    pub cls: Vec<f64>,
    pub aux5: Vec<f64>,
    pub aux6: Vec<f64>,
    pub actionness: f64,
}

impl HeadGrads {
    pub fn zeros(num_categories: usize) -> Self {
        HeadGrads {
            prop: vec![0.0; 2],
            cls: vec![0.0; num_categories],
            aux5: vec![0.0; num_categories],
            aux6: vec![0.0; num_categories],
            actionness: 0.0,
        }
    }
}

#[derive(Debug)]
struct ConvStage {
    conv: Conv3dCache,
    activation: Tensor,
    pool: Option<PoolCache>,
}

#[derive(Debug)]
struct DenseStage {
    pre: Vec<f64>,
    mask: Option<Vec<f64>>,
    out: Vec<f64>,
}

/// Activations retained for the backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    owner: (u64, u64),
    stages: Vec<ConvStage>,
    pool5_shape: Vec<usize>,
    flat: Vec<f64>,
    gap: Vec<f64>,
    fc6: DenseStage,
    fc7: DenseStage,
    actionness: f64,
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

fn dense_forward<R: Rng>(
    input: &[f64],
    layer: &Layer,
    mode: Mode,
    rng: &mut R,
    name: &str,
) -> Result<DenseStage> {
    let pre = layers::linear_forward(input, &layer.weight, &layer.bias)?;
    check_finite(name, &pre)?;
    let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    let (out, mask) = match mode {
        Mode::Eval => (act, None),
        Mode::Train { dropout, .. } => layers::dropout(&act, dropout, true, rng),
    };
    Ok(DenseStage { pre, mask, out })
}

/// Reorders a `T × C × H × W` clip into the `C × T × H × W` layout of the trunk.
fn clip_to_volume(clip: &Tensor, arch: &ArchConfig) -> Result<Tensor> {
    let InputDims {
        frames: t,
        channels: c,
        height: h,
        width: w,
    } = arch.input;
    clip.expect_shape("forward", &[t, c, h, w])?;
    let plane = h * w;
    let src = clip.data();
    let mut out = vec![0.0; src.len()];
    for ti in 0..t {
        for ci in 0..c {
            out[(ci * t + ti) * plane..][..plane]
                .copy_from_slice(&src[(ti * c + ci) * plane..][..plane]);
        }
    }
    Tensor::from_vec(&[c, t, h, w], out)
}

/// Runs the network on one `16 × C × H × W` clip.
pub fn forward(
    params: &NetParams,
    arch: &ArchConfig,
    clip: &Tensor,
    mode: Mode,
) -> Result<(NetOutputs, ForwardCache)> {
    let mut x = clip_to_volume(clip, arch)?;
    let mut stages = Vec::with_capacity(NUM_CONV);
    for i in 0..NUM_CONV {
        let layer = params.layer(LayerId::Conv(i));
        let (z, conv) = layers::conv3d_forward(&x, &layer.weight, &layer.bias)?;
        let activation = layers::relu_forward(&z);
        check_finite(CONV_NAMES[i], activation.data())?;
        let (next, pool) = match pool_after(i) {
            Some(extent) => {
                let (pooled, cache) = layers::maxpool3d_forward(&activation, extent)?;
                (pooled, Some(cache))
            }
            None => (activation.clone(), None),
        };
        stages.push(ConvStage {
            conv,
            activation,
            pool,
        });
        x = next;
    }

    let conv5 = &stages[NUM_CONV - 1].activation;
    let c5 = conv5.shape()[0];
    let per_channel = conv5.len() / c5;
    let gap: Vec<f64> = conv5
        .data()
        .chunks(per_channel)
        .map(|c| c.iter().sum::<f64>() / per_channel as f64)
        .collect();

    let pool5_shape = x.shape().to_vec();
    let flat = x.into_data();
    let mut rng = ChaCha8Rng::seed_from_u64(match mode {
        Mode::Train { seed, .. } => seed,
        Mode::Eval => 0,
    });
    let fc6 = dense_forward(&flat, params.layer(LayerId::Fc6), mode, &mut rng, "fc6")?;
    let fc7 = dense_forward(&fc6.out, params.layer(LayerId::Fc7), mode, &mut rng, "fc7")?;

    let head = |id: LayerId, input: &[f64]| -> Result<Vec<f64>> {
        let l = params.layer(id);
        let out = layers::linear_forward(input, &l.weight, &l.bias)?;
        check_finite(id.name(), &out)?;
        Ok(out)
    };
    let prop_logits = head(LayerId::HeadProp, &fc7.out)?;
    let cls_logits = head(LayerId::HeadCls, &fc7.out)?;
    let reg_logit = head(LayerId::HeadReg, &fc7.out)?[0];
    let aux5_logits = head(LayerId::AuxConv5, &gap)?;
    let aux6_logits = head(LayerId::AuxFc6, &fc6.out)?;
    let actionness = layers::sigmoid(reg_logit);

    let outputs = NetOutputs {
        prop_logits,
        cls_logits,
        aux5_logits,
        aux6_logits,
        actionness,
    };
    let cache = ForwardCache {
        owner: params.stamp(),
        stages,
        pool5_shape,
        flat,
        gap,
        fc6,
        fc7,
        actionness,
    };
    Ok((outputs, cache))
}

/// Hash of every piecewise decision the forward pass made: ReLU on/off
/// states and pooling argmaxes. Two parameter settings with equal
/// signatures lie on the same smooth piece of the network function.
pub fn activation_signature(cache: &ForwardCache) -> u64 {
    let mut h = DefaultHasher::new();
    for stage in &cache.stages {
        stage
            .activation
            .data()
            .iter()
            .for_each(|v| (*v > 0.0).hash(&mut h));
        if let Some(pool) = &stage.pool {
            pool.argmax().hash(&mut h);
        }
    }
    for dense in [&cache.fc6, &cache.fc7] {
        dense.pre.iter().for_each(|v| (*v > 0.0).hash(&mut h));
    }
    h.finish()
}

fn set_layer_grads(grads: &mut NetParams, id: LayerId, g: layers::LinearGrads) -> Vec<f64> {
    let slot = &mut grads.layers[id.index()];
    slot.weight = g.weight;
    slot.bias = g.bias;
    g.input
}

fn dense_backward(stage: &DenseStage, grad_out: &mut [f64]) {
    if let Some(mask) = &stage.mask {
        grad_out.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
    }
    grad_out
        .iter_mut()
        .zip(&stage.pre)
        .for_each(|(g, &z)| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
}

/// Back-propagates head gradients through the whole network, returning a
/// gradient tensor for every parameter.
pub fn backward(
    params: &NetParams,
    cache: &ForwardCache,
    head_grads: &HeadGrads,
) -> Result<NetParams> {
    if cache.owner != params.stamp() {
        return Err(Error::StaleCache);
    }
    let mut grads = params.zeros_like();

    let reg_logit_grad =
        head_grads.actionness * cache.actionness * (1.0 - cache.actionness);
    let mut d_fc7 = vec![0.0; cache.fc7.out.len()];
    for (id, g) in [
        (LayerId::HeadProp, head_grads.prop.clone()),
        (LayerId::HeadCls, head_grads.cls.clone()),
        (LayerId::HeadReg, vec![reg_logit_grad]),
    ] {
        let lg = layers::linear_backward(&cache.fc7.out, &params.layer(id).weight, &g)?;
        let dx = set_layer_grads(&mut grads, id, lg);
        d_fc7.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
    }

    let lg = layers::linear_backward(
        &cache.fc6.out,
        &params.layer(LayerId::AuxFc6).weight,
        &head_grads.aux6,
    )?;
    let mut d_fc6 = set_layer_grads(&mut grads, LayerId::AuxFc6, lg);

    dense_backward(&cache.fc7, &mut d_fc7);
    let lg = layers::linear_backward(&cache.fc6.out, &params.layer(LayerId::Fc7).weight, &d_fc7)?;
    let dx = set_layer_grads(&mut grads, LayerId::Fc7, lg);
    d_fc6.iter_mut().zip(dx).for_each(|(a, b)| *a += b);

    dense_backward(&cache.fc6, &mut d_fc6);
    let lg = layers::linear_backward(&cache.flat, &params.layer(LayerId::Fc6).weight, &d_fc6)?;
    let d_flat = set_layer_grads(&mut grads, LayerId::Fc6, lg);

    let lg = layers::linear_backward(
        &cache.gap,
        &params.layer(LayerId::AuxConv5).weight,
        &head_grads.aux5,
    )?;
    let d_gap = set_layer_grads(&mut grads, LayerId::AuxConv5, lg);

    let mut d_x = Tensor::from_vec(&cache.pool5_shape, d_flat)?;
    for i in (0..NUM_CONV).rev() {
        let stage = &cache.stages[i];
        let mut d_act = match &stage.pool {
            Some(pool) => layers::maxpool3d_backward(pool, &d_x)?,
            None => d_x,
        };
        if i == NUM_CONV - 1 {
            let per_channel = d_act.len() / d_gap.len();
            for (chunk, g) in d_act.data_mut().chunks_mut(per_channel).zip(&d_gap) {
                let share = g / per_channel as f64;
                chunk.iter_mut().for_each(|v| *v += share);
            }
        }
        let d_z = layers::relu_backward(&stage.activation, &d_act);
        let cg = layers::conv3d_backward(
            &params.layer(LayerId::Conv(i)).weight,
            &stage.conv,
            &d_z,
            i > 0,
        )?;
        let slot = &mut grads.layers[i];
        slot.weight = cg.weight;
        slot.bias = cg.bias;
        d_x = match cg.input {
            Some(t) => t,
            None => break,
        };
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            preset: Preset::Desk,
            input: InputDims {
                frames: 16,
                channels: 3,
                height: 32,
                width: 32,
            },
            conv_channels: vec![2, 2, 2, 2, 2, 2, 2, 2],
            fc_widths: [6, 5],
            num_action_classes: 3,
        }
    }

    fn clip(arch: &ArchConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = arch.input;
        let shape = [d.frames, d.channels, d.height, d.width];
        let n = shape.iter().product();
        Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
    }

    #[test]
    fn desk_output_shapes() {
        let arch = ArchConfig::desk(3);
        let params = NetParams::init(&arch, 1).unwrap();
        let (out, _) = forward(&params, &arch, &clip(&arch, 2), Mode::Eval).unwrap();
        assert_eq!(out.prop_logits.len(), 2);
        assert_eq!(out.cls_logits.len(), 4);
        assert_eq!(out.aux5_logits.len(), 4);
        assert_eq!(out.aux6_logits.len(), 4);
        assert!(out.actionness > 0.0 && out.actionness < 1.0);
    }

    #[test]
    fn paper_preset_shapes_are_consistent() {
        let arch = ArchConfig::paper(20);
        arch.validate().unwrap();
        assert_eq!(arch.conv5_dims().unwrap(), [2, 7, 7]);
        assert_eq!(arch.flat_features().unwrap(), 512 * 3 * 3);
    }

    #[test]
    fn too_small_input_is_rejected() {
        let mut arch = ArchConfig::desk(2);
        arch.input.height = 16;
        assert!(arch.validate().is_err());
        arch.input.height = 32;
        arch.conv_channels.pop();
        assert!(arch.validate().is_err());
    }

    #[test]
    fn zero_params_emit_biases() {
        let arch = tiny_arch();
        let mut params = NetParams::zeros(&arch).unwrap();
        params.layer_mut(LayerId::HeadCls).bias.data_mut()[1] = 0.7;
        params.layer_mut(LayerId::HeadReg).bias.data_mut()[0] = -1.2;
        let (out, _) = forward(&params, &arch, &clip(&arch, 3), Mode::Eval).unwrap();
        assert_eq!(out.cls_logits, vec![0.0, 0.7, 0.0, 0.0]);
        assert!((out.actionness - layers::sigmoid(-1.2)).abs() < 1e-15);
        assert_eq!(out.prop_logits, vec![0.0, 0.0]);
    }

    #[test]
    fn eval_forward_is_pure() {
        let arch = tiny_arch();
        let params = NetParams::init(&arch, 9).unwrap();
        let c = clip(&arch, 4);
        let (a, _) = forward(&params, &arch, &c, Mode::Eval).unwrap();
        let (b, _) = forward(&params, &arch, &c, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_head_grads_give_zero_param_grads() {
        let arch = tiny_arch();
        let params = NetParams::init(&arch, 5).unwrap();
        let (_, cache) = forward(&params, &arch, &clip(&arch, 6), Mode::Eval).unwrap();
        let grads = backward(&params, &cache, &HeadGrads::zeros(4)).unwrap();
        assert_eq!(grads.global_norm(), 0.0);
    }

    #[test]
    fn stale_cache_is_detected() {
        let arch = tiny_arch();
        let mut params = NetParams::init(&arch, 5).unwrap();
        let (_, cache) = forward(&params, &arch, &clip(&arch, 6), Mode::Eval).unwrap();
        params.layer_mut(LayerId::Fc6).bias.data_mut()[0] += 1.0;
        assert!(matches!(
            backward(&params, &cache, &HeadGrads::zeros(4)),
            Err(Error::StaleCache)
        ));
        let other = params.clone();
        let (_, cache) = forward(&params, &arch, &clip(&arch, 6), Mode::Eval).unwrap();
        assert!(backward(&other, &cache, &HeadGrads::zeros(4)).is_err());
    }

    #[test]
    fn non_finite_activation_is_reported() {
        let arch = tiny_arch();
        let mut params = NetParams::init(&arch, 5).unwrap();
        params.layer_mut(LayerId::Fc6).bias.data_mut()[0] = f64::NAN;
        let err = forward(&params, &arch, &clip(&arch, 6), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref n) if n == "fc6"));
    }

    #[test]
    fn param_count_matches_shapes() {
        let arch = ArchConfig::desk(3);
        let params = NetParams::init(&arch, 0).unwrap();
        assert_eq!(params.num_params(), arch.num_params().unwrap());
        assert_eq!(params.named_tensors().len(), 2 * LayerId::COUNT);
        assert_eq!(params.named_tensors()[0].0, "conv1a.weight");
    }
}
