//! A small fully-convolutional segmentation network.
//!
//! The feature extractor is a stack of `conv -> norm -> relu` blocks with
//! stride 1 and same padding, so feature maps keep the input resolution.
//! The classifier is a 1x1 convolution to `num_classes` logits. Every norm
//! layer takes its statistics from a [`NormMode`] chosen per forward pass.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{GradientMap, Tape, Var};
use crate::error::{Error, Result};
use crate::normstats::{self, BatchStats, NormLayerState, StyleSignature};
use crate::tensor::{LabelMap, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub kernel_size: usize,
    pub num_classes: usize,
    pub norm_eps: f64,
    /// 1-based index of the norm layer whose input provides style signatures.
    pub style_layer: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 3,
            widths: vec![8, 16, 16],
            kernel_size: 3,
            num_classes: 4,
            norm_eps: 1e-5,
            style_layer: 1,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("network needs at least one layer of nonzero width".into()));
        }
        if self.style_layer == 0 || self.style_layer > self.widths.len() {
            return Err(Error::Config(format!(
                "style layer {} outside 1..={}",
                self.style_layer,
                self.widths.len()
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("channel and class counts must be positive".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }
}

/// Address of one trainable tensor. The derived order is the canonical
/// flattening order used by gradient maps and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    ConvKernel(usize),
    ConvBias(usize),
    NormWeight(usize),
    NormBias(usize),
    ClassifierKernel,
    ClassifierBias,
}

impl ParamId {
    /// Feature-extractor parameters (θ); everything else is the classifier (φ).
    pub fn is_feature_extractor(self) -> bool {
        !matches!(self, ParamId::ClassifierKernel | ParamId::ClassifierBias)
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::ConvKernel(l) => write!(f, "block{l}.conv.kernel"),
            ParamId::ConvBias(l) => write!(f, "block{l}.conv.bias"),
            ParamId::NormWeight(l) => write!(f, "block{l}.norm.weight"),
            ParamId::NormBias(l) => write!(f, "block{l}.norm.bias"),
            ParamId::ClassifierKernel => write!(f, "classifier.kernel"),
            ParamId::ClassifierBias => write!(f, "classifier.bias"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub kernel: Tensor,
    pub bias: Vec<f64>,
    pub norm: NormLayerState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: NetworkConfig,
    pub blocks: Vec<Block>,
    pub classifier_kernel: Tensor,
    pub classifier_bias: Vec<f64>,
}

/// How every norm layer obtains its statistics during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum NormMode {
    /// Statistics of the current batch (training).
    TrainBatch,
    /// Running statistics accumulated during training.
    SourceRunning,
    /// Statistics of the current (test) batch.
    TargetSpecific,
    /// Caller-supplied statistics, one entry per layer.
    ExternalStats(Vec<BatchStats>),
}

pub type ParamGradients = GradientMap<ParamId>;

/// Draws He-scaled Gaussian kernels from a seeded generator; norm affines
/// start at identity and running statistics at zero mean / unit variance.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.kernel_size;
    let mut draw = |shape: [usize; 4], fan_in: usize, gain: f64| -> Tensor {
        let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
            .expect("shape product")
    };
    let mut blocks = Vec::with_capacity(config.widths.len());
    let mut c_in = config.in_channels;
    for &width in &config.widths {
        blocks.push(Block {
            kernel: draw([width, c_in, k, k], c_in * k * k, 2.0),
            bias: vec![0.0; width],
            norm: NormLayerState::new(width, config.norm_eps),
        });
        c_in = width;
    }
    let classifier_kernel = draw([config.num_classes, c_in, 1, 1], c_in, 1.0);
    Ok(ModelParams {
        config: config.clone(),
        blocks,
        classifier_kernel,
        classifier_bias: vec![0.0; config.num_classes],
    })
}

impl ModelParams {
    /// Every trainable parameter id in canonical order.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(4 * self.blocks.len() + 2);
        for l in 0..self.blocks.len() {
            ids.extend([ParamId::ConvKernel(l), ParamId::ConvBias(l), ParamId::NormWeight(l), ParamId::NormBias(l)]);
        }
        ids.extend([ParamId::ClassifierKernel, ParamId::ClassifierBias]);
        ids.sort();
        ids
    }

    pub fn get(&self, id: ParamId) -> Tensor {
        match id {
            ParamId::ConvKernel(l) => self.blocks[l].kernel.clone(),
            ParamId::ConvBias(l) => Tensor::channel_vector(&self.blocks[l].bias),
            ParamId::NormWeight(l) => Tensor::channel_vector(&self.blocks[l].norm.weight),
            ParamId::NormBias(l) => Tensor::channel_vector(&self.blocks[l].norm.bias),
            ParamId::ClassifierKernel => self.classifier_kernel.clone(),
            ParamId::ClassifierBias => Tensor::channel_vector(&self.classifier_bias),
        }
    }

    pub fn set(&mut self, id: ParamId, value: &Tensor) -> Result<()> {
        let current = self.get(id);
        if current.shape() != value.shape() {
            return Err(Error::Shape(format!("{id}: {:?} vs {:?}", current.shape(), value.shape())));
        }
        let data = value.data();
        match id {
            ParamId::ConvKernel(l) => self.blocks[l].kernel = value.clone(),
            ParamId::ConvBias(l) => self.blocks[l].bias.copy_from_slice(data),
            ParamId::NormWeight(l) => self.blocks[l].norm.weight.copy_from_slice(data),
            ParamId::NormBias(l) => self.blocks[l].norm.bias.copy_from_slice(data),
            ParamId::ClassifierKernel => self.classifier_kernel = value.clone(),
            ParamId::ClassifierBias => self.classifier_bias.copy_from_slice(data),
        }
        Ok(())
    }

    pub fn num_trainable(&self) -> usize {
        self.ids().into_iter().map(|id| self.get(id).numel()).sum()
    }

    /// All trainable values concatenated in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.ids().into_iter().flat_map(|id| self.get(id).into_data()).collect()
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.num_trainable() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.num_trainable())));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for id in self.ids() {
            let shape = self.get(id).shape();
            let n: usize = shape.iter().product();
            out.set(id, &Tensor::from_vec(shape, flat[offset..offset + n].to_vec())?)?;
            offset += n;
        }
        Ok(out)
    }

    /// Record every trainable tensor on `tape` as a differentiable leaf.
    pub fn to_vars(&self, tape: &mut Tape) -> ParamVars {
        let ids = self.ids();
        let vars = ids.iter().map(|&id| tape.param(self.get(id))).collect();
        ParamVars { ids, vars }
    }

    /// `p <- p - lr * g` for every parameter present in `grads`.
    pub fn apply_gradients(&mut self, grads: &ParamGradients, lr: f64) -> Result<()> {
        for (&id, g) in grads.iter() {
            let updated = self.get(id).zip_map(g, |p, d| p - lr * d)?;
            self.set(id, &updated)?;
        }
        Ok(())
    }

    /// Blend per-layer batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[BatchStats], momentum: f64) -> Result<()> {
        if stats.len() != self.blocks.len() {
            return Err(Error::Shape(format!("{} statistics for {} layers", stats.len(), self.blocks.len())));
        }
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            normstats::update_running_in_place(&mut block.norm, s, momentum)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
            && self
                .blocks
                .iter()
                .all(|b| b.norm.running_mean.iter().chain(&b.norm.running_var).all(|v| v.is_finite()))
    }
}

/// Tape variables standing for the trainable parameters, aligned with
/// [`ModelParams::ids`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    ids: Vec<ParamId>,
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn from_parts(ids: Vec<ParamId>, vars: Vec<Var>) -> Self {
        assert_eq!(ids.len(), vars.len(), "one variable per parameter id");
        ParamVars { ids, vars }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, id: ParamId) -> Var {
        let i = self.ids.iter().position(|&p| p == id).expect("parameter id present");
        self.vars[i]
    }
}

/// Graph handles produced by [`forward_on_tape`].
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub logits: Option<Var>,
    /// Pre-normalization features of each layer that was reached.
    pub prenorm: Vec<Var>,
    /// Statistics of each reached layer's pre-normalization features over the batch.
    pub layer_stats: Vec<BatchStats>,
}

/// Records the network on `tape`. With `stop_at_layer = Some(l)` the pass
/// ends right after the pre-normalization features of 0-based layer `l`.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    input: Var,
    mode: &NormMode,
    stop_at_layer: Option<usize>,
) -> Result<TapeForward> {
    let config = &params.config;
    let [n, c, _, _] = tape.value(input).shape();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if c != config.in_channels {
        return Err(Error::Shape(format!("input has {c} channels, network expects {}", config.in_channels)));
    }
    if let NormMode::ExternalStats(stats) = mode {
        let needed = stop_at_layer.unwrap_or(config.num_layers());
        if stats.len() < needed.min(config.num_layers()) {
            return Err(Error::Config(format!("{} external statistics for {needed} layers", stats.len())));
        }
    }
    let padding = config.padding();
    let mut x = input;
    let mut prenorm = Vec::new();
    let mut layer_stats = Vec::new();
    for (l, block) in params.blocks.iter().enumerate() {
        let h = tape.conv2d(x, vars.get(ParamId::ConvKernel(l)), padding)?;
        let h = tape.add_channel(h, vars.get(ParamId::ConvBias(l)))?;
        prenorm.push(h);
        let stats = normstats::compute_batch_stats(tape.value(h))?;
        if stop_at_layer == Some(l) {
            layer_stats.push(stats);
            return Ok(TapeForward { logits: None, prenorm, layer_stats });
        }
        let eps = block.norm.eps;
        let normed = match mode {
            NormMode::TrainBatch | NormMode::TargetSpecific => {
                let mean = tape.channel_mean(h)?;
                let centered = tape.sub_channel(h, mean)?;
                let sq = tape.mul(centered, centered)?;
                let var = tape.channel_mean(sq)?;
                let var = tape.shift(var, eps)?;
                let inv_std = tape.powf(var, -0.5)?;
                tape.mul_channel(centered, inv_std)?
            }
            NormMode::SourceRunning => {
                normalize_with(tape, h, &block.norm.running_mean, &block.norm.running_var, eps)?
            }
            NormMode::ExternalStats(stats) => normalize_with(tape, h, &stats[l].mean, &stats[l].var, eps)?,
        };
        layer_stats.push(stats);
        let scaled = tape.mul_channel(normed, vars.get(ParamId::NormWeight(l)))?;
        let shifted = tape.add_channel(scaled, vars.get(ParamId::NormBias(l)))?;
        x = tape.relu(shifted)?;
    }
    let logits = tape.conv2d(x, vars.get(ParamId::ClassifierKernel), 0)?;
    let logits = tape.add_channel(logits, vars.get(ParamId::ClassifierBias))?;
    tape.value(logits).ensure_finite("logits")?;
    Ok(TapeForward { logits: Some(logits), prenorm, layer_stats })
}

fn normalize_with(tape: &mut Tape, h: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
    if let Some(v) = var.iter().find(|v| **v < 0.0 || v.is_nan()) {
        return Err(Error::Domain(format!("negative variance {v}")));
    }
    let mean = tape.constant(Tensor::channel_vector(mean));
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let inv_std = tape.constant(Tensor::channel_vector(&inv_std));
    let centered = tape.sub_channel(h, mean)?;
    tape.mul_channel(centered, inv_std)
}

/// Result of a plain (untaped) forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Style signature of every sample at the configured style layer.
    pub styles: Vec<StyleSignature>,
    /// Batch statistics of every layer's pre-normalization features.
    pub layer_stats: Vec<BatchStats>,
}

/// Pure forward pass; parameters are not modified.
pub fn forward(params: &ModelParams, batch: &Tensor, mode: &NormMode) -> Result<ForwardOutput> {
    let mut tape = Tape::inference();
    let vars = params.to_vars(&mut tape);
    let input = tape.constant(batch.clone());
    let out = forward_on_tape(&mut tape, params, &vars, input, mode, None)?;
    let style_features = tape.value(out.prenorm[params.config.style_layer - 1]);
    let styles = per_sample_styles(style_features, params.config.norm_eps)?;
    Ok(ForwardOutput {
        logits: tape.value(out.logits.expect("full pass")).clone(),
        styles,
        layer_stats: out.layer_stats,
    })
}

/// Forward pass that folds the batch statistics into the running statistics
/// when `update_running` is set and the mode is [`NormMode::TrainBatch`].
pub fn forward_mut(
    params: &mut ModelParams,
    batch: &Tensor,
    mode: &NormMode,
    update_running: bool,
) -> Result<ForwardOutput> {
    let out = forward(params, batch, mode)?;
    if update_running && *mode == NormMode::TrainBatch {
        params.update_running_stats(&out.layer_stats, normstats::DEFAULT_MOMENTUM)?;
    }
    Ok(out)
}

fn per_sample_styles(features: &Tensor, eps: f64) -> Result<Vec<StyleSignature>> {
    (0..features.batch())
        .map(|i| Ok(StyleSignature::from_stats(&normstats::compute_batch_stats(&features.sample(i))?, eps)))
        .collect()
}

/// Pre-normalization features of 0-based `layer`, earlier layers normalized per `mode`.
pub fn prenorm_features(params: &ModelParams, batch: &Tensor, mode: &NormMode, layer: usize) -> Result<Tensor> {
    if layer >= params.config.num_layers() {
        return Err(Error::Config(format!("layer {layer} outside the network")));
    }
    let mut tape = Tape::inference();
    let vars = params.to_vars(&mut tape);
    let input = tape.constant(batch.clone());
    let out = forward_on_tape(&mut tape, params, &vars, input, mode, Some(layer))?;
    Ok(tape.value(out.prenorm[layer]).clone())
}

/// Style signature of a single image: a target-specific partial forward of
/// the image alone up to the style layer.
pub fn extract_style(params: &ModelParams, image: &Tensor) -> Result<StyleSignature> {
    if image.batch() != 1 {
        return Err(Error::Shape(format!("style extraction takes one image, got {}", image.batch())));
    }
    let layer = params.config.style_layer - 1;
    let features = prenorm_features(params, image, &NormMode::TargetSpecific, layer)?;
    Ok(StyleSignature::from_stats(&normstats::compute_batch_stats(&features)?, params.config.norm_eps))
}

/// Per-pixel argmax over classes (lowest class index wins ties).
pub fn argmax(logits: &Tensor) -> LabelMap {
    let [n, k, h, w] = logits.shape();
    let mut labels = Vec::with_capacity(n * h * w);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                let mut best_v = logits.get(ni, 0, y, x);
                for c in 1..k {
                    let v = logits.get(ni, c, y, x);
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                labels.push(best as u8);
            }
        }
    }
    LabelMap::from_vec([n, h, w], labels).expect("shape product")
}

pub fn predict(params: &ModelParams, batch: &Tensor, mode: &NormMode) -> Result<LabelMap> {
    Ok(argmax(&forward(params, batch, mode)?.logits))
}
