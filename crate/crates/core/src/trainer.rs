//! Source-domain training: episodic meta-learning with a simulated inner SGD
//! step, and plain aggregation over pooled sources.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{pixel_cross_entropy, GradientMap, Tape, Var};
use crate::error::{Error, Result};
use crate::normstats::{BatchStats, DEFAULT_MOMENTUM};
use crate::segnet::{forward_on_tape, ModelParams, NormMode, ParamGradients, ParamId, ParamVars};
use crate::synth::{derive_seed, DomainDataset};
use crate::tensor::{LabelMap, Tensor};

/// Label excluded from the loss.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMethod {
    /// One model on the pooled source domains.
    Agg,
    /// Episodic meta-learning over source-domain splits.
    Mldg,
}

impl FromStr for TrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "agg" => Ok(Self::Agg),
            "mldg" => Ok(Self::Mldg),
            other => Err(Error::Config(format!("unknown training method '{other}'"))),
        }
    }
}

impl fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Agg => "agg",
            Self::Mldg => "mldg",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetaGradient {
    /// Differentiates through the inner step (second order).
    Exact,
    /// Treats the inner-step gradient as a constant.
    FirstOrder,
}

impl FromStr for MetaGradient {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "exact" => Ok(Self::Exact),
            "firstorder" => Ok(Self::FirstOrder),
            other => Err(Error::Config(format!("unknown meta-gradient mode '{other}'"))),
        }
    }
}

/// Which loss the weight `alpha` multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossOrder {
    /// `L_ds + alpha * L_dg`
    WeightGeneralization,
    /// `L_dg + alpha * L_ds`
    WeightSpecific,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: TrainMethod,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub alpha: f64,
    /// Total images per step, split evenly over the source domains.
    pub batch_size: usize,
    pub epochs: usize,
    /// Meta-train : meta-test domain counts; `None` splits as evenly as possible.
    pub split: Option<(usize, usize)>,
    pub poly_power: f64,
    pub meta_gradient: MetaGradient,
    pub loss_order: LossOrder,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random horizontal flips of training samples.
    pub flip: bool,
    /// Random square crops of this side length.
    pub crop: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: TrainMethod::Mldg,
            inner_lr: 1e-3,
            outer_lr: 5e-3,
            alpha: 1.0,
            batch_size: 8,
            epochs: 1,
            split: None,
            poly_power: 0.9,
            meta_gradient: MetaGradient::Exact,
            loss_order: LossOrder::WeightGeneralization,
            momentum: 0.9,
            weight_decay: 5e-4,
            flip: true,
            crop: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return bad("inner learning rate must be finite and >= 0");
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return bad("outer learning rate must be finite and > 0");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight decay >= 0");
        }
        if let Some((n, m)) = self.split {
            if n == 0 || m == 0 {
                return bad("both sides of the meta split need at least one domain");
            }
        }
        if self.crop == Some(0) {
            return bad("crop size must be positive");
        }
        Ok(())
    }

    /// The meta split used with `domains` source domains.
    pub fn split_for(&self, domains: usize) -> Result<(usize, usize)> {
        if domains < 2 {
            return Err(Error::Config(format!(
                "meta-learning needs at least 2 source domains, got {domains}"
            )));
        }
        if domains == 2 {
            return Ok((1, 1));
        }
        match self.split {
            None => Ok((domains.div_ceil(2), domains / 2)),
            Some((n, m)) if n + m == domains && n > 0 && m > 0 => Ok((n, m)),
            Some((n, m)) => Err(Error::Config(format!("split {n}:{m} does not cover {domains} domains"))),
        }
    }

    /// Images drawn from each domain per step.
    pub fn per_domain(&self, domains: usize) -> usize {
        (self.batch_size / domains.max(1)).max(1)
    }
}

/// `base * (1 - t/T)^power`, zero once `t >= T`.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    base * (1.0 - step as f64 / total as f64).powf(power)
}

/// Samples of one domain within a step.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub domain_id: u32,
    pub images: Tensor,
    pub masks: LabelMap,
}

/// Per-domain batches split by whole domains into meta-train and meta-test.
#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    pub meta_train: Vec<DomainBatch>,
    pub meta_test: Vec<DomainBatch>,
}

fn concat(parts: &[DomainBatch]) -> Result<(Tensor, LabelMap)> {
    let images: Vec<&Tensor> = parts.iter().map(|b| &b.images).collect();
    let masks: Vec<&LabelMap> = parts.iter().map(|b| &b.masks).collect();
    Ok((Tensor::concat_batch(&images)?, LabelMap::concat_batch(&masks)?))
}

impl EpisodeBatch {
    pub fn train_batch(&self) -> Result<(Tensor, LabelMap)> {
        concat(&self.meta_train)
    }

    pub fn test_batch(&self) -> Result<(Tensor, LabelMap)> {
        concat(&self.meta_test)
    }

    pub fn pooled(&self) -> Result<(Tensor, LabelMap)> {
        let all: Vec<DomainBatch> = self.meta_train.iter().chain(&self.meta_test).cloned().collect();
        concat(&all)
    }

    /// Every domain sits on exactly one side.
    pub fn is_disjoint(&self) -> bool {
        self.meta_train.iter().all(|a| self.meta_test.iter().all(|b| a.domain_id != b.domain_id))
    }
}

fn sample_domain(domain: &DomainDataset, count: usize, config: &TrainConfig, rng: &mut impl Rng) -> Result<DomainBatch> {
    if domain.is_empty() {
        return Err(Error::Config(format!("domain {} has no samples", domain.domain_id)));
    }
    let picks: Vec<usize> = if count <= domain.len() {
        index::sample(rng, domain.len(), count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..domain.len())).collect()
    };
    let mut images = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    for i in picks {
        let (mut image, mut mask) = (domain.images[i].clone(), domain.masks[i].clone());
        if let Some(size) = config.crop {
            let (h, w) = (image.height(), image.width());
            if size > h || size > w {
                return Err(Error::Config(format!("crop {size} larger than {h}x{w} images")));
            }
            let top = rng.random_range(0..=h - size);
            let left = rng.random_range(0..=w - size);
            image = image.crop(top, left, size, size)?;
            mask = mask.crop(top, left, size, size)?;
        }
        if config.flip && rng.random_bool(0.5) {
            image = image.flip_horizontal();
            mask = mask.flip_horizontal();
        }
        images.push(image);
        masks.push(mask);
    }
    Ok(DomainBatch {
        domain_id: domain.domain_id,
        images: Tensor::concat_batch(&images)?,
        masks: LabelMap::concat_batch(&masks)?,
    })
}

/// Equal-size batches from every domain, split at random by whole domains.
pub fn sample_episode(domains: &[DomainDataset], config: &TrainConfig, rng: &mut impl Rng) -> Result<EpisodeBatch> {
    let (n_train, _) = config.split_for(domains.len())?;
    let per = config.per_domain(domains.len());
    let mut batches = domains
        .iter()
        .map(|d| sample_domain(d, per, config, rng))
        .collect::<Result<Vec<_>>>()?;
    batches.shuffle(rng);
    let meta_test = batches.split_off(n_train);
    Ok(EpisodeBatch { meta_train: batches, meta_test })
}

/// Equal-size batches from every domain, pooled.
pub fn sample_pooled(domains: &[DomainDataset], config: &TrainConfig, rng: &mut impl Rng) -> Result<(Tensor, LabelMap)> {
    if domains.is_empty() {
        return Err(Error::Config("training needs at least one source domain".into()));
    }
    let per = config.per_domain(domains.len());
    let batches = domains
        .iter()
        .map(|d| sample_domain(d, per, config, rng))
        .collect::<Result<Vec<_>>>()?;
    concat(&batches)
}

/// Cross-entropy of a train-mode forward. Returns the loss and per-layer
/// batch statistics.
pub fn domain_specific_loss(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    images: &Tensor,
    masks: &LabelMap,
) -> Result<(Var, Vec<BatchStats>)> {
    let x = tape.constant(images.clone());
    let out = forward_on_tape(tape, params, vars, x, &NormMode::TrainBatch, None)?;
    let logits = out.logits.expect("full forward");
    Ok((pixel_cross_entropy(tape, logits, masks, IGNORE_LABEL)?, out.layer_stats))
}

/// `p' = p - lr * g` on the tape. Differentiable in `p`, and in `g` when
/// `g` was produced with a recorded graph.
pub fn inner_update(tape: &mut Tape, vars: &ParamVars, grads: &[Var], lr: f64) -> Result<ParamVars> {
    if grads.len() != vars.vars().len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), vars.vars().len())));
    }
    let updated = vars
        .vars()
        .iter()
        .zip(grads)
        .map(|(&p, &g)| {
            let step = tape.scale(g, lr)?;
            tape.sub(p, step)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamVars::from_parts(vars.ids().to_vec(), updated))
}

/// Losses of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub specific: f64,
    /// `None` for aggregation steps.
    pub generalization: Option<f64>,
    pub total: f64,
}

/// Meta objective and its gradient with respect to every trainable
/// parameter, plus the batch statistics of both passes.
pub struct MetaGradientResult {
    pub losses: StepLosses,
    pub grads: ParamGradients,
    pub train_stats: Vec<BatchStats>,
    pub test_stats: Vec<BatchStats>,
}

pub fn meta_gradient(params: &ModelParams, episode: &EpisodeBatch, config: &TrainConfig) -> Result<MetaGradientResult> {
    let (x_tr, y_tr) = episode.train_batch()?;
    let (x_te, y_te) = episode.test_batch()?;
    let mut tape = Tape::new();
    let vars = params.to_vars(&mut tape);
    let (l_ds, train_stats) = domain_specific_loss(&mut tape, params, &vars, &x_tr, &y_tr)?;
    let exact = config.meta_gradient == MetaGradient::Exact;
    let inner_grads = tape.grad(l_ds, vars.vars(), exact)?;
    let adapted = inner_update(&mut tape, &vars, &inner_grads, config.inner_lr)?;
    let (l_dg, test_stats) = domain_specific_loss(&mut tape, params, &adapted, &x_te, &y_te)?;
    let (first, second) = match config.loss_order {
        LossOrder::WeightGeneralization => (l_ds, l_dg),
        LossOrder::WeightSpecific => (l_dg, l_ds),
    };
    let weighted = tape.scale(second, config.alpha)?;
    let l_meta = tape.add(first, weighted)?;
    let losses = StepLosses {
        specific: tape.value(l_ds).item(),
        generalization: Some(tape.value(l_dg).item()),
        total: tape.value(l_meta).item(),
    };
    if ![losses.specific, losses.total, losses.generalization.unwrap_or(0.0)].iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite meta loss: L_ds={} L_dg={:?} L_meta={}",
            losses.specific, losses.generalization, losses.total
        )));
    }
    let grads = tape.grad(l_meta, vars.vars(), false)?;
    let grads = vars.ids().iter().zip(grads).map(|(&id, g)| (id, tape.value(g).clone())).collect();
    Ok(MetaGradientResult { losses, grads, train_stats, test_stats })
}

/// SGD with momentum and L2 weight decay:
/// `v = mu v + (g + wd p)`, `p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: GradientMap<ParamId>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: GradientMap::new() }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGradients, lr: f64) -> Result<()> {
        let mut direction = GradientMap::new();
        for (&id, g) in grads.iter() {
            let p = params.get(id);
            let mut d = g.zip_map(&p, |g, p| g + self.weight_decay * p)?;
            if self.momentum > 0.0 {
                if let Some(v) = self.velocity.get(&id) {
                    d = v.zip_map(&d, |v, d| self.momentum * v + d)?;
                }
                self.velocity.insert(id, d.clone());
            }
            direction.insert(id, d);
        }
        params.apply_gradients(&direction, lr)
    }
}

fn merge_layers(a: &[BatchStats], b: &[BatchStats]) -> Result<Vec<BatchStats>> {
    a.iter().zip(b).map(|(x, y)| x.merge(y)).collect()
}

/// One outer update from the meta objective. Running statistics absorb the
/// combined statistics of both passes once.
pub fn meta_step(
    params: &mut ModelParams,
    optimizer: &mut Sgd,
    episode: &EpisodeBatch,
    config: &TrainConfig,
    lr: f64,
) -> Result<StepLosses> {
    let result = meta_gradient(params, episode, config)?;
    optimizer.step(params, &result.grads, lr)?;
    params.update_running_stats(&merge_layers(&result.train_stats, &result.test_stats)?, DEFAULT_MOMENTUM)?;
    check_params(params, &result.losses)?;
    Ok(result.losses)
}

/// Loss and gradient of a plain train-mode pass over `images`.
pub fn loss_gradient(params: &ModelParams, images: &Tensor, masks: &LabelMap) -> Result<(f64, ParamGradients, Vec<BatchStats>)> {
    let mut tape = Tape::new();
    let vars = params.to_vars(&mut tape);
    let (loss, stats) = domain_specific_loss(&mut tape, params, &vars, images, masks)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    let grads = tape.gradients(loss, vars.vars())?;
    let grads = vars.ids().iter().zip(vars.vars()).map(|(&id, v)| (id, grads.get(v).expect("requested").clone())).collect();
    Ok((value, grads, stats))
}

/// One SGD step on the pooled batch.
pub fn agg_step(
    params: &mut ModelParams,
    optimizer: &mut Sgd,
    images: &Tensor,
    masks: &LabelMap,
    lr: f64,
) -> Result<StepLosses> {
    let (loss, grads, stats) = loss_gradient(params, images, masks)?;
    optimizer.step(params, &grads, lr)?;
    params.update_running_stats(&stats, DEFAULT_MOMENTUM)?;
    let losses = StepLosses { specific: loss, generalization: None, total: loss };
    check_params(params, &losses)?;
    Ok(losses)
}

fn check_params(params: &ModelParams, losses: &StepLosses) -> Result<()> {
    if params.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("parameters diverged after a step with losses {losses:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub losses: StepLosses,
    pub wall_seconds: f64,
}

impl TrainLogRow {
    pub const CSV_HEADER: &'static str = "step,epoch,lr,L_ds,L_dg,L_meta,wall_seconds";

    pub fn to_csv(&self) -> String {
        let dg = self.losses.generalization.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.step, self.epoch, self.lr, self.losses.specific, dg, self.losses.total, self.wall_seconds
        )
    }
}

/// Owns the parameters for one training run over fixed source domains.
pub struct Trainer<'a> {
    config: TrainConfig,
    domains: &'a [DomainDataset],
    params: ModelParams,
    optimizer: Sgd,
    rng: ChaCha8Rng,
    step: usize,
    steps_per_epoch: usize,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, domains: &'a [DomainDataset], params: ModelParams) -> Result<Self> {
        config.validate()?;
        if domains.is_empty() {
            return Err(Error::Config("training needs at least one source domain".into()));
        }
        if config.method == TrainMethod::Mldg {
            config.split_for(domains.len())?;
        }
        let pool: usize = domains.iter().map(|d| d.len()).sum();
        let per_step = config.per_domain(domains.len()) * domains.len();
        let steps_per_epoch = pool.div_ceil(per_step).max(1);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x7241]));
        let optimizer = Sgd::new(config.momentum, config.weight_decay);
        Ok(Self { config, domains, params, optimizer, rng, step: 0, steps_per_epoch, started: Instant::now() })
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.config.epochs
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    /// Runs one step; `None` once the schedule is finished.
    pub fn step(&mut self) -> Result<Option<TrainLogRow>> {
        let total = self.total_steps();
        if self.step >= total {
            return Ok(None);
        }
        let lr = poly_lr(self.config.outer_lr, self.step, total, self.config.poly_power);
        let losses = match self.config.method {
            TrainMethod::Mldg => {
                let episode = sample_episode(self.domains, &self.config, &mut self.rng)?;
                debug_assert!(episode.is_disjoint());
                meta_step(&mut self.params, &mut self.optimizer, &episode, &self.config, lr)?
            }
            TrainMethod::Agg => {
                let (x, y) = sample_pooled(self.domains, &self.config, &mut self.rng)?;
                agg_step(&mut self.params, &mut self.optimizer, &x, &y, lr)?
            }
        };
        let row = TrainLogRow {
            step: self.step,
            epoch: self.step / self.steps_per_epoch,
            lr,
            losses,
            wall_seconds: self.started.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(Some(row))
    }

    /// Runs to the end of the schedule, handing every row to `on_row`.
    pub fn run(&mut self, mut on_row: impl FnMut(&TrainLogRow, &ModelParams) -> Result<()>) -> Result<()> {
        while let Some(row) = self.step()? {
            on_row(&row, &self.params)?;
        }
        Ok(())
    }
}
