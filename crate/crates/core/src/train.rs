//! Masked cross-entropy, the learning-rate schedule and the SGD training loop.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::arch::{build, frozen_slots, init_params, ArchConfig, SkipInit};
use crate::data::{Dataset, RngStream};
use crate::error::{Error, Result};
use crate::graph::{backward, forward, topo_schedule, ExecutionPlan, Feed, Graph, LossRecord, ParamStore};
use crate::metrics::{predict_labels, Confusion, MetricsReport};
use crate::tensor::{LabelMap, Mode, Tensor4, IGNORE_LABEL};

fn check_logits(logits: &Tensor4, labels: &LabelMap) -> Result<()> {
    if (labels.n, labels.h, labels.w) != (logits.n, logits.h, logits.w) {
        return Err(Error::ShapeMismatch(format!(
            "logits {}x{}x{} vs labels {}x{}x{}",
            logits.n, logits.h, logits.w, labels.n, labels.h, labels.w
        )));
    }
    let c = logits.c;
    if let Some(&bad) = labels.labels().iter().find(|&&l| l != IGNORE_LABEL && l as usize >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} with {c} classes")));
    }
    Ok(())
}

/// Calls `f(offset, label, probs, -log p[label])` for every labelled pixel,
/// where `offset` indexes the pixel's class-0 logit.
fn for_each_pixel(logits: &Tensor4, labels: &LabelMap, mut f: impl FnMut(usize, usize, &[f64], f64)) {
    let (c, hw) = (logits.c, logits.h * logits.w);
    let x = logits.data();
    let mut probs = vec![0.0; c];
    for s in 0..logits.n {
        for p in 0..hw {
            let label = labels.labels()[s * hw + p];
            if label == IGNORE_LABEL {
                continue;
            }
            let label = label as usize;
            let at = |k: usize| (s * c + k) * hw + p;
            let max = (0..c).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, pk) in probs.iter_mut().enumerate() {
                *pk = (x[at(k)] - max).exp();
                sum += *pk;
            }
            let loss = sum.ln() - (x[at(label)] - max);
            probs.iter_mut().for_each(|pk| *pk /= sum);
            f(s * c * hw + p, label, &probs, loss);
        }
    }
}

/// Per-pixel softmax cross-entropy averaged over pixels whose label is not
/// 255. If every pixel is ignored the loss and gradient are zero and
/// `valid_pixels` is 0.
pub fn masked_xent(logits: &Tensor4, labels: &LabelMap) -> Result<LossRecord> {
    check_logits(logits, labels)?;
    let (n, c, h, w) = (logits.n, logits.c, logits.h, logits.w);
    let hw = h * w;
    let mut grad = Tensor4::zeros(n, c, h, w);
    let valid = labels.labels().iter().filter(|&&l| l != IGNORE_LABEL).count();
    if valid == 0 {
        return Ok(LossRecord {
            loss: 0.0,
            grad,
            valid_pixels: 0,
        });
    }
    let inv = 1.0 / valid as f64;
    let g = grad.data_mut();
    let mut loss = 0.0;
    for_each_pixel(logits, labels, |base, label, probs, l| {
        loss += l;
        for (k, pk) in probs.iter().enumerate() {
            let target = if k == label { 1.0 } else { 0.0 };
            g[base + k * hw] = (pk - target) * inv;
        }
    });
    Ok(LossRecord {
        loss: loss * inv,
        grad,
        valid_pixels: valid,
    })
}

/// Unaveraged `-log p[label]` per labelled pixel, in pixel order.
pub fn pixel_losses(logits: &Tensor4, labels: &LabelMap) -> Result<Vec<f64>> {
    check_logits(logits, labels)?;
    let mut out = Vec::new();
    for_each_pixel(logits, labels, |_, _, _, l| out.push(l));
    Ok(out)
}

fn default_base_lr() -> f64 {
    1e-5
}
fn default_momentum() -> f64 {
    0.9
}
fn default_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    4
}
fn default_decay_rate() -> f64 {
    0.10
}
fn default_decay_every_early() -> usize {
    10
}
fn default_decay_every_late() -> usize {
    5
}
fn default_decay_late_after() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fraction the rate loses at each decay step.
    #[serde(default = "default_decay_rate")]
    pub decay_rate: f64,
    #[serde(default = "default_decay_every_early")]
    pub decay_every_early: usize,
    #[serde(default = "default_decay_every_late")]
    pub decay_every_late: usize,
    /// Epoch at which the late decay interval takes over.
    #[serde(default = "default_decay_late_after")]
    pub decay_late_after: usize,
    /// Record wall-clock milliseconds per epoch. Off by default so history
    /// files are reproducible byte for byte.
    #[serde(default)]
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: default_base_lr(),
            momentum: default_momentum(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            decay_rate: default_decay_rate(),
            decay_every_early: default_decay_every_early(),
            decay_every_late: default_decay_every_late(),
            decay_late_after: default_decay_late_after(),
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad(format!("base_lr {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.decay_rate) {
            return bad(format!("decay_rate {}", self.decay_rate));
        }
        if self.batch_size == 0 || self.decay_every_early == 0 || self.decay_every_late == 0 {
            return bad("batch size and decay intervals must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate for a 0-based epoch: one decay step every
/// `decay_every_early` epochs up to `decay_late_after`, then one every
/// `decay_every_late` epochs.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let early = epoch.min(cfg.decay_late_after) / cfg.decay_every_early;
    let late = epoch.saturating_sub(cfg.decay_late_after) / cfg.decay_every_late;
    cfg.base_lr * (1.0 - cfg.decay_rate).powi((early + late) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub master_loss: f64,
    /// Absent for single-network variants.
    pub slave_loss: Option<f64>,
    pub ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Metrics of the trained Master on the training set.
    pub metrics: Option<MetricsReport>,
}

pub const HISTORY_HEADER: &str = "epoch,lr,master_loss,slave_loss,ms";

impl TrainHistory {
    /// CSV records followed by a `# metrics` block.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(HISTORY_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let slave = r.slave_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.lr, r.master_loss, slave, r.ms);
        }
        out.push_str("# metrics\n");
        match &self.metrics {
            Some(m) => {
                let _ = writeln!(out, "{}", m.line());
            }
            None => out.push_str("none\n"),
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub graph: Graph,
    pub params: ParamStore,
    pub history: TrainHistory,
}

/// Momentum step on every slot not frozen by the architecture.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &crate::graph::GradStore,
    lr: f64,
    momentum: f64,
    frozen: &[bool],
) -> Result<()> {
    params.sgd_step(grads, lr, momentum, frozen)
}

/// Builds `arch`, initializes it from `tc.seed` and trains on `dataset`.
pub fn train(arch: &ArchConfig, tc: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let graph = build(arch)?;
    let params = init_params(&graph, tc.seed, SkipInit::Zero);
    train_from(graph, params, arch, tc, dataset)
}

/// Trains given parameters in place of a fresh initialization.
pub fn train_from(
    graph: Graph,
    mut params: ParamStore,
    arch: &ArchConfig,
    tc: &TrainConfig,
    dataset: &Dataset,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    dataset.validate()?;
    check_extents(arch, dataset)?;
    let plan = topo_schedule(&graph)?;
    let frozen = frozen_slots(&graph, arch);
    let mut shuffle = RngStream::new(tc.seed, "train/shuffle");
    let mut drop_rng = RngStream::new(tc.seed, "train/dropout");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epochs = Vec::with_capacity(tc.epochs);
    let mut batch_index = 0;
    for epoch in 0..tc.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, tc);
        shuffle.shuffle(&mut order);
        let (mut master_sum, mut slave_sum, mut batches) = (0.0, 0.0, 0usize);
        let mut has_slave = false;
        for chunk in order.chunks(tc.batch_size) {
            let ctx = |e: Error| Error::Batch {
                batch: batch_index,
                source: Box::new(e),
            };
            let (image, labels) = dataset.batch(chunk).map_err(ctx)?;
            let feed = Feed {
                image: &image,
                labels: Some(&labels),
            };
            let tape = forward(&graph, &plan, &feed, &params, Mode::Train, &mut drop_rng).map_err(ctx)?;
            let grads = backward(&graph, &plan, &tape, &params, arch.loss_weights).map_err(ctx)?;
            if !grads.all_finite() {
                return Err(ctx(Error::NonFinite("gradient".into())));
            }
            params.sgd_step(&grads, lr, tc.momentum, &frozen).map_err(ctx)?;
            master_sum += tape.master_loss(&graph).unwrap_or(0.0);
            if let Some(s) = tape.slave_loss(&graph) {
                slave_sum += s;
                has_slave = true;
            }
            batches += 1;
            batch_index += 1;
        }
        let ms = if tc.record_timing {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        epochs.push(EpochRecord {
            epoch,
            lr,
            master_loss: master_sum / batches as f64,
            slave_loss: has_slave.then(|| slave_sum / batches as f64),
            ms,
        });
    }
    let metrics = match evaluate_with(&graph, &plan, &params, dataset, tc.batch_size) {
        Ok(m) => Some(m),
        Err(Error::EmptyConfusion) => None,
        Err(e) => return Err(e),
    };
    Ok(TrainOutcome {
        graph,
        params,
        history: TrainHistory { epochs, metrics },
    })
}

fn check_extents(arch: &ArchConfig, dataset: &Dataset) -> Result<()> {
    if let Some((c, h, w)) = dataset.extents() {
        if (c, h, w) != (arch.in_channels, arch.input_h, arch.input_w) {
            return Err(Error::ShapeMismatch(format!(
                "dataset samples are {c}x{h}x{w}, architecture expects {}x{}x{}",
                arch.in_channels, arch.input_h, arch.input_w
            )));
        }
    }
    if dataset.num_classes != arch.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} classes, architecture {}",
            dataset.num_classes, arch.num_classes
        )));
    }
    Ok(())
}

/// Master predictions (eval mode) for a batch of images.
pub fn predict(graph: &Graph, plan: &ExecutionPlan, params: &ParamStore, image: &Tensor4) -> Result<LabelMap> {
    let feed = Feed { image, labels: None };
    let mut rng = RngStream::new(0, "eval");
    let tape = forward(graph, plan, &feed, params, Mode::Eval, &mut rng)?;
    Ok(predict_labels(tape.master_score(graph)))
}

fn evaluate_with(
    graph: &Graph,
    plan: &ExecutionPlan,
    params: &ParamStore,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<MetricsReport> {
    let mut confusion = Confusion::new(dataset.num_classes);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (image, labels) = dataset.batch(chunk)?;
        let pred = predict(graph, plan, params, &image)?;
        confusion.accumulate(&pred, &labels)?;
    }
    confusion.finalize()
}

/// Master-network metrics over a whole dataset.
pub fn evaluate(graph: &Graph, params: &ParamStore, dataset: &Dataset) -> Result<MetricsReport> {
    let plan = topo_schedule(graph)?;
    evaluate_with(graph, &plan, params, dataset, 4)
}
