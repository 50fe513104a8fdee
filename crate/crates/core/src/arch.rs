//! Whole-network constructors for the seven FCN-8s / MSNet variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{attach_combined, conv1x1, upsample_node, BlockSpec, NetworkPorts, SkipSpec};
use crate::data::RngStream;
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, GraphOutputs, GradGate, NodeId, Op, ParamStore, Role, SlotKind};
use crate::tensor::bilinear_upsample_params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    FCN8s,
    FCN8sF1,
    FCN8sF2,
    MSNetB1,
    MSNetB2,
    MSNetFB1,
    MSNetFB2,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::FCN8s,
        Variant::FCN8sF1,
        Variant::FCN8sF2,
        Variant::MSNetB1,
        Variant::MSNetB2,
        Variant::MSNetFB1,
        Variant::MSNetFB2,
    ];

    /// `(N, P)`: forward and backward skip counts per block.
    pub fn skips(self) -> (usize, usize) {
        match self {
            Variant::FCN8s => (0, 0),
            Variant::FCN8sF1 => (1, 0),
            Variant::FCN8sF2 => (3, 0),
            Variant::MSNetB1 => (0, 1),
            Variant::MSNetB2 => (0, 3),
            Variant::MSNetFB1 => (1, 1),
            Variant::MSNetFB2 => (3, 3),
        }
    }

    /// Two-network (Master + Slave) variants.
    pub fn is_msnet(self) -> bool {
        self.skips().1 > 0
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::FCN8s => "FCN8s",
            Variant::FCN8sF1 => "FCN8sF1",
            Variant::FCN8sF2 => "FCN8sF2",
            Variant::MSNetB1 => "MSNetB1",
            Variant::MSNetB2 => "MSNetB2",
            Variant::MSNetFB1 => "MSNetFB1",
            Variant::MSNetFB2 => "MSNetFB2",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown variant {s:?}")))
    }
}

fn default_num_blocks() -> usize {
    7
}
fn default_pool_stages() -> usize {
    5
}
fn default_widths() -> Vec<usize> {
    vec![4, 8, 16, 16, 16, 32, 32]
}
fn default_num_classes() -> usize {
    3
}
fn default_in_channels() -> usize {
    1
}
fn default_extent() -> usize {
    64
}
fn default_loss_weights() -> [f64; 2] {
    [1.0, 1.0]
}

/// Architecture descriptor. Every field but `variant` has a toy-scale default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub variant: Variant,
    #[serde(default = "default_num_blocks")]
    pub num_blocks: usize,
    /// Max pools follow blocks `1..=pool_stages`.
    #[serde(default = "default_pool_stages")]
    pub pool_stages: usize,
    #[serde(default = "default_widths")]
    pub channel_widths: Vec<usize>,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_extent")]
    pub input_h: usize,
    #[serde(default = "default_extent")]
    pub input_w: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub backward_skip_grad_gate: GradGate,
    /// `(master, slave)` weights of the total loss.
    #[serde(default = "default_loss_weights")]
    pub loss_weights: [f64; 2],
    /// Keep upsampling kernels at their bilinear initialization.
    #[serde(default)]
    pub freeze_upsample: bool,
}

impl ArchConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            num_blocks: default_num_blocks(),
            pool_stages: default_pool_stages(),
            channel_widths: default_widths(),
            num_classes: default_num_classes(),
            in_channels: default_in_channels(),
            input_h: default_extent(),
            input_w: default_extent(),
            dropout_rate: 0.0,
            backward_skip_grad_gate: GradGate::Open,
            loss_weights: default_loss_weights(),
            freeze_upsample: false,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.channel_widths.len() != self.num_blocks {
            return bad(format!(
                "{} channel widths for {} blocks",
                self.channel_widths.len(),
                self.num_blocks
            ));
        }
        if self.channel_widths.contains(&0) || self.num_classes == 0 || self.in_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.pool_stages < 3 || self.num_blocks <= self.pool_stages {
            return bad(format!(
                "the 8s head needs 3 <= pool_stages < num_blocks, got {} pools for {} blocks",
                self.pool_stages, self.num_blocks
            ));
        }
        let div = 1usize << self.pool_stages;
        if self.input_h == 0 || self.input_w == 0 || !self.input_h.is_multiple_of(div) || !self.input_w.is_multiple_of(div) {
            return bad(format!(
                "input {}x{} is not divisible by {div}",
                self.input_h, self.input_w
            ));
        }
        if self.num_classes > crate::data::PGM_MAX_CLASSES {
            return bad(format!("{} classes", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {}", self.dropout_rate));
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad(format!("loss weights {:?}", self.loss_weights));
        }
        Ok(())
    }

    /// Layout of block `l` (1-based): 3×3 convolutions up to the last pool
    /// stage, 1×1 convolutions with dropout afterwards.
    pub fn block_spec(&self, l: usize) -> BlockSpec {
        let conv_count = if l <= 2 || l > self.pool_stages { 2 } else { 3 };
        let dense = l > self.pool_stages;
        BlockSpec {
            block_index: l,
            conv_count,
            in_channels: if l == 1 { self.in_channels } else { self.channel_widths[l - 2] },
            out_channels: self.channel_widths[l - 1],
            kernel_size: if dense { 1 } else { 3 },
            has_dropout: dense,
            dropout_rate: self.dropout_rate,
        }
    }
}

/// Builds one network (all blocks plus the score head) into `b`.
fn build_network(
    b: &mut GraphBuilder,
    cfg: &ArchConfig,
    role: Role,
    input: NodeId,
    n_skips: usize,
    p_skips: usize,
    slave: Option<&NetworkPorts>,
    skips: &mut Vec<SkipSpec>,
) -> Result<(NetworkPorts, NodeId, NodeId)> {
    let p = role.letter();
    let mut net = NetworkPorts::new(role, cfg.pool_stages);
    let mut x = input;
    for l in 1..=cfg.num_blocks {
        net.inputs.push(x);
        let n = n_skips.min(l);
        let (y, s) = attach_combined(b, &mut net, slave, &cfg.block_spec(l), n, p_skips, cfg.num_blocks)?;
        skips.extend(s);
        x = if l <= cfg.pool_stages {
            b.push(Op::MaxPool, vec![y], role, Some(l + 1), format!("{p}.pool{l}"))?
        } else {
            y
        };
    }
    let ps = cfg.pool_stages;
    let k = cfg.num_classes;
    let last = *net.outputs.last().expect("at least one block");
    let (score_fr, _) = conv1x1(b, format!("{p}.score_fr"), role, None, SlotKind::Conv, last, k)?;
    let mut up = upsample_node(b, format!("{p}.upscore2"), role, None, score_fr, 2)?;
    // fuse with scores of the two deepest pooled maps that precede the last pool
    for (i, stage) in [ps - 1, ps - 2].into_iter().enumerate() {
        let pooled = net.input(stage + 1).expect("pooled map exists");
        let (side, _) = conv1x1(b, format!("{p}.score_pool{stage}"), role, None, SlotKind::Conv, pooled, k)?;
        let fused = b.push(Op::Add, vec![up, side], role, None, format!("{p}.fuse_pool{stage}"))?;
        up = if i == 0 {
            upsample_node(b, format!("{p}.upscore_pool{stage}"), role, None, fused, 2)?
        } else {
            let factor = 1usize << (ps - 2);
            upsample_node(b, format!("{p}.upscore{factor}"), role, None, fused, factor)?
        };
    }
    let score = b.push(Op::Score, vec![up], role, None, format!("{p}.score"))?;
    let loss = b.push(Op::Loss, vec![score], role, None, format!("{p}.loss"))?;
    Ok((net, score, loss))
}

/// Builds the graph of `cfg` together with every attached skip.
pub fn build_with_skips(cfg: &ArchConfig) -> Result<(Graph, Vec<SkipSpec>)> {
    cfg.validate()?;
    let mut b = GraphBuilder::new();
    let input = b.input(cfg.in_channels, cfg.input_h, cfg.input_w)?;
    let (n, p) = cfg.variant.skips();
    let mut skips = Vec::new();
    let slave = if cfg.variant.is_msnet() {
        Some(build_network(&mut b, cfg, Role::Slave, input, 0, 0, None, &mut skips)?)
    } else {
        None
    };
    let (_, master_score, master_loss) = build_network(
        &mut b,
        cfg,
        Role::Master,
        input,
        n,
        p,
        slave.as_ref().map(|s| &s.0),
        &mut skips,
    )?;
    let outputs = GraphOutputs {
        master_score,
        master_loss,
        slave_score: slave.as_ref().map(|s| s.1),
        slave_loss: slave.as_ref().map(|s| s.2),
    };
    Ok((b.finish(outputs, cfg.backward_skip_grad_gate)?, skips))
}

pub fn build(cfg: &ArchConfig) -> Result<Graph> {
    build_with_skips(cfg).map(|(g, _)| g)
}

/// Exact number of scalar parameters.
pub fn param_count(cfg: &ArchConfig) -> Result<usize> {
    Ok(build(cfg)?.slots().iter().map(|s| s.scalar_count()).sum())
}

/// How skip transforms `W_l`, `U_l` are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SkipInit {
    /// Zero weights and bias: every network starts as its skip-free baseline.
    #[default]
    Zero,
    /// Same He-normal draws as ordinary convolutions.
    He,
}

/// Seeded initialization. Convolutions get He-normal weights (variance
/// `2 / fan_in`) and zero bias, upsamplers the bilinear stencil. Draws come
/// from a stream keyed by slot name, so identically named slots agree across
/// architectures.
pub fn init_params(graph: &Graph, seed: u64, skip_init: SkipInit) -> ParamStore {
    let mut store = ParamStore::zeros(graph.slots());
    let ids: Vec<_> = store.iter().map(|(id, spec, _)| (id, spec.clone())).collect();
    for (id, spec) in ids {
        let p = store.get_mut(id);
        match spec.kind {
            SlotKind::Upsample => *p = bilinear_upsample_params(spec.out_channels, spec.stride),
            SlotKind::SkipTransform if skip_init == SkipInit::Zero => {}
            SlotKind::Conv | SlotKind::SkipTransform => {
                let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
                let std = (2.0 / fan_in).sqrt();
                let mut rng = RngStream::new(seed, &format!("init/{}", spec.name));
                for w in &mut p.weights {
                    *w = std * rng.normal();
                }
            }
        }
    }
    store
}

/// Zeroes every skip transform, weights and bias.
pub fn zero_skip_transforms(graph: &Graph, store: &mut ParamStore) {
    for (i, spec) in graph.slots().iter().enumerate() {
        if spec.kind == SlotKind::SkipTransform {
            let p = store.get_mut(crate::graph::SlotId(i));
            p.weights.iter_mut().for_each(|w| *w = 0.0);
            p.bias.iter_mut().for_each(|w| *w = 0.0);
        }
    }
}

/// Slots the optimizer must leave alone.
pub fn frozen_slots(graph: &Graph, cfg: &ArchConfig) -> Vec<bool> {
    graph
        .slots()
        .iter()
        .map(|s| cfg.freeze_upsample && s.kind == SlotKind::Upsample)
        .collect()
}
