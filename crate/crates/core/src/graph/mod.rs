//! Directed acyclic computation graphs over [`Tensor4`] values.
//!
//! A [`Graph`] holds one or two networks (Master and, optionally, Slave) that
//! share a single image input. Parameters live outside the graph in a
//! [`ParamStore`]; nodes refer to them through [`SlotId`]s.

mod exec;
mod gradcheck;
mod params;
mod schedule;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ConvParams;

pub use exec::{backward, forward, Feed, LossRecord, Tape};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use params::{GradStore, ParamStore, SlotGrad};
pub use schedule::{topo_schedule, validate_acyclic, ExecutionPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Slave,
    Master,
    Shared,
}

impl Role {
    pub fn letter(self) -> char {
        match self {
            Role::Slave => 'S',
            Role::Master => 'M',
            Role::Shared => 'X',
        }
    }

    /// Slave work is scheduled before Master work at equal block index.
    pub(crate) fn schedule_rank(self) -> u8 {
        match self {
            Role::Shared => 0,
            Role::Slave => 1,
            Role::Master => 2,
        }
    }
}

/// Whether Master-side gradients flow back into the Slave through backward
/// skip edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradGate {
    #[default]
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Input,
    Conv2d { slot: SlotId },
    MaxPool,
    Upsample { slot: SlotId },
    Relu,
    Add,
    Dropout { rate: f64 },
    /// Identity marker on a network's final score map.
    Score,
    /// Masked cross-entropy of its input against the feed labels.
    Loss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Conv2d,
    MaxPool,
    Upsample,
    Relu,
    Add,
    Dropout,
    Score,
    Loss,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool => OpKind::MaxPool,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Relu => OpKind::Relu,
            Op::Add => OpKind::Add,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Score => OpKind::Score,
            Op::Loss => OpKind::Loss,
        }
    }

    pub fn slot(&self) -> Option<SlotId> {
        match *self {
            Op::Conv2d { slot } | Op::Upsample { slot } => Some(slot),
            _ => None,
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Input => 0,
            Op::Add => 2,
            _ => 1,
        }
    }
}

/// Per-sample extents of a node's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub role: Role,
    /// Block index `L` in `1..=num_blocks`; `None` for the input and the
    /// upsampling head.
    pub block: Option<usize>,
    pub name: String,
    pub shape: FeatureShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotKind {
    /// Ordinary convolution inside a block or the score head.
    Conv,
    /// 1×1 skip transformation (`W_l` forward, `U_l` backward).
    SkipTransform,
    /// Per-channel bilinear-initialized upsampler.
    Upsample,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SlotSpec {
    pub name: String,
    pub role: Role,
    pub kind: SlotKind,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl SlotSpec {
    pub fn zero_params(&self) -> ConvParams {
        ConvParams::zeros(
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
            self.stride,
            self.padding,
        )
    }

    pub fn scalar_count(&self) -> usize {
        self.out_channels * (self.in_channels * self.kernel * self.kernel + 1)
    }
}

/// Output `y_L` of block `L` of one network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPort {
    pub role: Role,
    pub block: usize,
    pub node: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphOutputs {
    pub master_score: NodeId,
    pub master_loss: NodeId,
    pub slave_score: Option<NodeId>,
    pub slave_loss: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    slots: Vec<SlotSpec>,
    input: NodeId,
    outputs: GraphOutputs,
    block_ports: Vec<BlockPort>,
    grad_gate: GradGate,
    num_classes: usize,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|n| n.inputs.len()).sum()
    }

    pub fn slots(&self) -> &[SlotSpec] {
        &self.slots
    }

    pub fn slot(&self, id: SlotId) -> &SlotSpec {
        &self.slots[id.0]
    }

    pub fn input(&self) -> NodeId {
        self.input
    }

    pub fn outputs(&self) -> GraphOutputs {
        self.outputs
    }

    pub fn block_ports(&self) -> &[BlockPort] {
        &self.block_ports
    }

    pub fn block_output(&self, role: Role, block: usize) -> Option<NodeId> {
        self.block_ports
            .iter()
            .find(|p| p.role == role && p.block == block)
            .map(|p| p.node)
    }

    pub fn grad_gate(&self) -> GradGate {
        self.grad_gate
    }

    pub fn set_grad_gate(&mut self, gate: GradGate) {
        self.grad_gate = gate;
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.name == name).map(|n| n.id)
    }

    /// Number of blocks per network, taken from the recorded block ports.
    pub fn num_blocks(&self) -> usize {
        self.block_ports.iter().map(|p| p.block).max().unwrap_or(0)
    }

    /// Edges carrying Slave features into Master nodes.
    pub fn backward_skip_edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut edges = Vec::new();
        for node in &self.nodes {
            for &src in &node.inputs {
                if self.node(src).role == Role::Slave && node.role == Role::Master {
                    edges.push((src, node.id));
                }
            }
        }
        edges
    }

    /// For each node, the nodes that read its output.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for node in &self.nodes {
            for &src in &node.inputs {
                out[src.0].push(node.id);
            }
        }
        out
    }

    /// Replaces input `index` of `node`. No shape or acyclicity checks are
    /// made; scheduling reports any cycle this introduces.
    pub fn rewire_input(&mut self, node: NodeId, index: usize, src: NodeId) -> Result<()> {
        if src.0 >= self.nodes.len() || node.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("unknown node {src} or {node}")));
        }
        let inputs = &mut self.nodes[node.0].inputs;
        let slot = inputs.get_mut(index).ok_or_else(|| {
            Error::InvalidArgument(format!("node {node} has no input {index}"))
        })?;
        *slot = src;
        Ok(())
    }
}

/// Incremental graph construction with build-time shape inference.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    slots: Vec<SlotSpec>,
    names: HashSet<String>,
    slot_names: HashSet<String>,
    input: Option<NodeId>,
    block_ports: Vec<BlockPort>,
    num_classes: Option<usize>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn slot(&self, id: SlotId) -> &SlotSpec {
        &self.slots[id.0]
    }

    pub fn shape(&self, id: NodeId) -> FeatureShape {
        self.nodes[id.0].shape
    }

    pub fn input(&mut self, c: usize, h: usize, w: usize) -> Result<NodeId> {
        if self.input.is_some() {
            return Err(Error::InvalidSpec("graph already has an input".into()));
        }
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidSpec(format!("input extents {c}x{h}x{w}")));
        }
        let id = self.insert(Op::Input, vec![], Role::Shared, None, "input".into(), FeatureShape { c, h, w })?;
        self.input = Some(id);
        Ok(id)
    }

    pub fn add_slot(&mut self, spec: SlotSpec) -> Result<SlotId> {
        if !self.slot_names.insert(spec.name.clone()) {
            return Err(Error::InvalidSpec(format!("duplicate slot {}", spec.name)));
        }
        if spec.out_channels == 0 || spec.in_channels == 0 || spec.kernel == 0 || spec.stride == 0 {
            return Err(Error::InvalidSpec(format!("degenerate slot {}", spec.name)));
        }
        self.slots.push(spec);
        Ok(SlotId(self.slots.len() - 1))
    }

    /// Appends a node, inferring its output shape from its inputs.
    pub fn push(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        role: Role,
        block: Option<usize>,
        name: impl Into<String>,
    ) -> Result<NodeId> {
        let name = name.into();
        if inputs.len() != op.arity() {
            return Err(Error::InvalidSpec(format!(
                "{name}: {:?} takes {} inputs, got {}",
                op.kind(),
                op.arity(),
                inputs.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|i| i.0 >= self.nodes.len()) {
            return Err(Error::InvalidSpec(format!("{name}: unknown input {bad}")));
        }
        let shapes: Vec<FeatureShape> = inputs.iter().map(|&i| self.shape(i)).collect();
        let mismatch = |msg: String| Error::ShapeMismatch(format!("{name}: {msg}"));
        let shape = match op {
            Op::Input => return Err(Error::InvalidSpec("use GraphBuilder::input".into())),
            Op::Conv2d { slot } => {
                let spec = self.slots.get(slot.0).ok_or_else(|| mismatch("unknown slot".into()))?;
                let s = shapes[0];
                if s.c != spec.in_channels {
                    return Err(mismatch(format!(
                        "slot {} expects {} channels, input has {}",
                        spec.name, spec.in_channels, s.c
                    )));
                }
                let (h, w) = spec
                    .zero_params()
                    .output_extent(s.h, s.w)
                    .map_err(|e| mismatch(e.to_string()))?;
                FeatureShape { c: spec.out_channels, h, w }
            }
            Op::Upsample { slot } => {
                let spec = self.slots.get(slot.0).ok_or_else(|| mismatch("unknown slot".into()))?;
                let s = shapes[0];
                if spec.in_channels != 1 || spec.out_channels != s.c || spec.stride < 2 {
                    return Err(mismatch(format!(
                        "upsampler {} does not fit {} channels",
                        spec.name, s.c
                    )));
                }
                FeatureShape { c: s.c, h: s.h * spec.stride, w: s.w * spec.stride }
            }
            Op::MaxPool => {
                let s = shapes[0];
                if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
                    return Err(mismatch(format!("cannot pool odd extents {}x{}", s.h, s.w)));
                }
                FeatureShape { c: s.c, h: s.h / 2, w: s.w / 2 }
            }
            Op::Add => {
                if shapes[0] != shapes[1] {
                    return Err(mismatch(format!("add of {:?} and {:?}", shapes[0], shapes[1])));
                }
                shapes[0]
            }
            Op::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::InvalidSpec(format!("{name}: dropout rate {rate}")));
                }
                shapes[0]
            }
            Op::Relu | Op::Score => shapes[0],
            Op::Loss => {
                let classes = *self.num_classes.get_or_insert(shapes[0].c);
                if shapes[0].c != classes {
                    return Err(mismatch(format!(
                        "loss over {} channels, graph has {classes} classes",
                        shapes[0].c
                    )));
                }
                FeatureShape { c: 1, h: 1, w: 1 }
            }
        };
        self.insert(op, inputs, role, block, name, shape)
    }

    fn insert(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        role: Role,
        block: Option<usize>,
        name: String,
        shape: FeatureShape,
    ) -> Result<NodeId> {
        if !self.names.insert(name.clone()) {
            return Err(Error::InvalidSpec(format!("duplicate node name {name}")));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            op,
            inputs,
            role,
            block,
            name,
            shape,
        });
        Ok(id)
    }

    pub fn mark_block_output(&mut self, role: Role, block: usize, node: NodeId) {
        self.block_ports.push(BlockPort { role, block, node });
    }

    /// Validates the slot-role partition and output wiring, then freezes the
    /// graph.
    pub fn finish(self, outputs: GraphOutputs, grad_gate: GradGate) -> Result<Graph> {
        let input = self
            .input
            .ok_or_else(|| Error::InvalidSpec("graph has no input".into()))?;
        let mut slot_roles: Vec<Option<Role>> = vec![None; self.slots.len()];
        for node in &self.nodes {
            if let Some(slot) = node.op.slot() {
                let spec = &self.slots[slot.0];
                if spec.role != node.role {
                    return Err(Error::InvalidSpec(format!(
                        "slot {} ({:?}) used by {:?} node {}",
                        spec.name, spec.role, node.role, node.name
                    )));
                }
                match slot_roles[slot.0] {
                    Some(r) if r != node.role => {
                        return Err(Error::InvalidSpec(format!("slot {} shared across roles", spec.name)))
                    }
                    _ => slot_roles[slot.0] = Some(node.role),
                }
            }
        }
        let check = |id: NodeId, kind: OpKind, role: Role, what: &str| -> Result<()> {
            let node = self
                .nodes
                .get(id.0)
                .ok_or_else(|| Error::InvalidSpec(format!("{what} {id} does not exist")))?;
            if node.op.kind() != kind || node.role != role {
                return Err(Error::InvalidSpec(format!(
                    "{what} {} is a {:?} {:?} node",
                    node.name,
                    node.role,
                    node.op.kind()
                )));
            }
            Ok(())
        };
        check(outputs.master_score, OpKind::Score, Role::Master, "master score")?;
        check(outputs.master_loss, OpKind::Loss, Role::Master, "master loss")?;
        if let Some(id) = outputs.slave_score {
            check(id, OpKind::Score, Role::Slave, "slave score")?;
        }
        if let Some(id) = outputs.slave_loss {
            check(id, OpKind::Loss, Role::Slave, "slave loss")?;
        }
        let master_scores = self
            .nodes
            .iter()
            .filter(|n| n.op.kind() == OpKind::Score && n.role == Role::Master)
            .count();
        if master_scores != 1 {
            return Err(Error::InvalidSpec(format!(
                "graph has {master_scores} master score nodes"
            )));
        }
        let num_classes = self
            .num_classes
            .unwrap_or(self.nodes[outputs.master_score.0].shape.c);
        let graph = Graph {
            nodes: self.nodes,
            slots: self.slots,
            input,
            outputs,
            block_ports: self.block_ports,
            grad_gate,
            num_classes,
        };
        validate_acyclic(&graph)?;
        Ok(graph)
    }
}
