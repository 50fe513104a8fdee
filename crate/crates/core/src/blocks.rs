//! Builders for the three repeating components of the downsampling path:
//! the convolutional block `F`, forward-skip-fuse and backward-skip-fuse.
//!
//! For a block `L` with input `x_L`:
//!
//! ```text
//! forward  (N skips):  y_L = F(x_L) + Σ_{l=L-N+1..L} W_l x_l
//! backward (P skips):  y_L = F(x_L + Σ_{l=L..L+P-1} U_l y_l^s)
//! combined:            y_L = F(x_L + Σ U_l y_l^s) + Σ W_l x_l
//! ```
//!
//! `W_l` and `U_l` are 1×1 convolutions with bias, each with its own slot.
//! Forward terms are rematched spatially by 2× max pools before `W_l`;
//! backward terms by learnable 2× upsamplers after `U_l`.

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, NodeId, Op, Role, SlotId, SlotKind, SlotSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub block_index: usize,
    pub conv_count: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub has_dropout: bool,
    pub dropout_rate: f64,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.conv_count) {
            return Err(Error::InvalidSpec(format!(
                "block {} has {} convolutions, expected 2 or 3",
                self.block_index, self.conv_count
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel_size == 0 || self.block_index == 0 {
            return Err(Error::InvalidSpec(format!("degenerate block spec {self:?}")));
        }
        if self.has_dropout && !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidSpec(format!("dropout rate {}", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipDirection {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampler {
    None,
    PoolChain(usize),
    UpsampleChain(usize),
}

/// One attached skip term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipSpec {
    pub source_block: usize,
    pub dest_block: usize,
    pub direction: SkipDirection,
    pub transform: SlotId,
    pub resampler: Resampler,
}

/// Block ports of one network under construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPorts {
    pub role: Role,
    /// `x_l` for `l = 1..`, index `l - 1`.
    pub inputs: Vec<NodeId>,
    /// `y_l` for `l = 1..`, index `l - 1`.
    pub outputs: Vec<NodeId>,
    /// Pools follow blocks `1..=pool_stages`.
    pub pool_stages: usize,
}

impl NetworkPorts {
    pub fn new(role: Role, pool_stages: usize) -> Self {
        Self {
            role,
            inputs: Vec::new(),
            outputs: Vec::new(),
            pool_stages,
        }
    }

    pub fn prefix(&self) -> char {
        self.role.letter()
    }

    pub fn input(&self, l: usize) -> Option<NodeId> {
        l.checked_sub(1).and_then(|i| self.inputs.get(i)).copied()
    }

    pub fn output(&self, l: usize) -> Option<NodeId> {
        l.checked_sub(1).and_then(|i| self.outputs.get(i)).copied()
    }
}

/// Number of pooling stages between block `from`'s input and block `to`'s
/// input (`from <= to`).
pub fn pools_between(from: usize, to: usize, pool_stages: usize) -> usize {
    (from..to).filter(|&k| k <= pool_stages).count()
}

fn conv_slot(
    b: &mut GraphBuilder,
    name: String,
    role: Role,
    kind: SlotKind,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
) -> Result<SlotId> {
    b.add_slot(SlotSpec {
        name,
        role,
        kind,
        out_channels,
        in_channels,
        kernel,
        stride: 1,
        padding: kernel / 2,
    })
}

/// 1×1 transform node with a fresh slot of the given kind.
pub(crate) fn conv1x1(
    b: &mut GraphBuilder,
    name: String,
    role: Role,
    block: Option<usize>,
    kind: SlotKind,
    src: NodeId,
    out_channels: usize,
) -> Result<(NodeId, SlotId)> {
    let in_channels = b.shape(src).c;
    let slot = conv_slot(b, name.clone(), role, kind, in_channels, out_channels, 1)?;
    let node = b.push(Op::Conv2d { slot }, vec![src], role, block, name)?;
    Ok((node, slot))
}

/// Learnable per-channel upsampler with a fresh slot.
pub(crate) fn upsample_node(
    b: &mut GraphBuilder,
    name: String,
    role: Role,
    block: Option<usize>,
    src: NodeId,
    factor: usize,
) -> Result<NodeId> {
    let (kernel, padding) = crate::tensor::upsample_geometry(factor);
    let slot = b.add_slot(SlotSpec {
        name: name.clone(),
        role,
        kind: SlotKind::Upsample,
        out_channels: b.shape(src).c,
        in_channels: 1,
        kernel,
        stride: factor,
        padding,
    })?;
    b.push(Op::Upsample { slot }, vec![src], role, block, name)
}

/// `F(x)`: `conv_count × (conv → relu)`, with dropout after each of the last
/// two ReLUs when `has_dropout`. Returns the block's output port.
pub fn build_conv_block(b: &mut GraphBuilder, spec: &BlockSpec, role: Role, input: NodeId) -> Result<NodeId> {
    spec.validate()?;
    if b.shape(input).c != spec.in_channels {
        return Err(Error::InvalidSpec(format!(
            "block {} expects {} input channels, port has {}",
            spec.block_index,
            spec.in_channels,
            b.shape(input).c
        )));
    }
    let l = spec.block_index;
    let p = role.letter();
    let mut cur = input;
    let mut channels = spec.in_channels;
    for i in 1..=spec.conv_count {
        let name = format!("{p}.b{l}.conv{i}");
        let slot = conv_slot(b, name.clone(), role, SlotKind::Conv, channels, spec.out_channels, spec.kernel_size)?;
        cur = b.push(Op::Conv2d { slot }, vec![cur], role, Some(l), name)?;
        cur = b.push(Op::Relu, vec![cur], role, Some(l), format!("{p}.b{l}.relu{i}"))?;
        if spec.has_dropout && i + 2 > spec.conv_count {
            cur = b.push(
                Op::Dropout { rate: spec.dropout_rate },
                vec![cur],
                role,
                Some(l),
                format!("{p}.b{l}.drop{i}"),
            )?;
        }
        channels = spec.out_channels;
    }
    Ok(cur)
}

/// Adds `Σ_{l=L-N+1..L} W_l x_l` onto `block_out` (the `F(x_L)` port).
/// Sources are taken from `net.inputs`, which must already hold `x_1..x_L`.
pub fn attach_forward_skips(
    b: &mut GraphBuilder,
    net: &NetworkPorts,
    block: usize,
    n_skips: usize,
    block_out: NodeId,
) -> Result<(NodeId, Vec<SkipSpec>)> {
    if n_skips == 0 || n_skips > block {
        return Err(Error::InvalidSpec(format!(
            "block {block} cannot take {n_skips} forward skips (need 1 <= N <= L)"
        )));
    }
    let role = net.role;
    let p = net.prefix();
    let out_channels = b.shape(block_out).c;
    let mut acc = block_out;
    let mut skips = Vec::with_capacity(n_skips);
    for l in (block + 1 - n_skips..=block).rev() {
        let mut src = net
            .input(l)
            .ok_or_else(|| Error::InvalidSpec(format!("x_{l} not built before block {block}")))?;
        let pools = pools_between(l, block, net.pool_stages);
        for j in 1..=pools {
            src = b.push(Op::MaxPool, vec![src], role, Some(block), format!("{p}.b{block}.W{l}.pool{j}"))?;
        }
        let (term, slot) = conv1x1(
            b,
            format!("{p}.b{block}.W{l}"),
            role,
            Some(block),
            SlotKind::SkipTransform,
            src,
            out_channels,
        )?;
        acc = b.push(Op::Add, vec![acc, term], role, Some(block), format!("{p}.b{block}.W{l}.add"))?;
        skips.push(SkipSpec {
            source_block: l,
            dest_block: block,
            direction: SkipDirection::Forward,
            transform: slot,
            resampler: if pools == 0 { Resampler::None } else { Resampler::PoolChain(pools) },
        });
    }
    Ok((acc, skips))
}

/// Fuses `Σ_{l=L..min(L+P-1, num_blocks)} U_l y_l^s` into the Master block
/// input `x_L^m`, returning the fused port that feeds `F`. Sources past the
/// last block are clipped.
pub fn attach_backward_skips(
    b: &mut GraphBuilder,
    master: &NetworkPorts,
    slave: &NetworkPorts,
    block: usize,
    p_skips: usize,
    num_blocks: usize,
) -> Result<(NodeId, Vec<SkipSpec>)> {
    if p_skips == 0 {
        return Err(Error::InvalidSpec("backward skips need P >= 1".into()));
    }
    if master.role != Role::Master {
        return Err(Error::InvalidSpec("backward skips feed the Master network only".into()));
    }
    let x = master
        .input(block)
        .ok_or_else(|| Error::InvalidSpec(format!("x_{block} of the Master not built")))?;
    let target_channels = b.shape(x).c;
    let p = master.prefix();
    let last = (block + p_skips - 1).min(num_blocks);
    let mut acc = x;
    let mut skips = Vec::new();
    for l in block..=last {
        let src = slave
            .output(l)
            .ok_or_else(|| Error::InvalidSpec(format!("Slave block {l} not built before Master block {block}")))?;
        if b.node(src).role != Role::Slave {
            return Err(Error::InvalidSpec(format!(
                "backward skip source {} is not a Slave node; wiring it would close a cycle",
                b.node(src).name
            )));
        }
        let (mut term, slot) = conv1x1(
            b,
            format!("{p}.b{block}.U{l}"),
            Role::Master,
            Some(block),
            SlotKind::SkipTransform,
            src,
            target_channels,
        )?;
        let ups = pools_between(block, l, master.pool_stages);
        for j in 1..=ups {
            term = upsample_node(b, format!("{p}.b{block}.U{l}.up{j}"), Role::Master, Some(block), term, 2)?;
        }
        acc = b.push(Op::Add, vec![acc, term], Role::Master, Some(block), format!("{p}.b{block}.U{l}.add"))?;
        skips.push(SkipSpec {
            source_block: l,
            dest_block: block,
            direction: SkipDirection::Backward,
            transform: slot,
            resampler: if ups == 0 { Resampler::None } else { Resampler::UpsampleChain(ups) },
        });
    }
    Ok((acc, skips))
}

/// One full block with both skip kinds: backward fusion into the input of
/// `F`, forward fusion onto its output. `n_skips` / `p_skips` of zero disable
/// the respective kind. Records `y_L` in `net.outputs`.
#[allow(clippy::too_many_arguments)]
pub fn attach_combined(
    b: &mut GraphBuilder,
    net: &mut NetworkPorts,
    slave: Option<&NetworkPorts>,
    spec: &BlockSpec,
    n_skips: usize,
    p_skips: usize,
    num_blocks: usize,
) -> Result<(NodeId, Vec<SkipSpec>)> {
    let block = spec.block_index;
    let x = net
        .input(block)
        .ok_or_else(|| Error::InvalidSpec(format!("x_{block} not built")))?;
    let mut skips = Vec::new();
    let fused = if p_skips > 0 {
        let slave = slave.ok_or_else(|| Error::InvalidSpec("backward skips need a Slave network".into()))?;
        let (fused, s) = attach_backward_skips(b, net, slave, block, p_skips, num_blocks)?;
        skips.extend(s);
        fused
    } else {
        x
    };
    let f = build_conv_block(b, spec, net.role, fused)?;
    let y = if n_skips > 0 {
        let (y, s) = attach_forward_skips(b, net, block, n_skips, f)?;
        skips.extend(s);
        y
    } else {
        f
    };
    net.outputs.push(y);
    b.mark_block_output(net.role, block, y);
    Ok((y, skips))
}
