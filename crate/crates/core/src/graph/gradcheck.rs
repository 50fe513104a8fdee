use std::collections::HashSet;

use super::exec::{eval_node, Aux};
use super::{backward, forward, topo_schedule, Feed, Graph, NodeId, Op, ParamStore, SlotId};
use crate::data::RngStream;
use crate::error::{Error, Result};
use crate::tensor::{Mode, Tensor4, IGNORE_LABEL};
use crate::train::pixel_losses;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    pub tolerance: f64,
    /// Minimum number of checked coordinates; every slot gets at least one.
    pub min_coords: usize,
    pub seed: u64,
    /// Relative error is `|a - n| / max(|a|, |n|, denom_floor)`.
    pub denom_floor: f64,
    pub loss_weights: [f64; 2],
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            min_coords: 200,
            seed: 0,
            denom_floor: 1e-6,
            loss_weights: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_slot: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates discarded because a perturbation flipped a ReLU or a
    /// pooling winner, where central differences are meaningless.
    pub skipped_kinks: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

struct Probe<'a> {
    graph: &'a Graph,
    order: Vec<NodeId>,
    base_values: Vec<Tensor4>,
    base_aux: Vec<Aux>,
    feed: Feed<'a>,
    weights: [f64; 2],
    valid_pixels: usize,
}

enum Outcome {
    /// Per-pixel losses of the (master, slave) heads.
    Pixels([Option<Vec<f64>>; 2]),
    Kink,
}

impl Probe<'_> {
    fn loss_nodes(&self) -> [Option<NodeId>; 2] {
        let outputs = self.graph.outputs();
        [Some(outputs.master_loss), outputs.slave_loss]
    }

    /// Re-evaluates only `dirty` nodes on top of the base tape and returns
    /// per-pixel losses, so that differences can be taken pixel by pixel
    /// before the (cancellation-prone) averaging.
    fn losses_with(&self, params: &ParamStore, dirty: &[bool]) -> Result<Outcome> {
        let mut overlay: Vec<Option<Tensor4>> = vec![None; self.graph.len()];
        // eval mode never draws from the stream
        let mut rng = RngStream::new(0, "gradcheck-unused");
        for &id in &self.order {
            if !dirty[id.0] || matches!(self.graph.node(id).op, Op::Loss) {
                continue;
            }
            let (value, aux) = {
                let overlay = &overlay;
                eval_node(
                    self.graph,
                    id,
                    |src| overlay[src.0].as_ref().unwrap_or(&self.base_values[src.0]),
                    &self.feed,
                    params,
                    Mode::Eval,
                    &mut rng,
                )?
            };
            match (&aux, &self.base_aux[id.0]) {
                (Aux::Argmax(a), Aux::Argmax(b)) if a != b => return Ok(Outcome::Kink),
                _ => {}
            }
            if matches!(self.graph.node(id).op, Op::Relu) {
                let v = value.as_ref().unwrap();
                let flipped = v
                    .data()
                    .iter()
                    .zip(self.base_values[id.0].data())
                    .any(|(a, b)| (*a > 0.0) != (*b > 0.0));
                if flipped {
                    return Ok(Outcome::Kink);
                }
            }
            overlay[id.0] = value;
        }
        let labels = self.feed.labels.expect("checked by grad_check");
        let mut out = [None, None];
        for (slot, loss) in out.iter_mut().zip(self.loss_nodes()) {
            let Some(loss) = loss else { continue };
            let src = self.graph.node(loss).inputs[0];
            let logits = overlay[src.0].as_ref().unwrap_or(&self.base_values[src.0]);
            *slot = Some(pixel_losses(logits, labels)?);
        }
        Ok(Outcome::Pixels(out))
    }

    /// `Σ_k w_k (mean_k(plus) - mean_k(minus))`, differenced per pixel.
    fn difference(&self, plus: &[Option<Vec<f64>>; 2], minus: &[Option<Vec<f64>>; 2]) -> f64 {
        let mut total = 0.0;
        for k in 0..2 {
            let (Some(p), Some(m)) = (&plus[k], &minus[k]) else { continue };
            let valid = self.valid_pixels.max(1) as f64;
            let diff: f64 = p.iter().zip(m).map(|(a, b)| a - b).sum();
            total += self.weights[k] * diff / valid;
        }
        total
    }
}

/// Compares reverse-mode gradients against central differences on a random
/// subset of parameter coordinates, in eval mode.
pub fn grad_check(graph: &Graph, params: &ParamStore, feed: &Feed, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.eps > 0.0) || !cfg.eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {}", cfg.eps)));
    }
    let Some(labels) = feed.labels else {
        return Err(Error::InvalidArgument("gradient check needs labels".into()));
    };
    let plan = topo_schedule(graph)?;
    let mut rng = RngStream::new(cfg.seed, "gradcheck");
    let tape = forward(graph, &plan, feed, params, Mode::Eval, &mut rng)?;
    let analytic = backward(graph, &plan, &tape, params, cfg.loss_weights)?;

    let n = graph.len();
    let probe = Probe {
        graph,
        order: plan.order().to_vec(),
        base_values: (0..n)
            .map(|i| tape.value(NodeId(i)).cloned().unwrap_or_else(|| Tensor4::zeros(1, 1, 1, 1)))
            .collect(),
        base_aux: (0..n).map(|i| tape.aux(NodeId(i)).clone()).collect(),
        feed: *feed,
        weights: cfg.loss_weights,
        valid_pixels: labels.labels().iter().filter(|&&l| l != IGNORE_LABEL).count(),
    };

    // nodes downstream of each slot
    let consumers = graph.consumers();
    let dirty_for = |slot: SlotId| {
        let mut dirty = vec![false; n];
        let mut stack: Vec<NodeId> = graph
            .nodes()
            .iter()
            .filter(|node| node.op.slot() == Some(slot))
            .map(|node| node.id)
            .collect();
        while let Some(id) = stack.pop() {
            if !std::mem::replace(&mut dirty[id.0], true) {
                stack.extend(&consumers[id.0]);
            }
        }
        dirty
    };

    let counts: Vec<usize> = params.iter().map(|(_, _, p)| p.scalar_count()).collect();
    let total: usize = counts.iter().sum();
    let uniform = |rng: &mut RngStream| {
        let mut k = rng.below(total);
        for (s, &c) in counts.iter().enumerate() {
            if k < c {
                return (SlotId(s), k);
            }
            k -= c;
        }
        unreachable!()
    };
    let mut queue: Vec<(SlotId, usize)> = counts
        .iter()
        .enumerate()
        .map(|(s, &c)| (SlotId(s), rng.below(c)))
        .collect();
    let mut seen: HashSet<(SlotId, usize)> = queue.iter().copied().collect();
    while seen.len() < cfg.min_coords.min(total) {
        let c = uniform(&mut rng);
        if seen.insert(c) {
            queue.push(c);
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_slot: String::new(),
        worst_index: 0,
        checked: 0,
        skipped_kinks: 0,
        tolerance: cfg.tolerance,
    };
    let mut work = params.clone();
    let mut dirty_cache: Vec<Option<Vec<bool>>> = vec![None; params.len()];
    let mut next = 0;
    while next < queue.len() {
        let (slot, index) = queue[next];
        next += 1;
        let dirty = dirty_cache[slot.0].get_or_insert_with(|| dirty_for(slot));
        let original = work.scalar(slot, index);
        work.set_scalar(slot, index, original + cfg.eps);
        let plus = probe.losses_with(&work, dirty)?;
        work.set_scalar(slot, index, original - cfg.eps);
        let minus = probe.losses_with(&work, dirty)?;
        work.set_scalar(slot, index, original);
        let (Outcome::Pixels(lp), Outcome::Pixels(lm)) = (plus, minus) else {
            report.skipped_kinks += 1;
            // replace the coordinate so the checked count is kept
            if report.skipped_kinks <= cfg.min_coords.max(16) {
                loop {
                    let c = uniform(&mut rng);
                    if seen.insert(c) {
                        queue.push(c);
                        break;
                    }
                    if seen.len() >= total {
                        break;
                    }
                }
            }
            continue;
        };
        let finite = |v: &[Option<Vec<f64>>; 2]| v.iter().flatten().flatten().all(|x| x.is_finite());
        if !finite(&lp) || !finite(&lm) {
            return Err(Error::NonFinite(format!(
                "perturbed loss at {}[{index}] is not finite",
                params.spec(slot).name
            )));
        }
        let numeric = probe.difference(&lp, &lm) / (2.0 * cfg.eps);
        let exact = analytic.scalar(slot, index);
        let abs = (exact - numeric).abs();
        let rel = abs / exact.abs().max(numeric.abs()).max(cfg.denom_floor);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst_slot.is_empty() {
            report.max_rel_error = rel;
            report.worst_slot = params.spec(slot).name.clone();
            report.worst_index = index;
        }
    }
    Ok(report)
}
