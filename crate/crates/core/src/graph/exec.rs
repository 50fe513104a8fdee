use super::{ExecutionPlan, Graph, GradGate, GradStore, NodeId, Op, ParamStore, Role};
use crate::data::RngStream;
use crate::error::{Error, Result};
use crate::tensor::{self, LabelMap, Mode, Tensor4};
use crate::train::masked_xent;

/// Values bound to the graph's input for one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Feed<'a> {
    pub image: &'a Tensor4,
    /// Loss nodes are skipped when absent.
    pub labels: Option<&'a LabelMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub loss: f64,
    /// d loss / d logits.
    pub grad: Tensor4,
    pub valid_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Aux {
    None,
    Argmax(Vec<u32>),
    Mask(Option<Vec<f64>>),
    Loss(LossRecord),
}

/// Every node output of one forward pass plus what the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    values: Vec<Option<Tensor4>>,
    aux: Vec<Aux>,
}

impl Tape {
    pub fn value(&self, id: NodeId) -> Option<&Tensor4> {
        self.values[id.0].as_ref()
    }

    pub fn loss(&self, id: NodeId) -> Option<&LossRecord> {
        match &self.aux[id.0] {
            Aux::Loss(rec) => Some(rec),
            _ => None,
        }
    }

    pub fn master_loss(&self, graph: &Graph) -> Option<f64> {
        self.loss(graph.outputs().master_loss).map(|r| r.loss)
    }

    pub fn slave_loss(&self, graph: &Graph) -> Option<f64> {
        graph
            .outputs()
            .slave_loss
            .and_then(|id| self.loss(id))
            .map(|r| r.loss)
    }

    pub fn master_score(&self, graph: &Graph) -> &Tensor4 {
        self.value(graph.outputs().master_score)
            .expect("forward always evaluates the master score")
    }

    /// `w_m * L_m + w_s * L_s` over the losses present.
    pub fn total_loss(&self, graph: &Graph, weights: [f64; 2]) -> f64 {
        weights[0] * self.master_loss(graph).unwrap_or(0.0)
            + weights[1] * self.slave_loss(graph).unwrap_or(0.0)
    }

    pub(crate) fn aux(&self, id: NodeId) -> &Aux {
        &self.aux[id.0]
    }
}

/// Evaluates one node given a lookup for its input values.
pub(crate) fn eval_node<'t>(
    graph: &Graph,
    id: NodeId,
    input: impl Fn(NodeId) -> &'t Tensor4,
    feed: &Feed,
    params: &ParamStore,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<(Option<Tensor4>, Aux)> {
    let node = graph.node(id);
    let wrap = |e: Error| match e {
        Error::ShapeMismatch(message) | Error::InvalidArgument(message) => Error::NodeShape { node: id, message },
        other => other,
    };
    let x = |i: usize| input(node.inputs[i]);
    let out = match node.op {
        Op::Input => {
            let s = node.shape;
            if (feed.image.c, feed.image.h, feed.image.w) != (s.c, s.h, s.w) {
                return Err(Error::NodeShape {
                    node: id,
                    message: format!("image {:?} does not match input {:?}", feed.image.dims(), s),
                });
            }
            (Some(feed.image.clone()), Aux::None)
        }
        Op::Conv2d { slot } => (Some(tensor::conv2d(x(0), params.get(slot)).map_err(wrap)?), Aux::None),
        Op::Upsample { slot } => (Some(tensor::upsample(x(0), params.get(slot)).map_err(wrap)?), Aux::None),
        Op::MaxPool => {
            let (y, am) = tensor::maxpool2d(x(0)).map_err(wrap)?;
            (Some(y), Aux::Argmax(am))
        }
        Op::Relu => (Some(tensor::relu(x(0))), Aux::None),
        Op::Add => (Some(tensor::add(x(0), x(1)).map_err(wrap)?), Aux::None),
        Op::Dropout { rate } => {
            let (y, mask) = tensor::dropout(x(0), rate, rng, mode).map_err(wrap)?;
            (Some(y), Aux::Mask(mask))
        }
        Op::Score => (Some(x(0).clone()), Aux::None),
        Op::Loss => match feed.labels {
            None => (None, Aux::None),
            Some(labels) => {
                let rec = masked_xent(x(0), labels).map_err(wrap)?;
                let v = Tensor4::filled(1, 1, 1, 1, rec.loss);
                (Some(v), Aux::Loss(rec))
            }
        },
    };
    Ok(out)
}

/// Runs the plan, recording every node output.
pub fn forward(
    graph: &Graph,
    plan: &ExecutionPlan,
    feed: &Feed,
    params: &ParamStore,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<Tape> {
    if plan.len() != graph.len() {
        return Err(Error::InvalidArgument("plan does not match graph".into()));
    }
    if params.len() != graph.slots().len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameter slots for a graph with {}",
            params.len(),
            graph.slots().len()
        )));
    }
    let mut values: Vec<Option<Tensor4>> = vec![None; graph.len()];
    let mut aux: Vec<Aux> = vec![Aux::None; graph.len()];
    for &id in plan.order() {
        let (v, a) = {
            let values = &values;
            eval_node(
                graph,
                id,
                |src| values[src.0].as_ref().expect("plan evaluates inputs first"),
                feed,
                params,
                mode,
                rng,
            )?
        };
        values[id.0] = v;
        aux[id.0] = a;
    }
    Ok(Tape { values, aux })
}

fn accumulate(grads: &mut [Option<Tensor4>], id: NodeId, g: Tensor4) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Reverse-mode pass over `plan` for the total loss
/// `loss_weights[0] * master + loss_weights[1] * slave`.
///
/// With the graph's gate closed, gradients do not cross Slave→Master edges.
pub fn backward(
    graph: &Graph,
    plan: &ExecutionPlan,
    tape: &Tape,
    params: &ParamStore,
    loss_weights: [f64; 2],
) -> Result<GradStore> {
    let mut param_grads = GradStore::zeros_like(params);
    let mut grads: Vec<Option<Tensor4>> = vec![None; graph.len()];

    // nodes whose value depends on some parameter
    let mut needs_grad = vec![false; graph.len()];
    for &id in plan.order() {
        let node = graph.node(id);
        needs_grad[id.0] = node.op.slot().is_some() || node.inputs.iter().any(|s| needs_grad[s.0]);
    }
    let passes = |node: NodeId, src: NodeId| {
        needs_grad[src.0]
            && !(graph.grad_gate() == GradGate::Closed
                && graph.node(src).role == Role::Slave
                && graph.node(node).role == Role::Master)
    };

    let outputs = graph.outputs();
    let seeds = [(Some(outputs.master_loss), loss_weights[0]), (outputs.slave_loss, loss_weights[1])];
    for (loss, weight) in seeds {
        let Some(loss) = loss else { continue };
        if weight == 0.0 {
            continue;
        }
        let rec = tape
            .loss(loss)
            .ok_or_else(|| Error::InvalidArgument("backward needs a tape with losses".into()))?;
        let src = graph.node(loss).inputs[0];
        accumulate(&mut grads, src, rec.grad.scale(weight))?;
    }

    for &id in plan.order().iter().rev() {
        let Some(g) = grads[id.0].take() else { continue };
        let node = graph.node(id);
        let value = |src: NodeId| {
            tape.value(src)
                .ok_or_else(|| Error::InvalidArgument(format!("tape lacks value for {src}")))
        };
        match node.op {
            Op::Input | Op::Loss => {}
            Op::Conv2d { slot } | Op::Upsample { slot } => {
                let src = node.inputs[0];
                let want = passes(id, src);
                let x = value(src)?;
                let pg = if matches!(node.op, Op::Conv2d { .. }) {
                    tensor::conv2d_grad(x, params.get(slot), &g, want)?
                } else {
                    tensor::upsample_grad(x, params.get(slot), &g, want)?
                };
                let acc = param_grads.get_mut(slot);
                for (a, b) in acc.weights.iter_mut().zip(&pg.weights) {
                    *a += b;
                }
                for (a, b) in acc.bias.iter_mut().zip(&pg.bias) {
                    *a += b;
                }
                if let Some(gin) = pg.input {
                    accumulate(&mut grads, src, gin)?;
                }
            }
            Op::MaxPool => {
                let src = node.inputs[0];
                if passes(id, src) {
                    let Aux::Argmax(am) = tape.aux(id) else {
                        return Err(Error::InvalidArgument(format!("no argmax recorded for {id}")));
                    };
                    let gin = tensor::maxpool2d_grad(value(src)?.dims(), am, &g)?;
                    accumulate(&mut grads, src, gin)?;
                }
            }
            Op::Relu => {
                let src = node.inputs[0];
                if passes(id, src) {
                    accumulate(&mut grads, src, tensor::relu_grad(value(id)?, &g))?;
                }
            }
            Op::Dropout { .. } => {
                let src = node.inputs[0];
                if passes(id, src) {
                    let mask = match tape.aux(id) {
                        Aux::Mask(m) => m.as_deref(),
                        _ => None,
                    };
                    accumulate(&mut grads, src, tensor::dropout_grad(mask, &g))?;
                }
            }
            Op::Score => {
                let src = node.inputs[0];
                if passes(id, src) {
                    accumulate(&mut grads, src, g)?;
                }
            }
            Op::Add => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if passes(id, a) {
                    accumulate(&mut grads, a, g.clone())?;
                }
                if passes(id, b) {
                    accumulate(&mut grads, b, g)?;
                }
            }
        }
    }
    Ok(param_grads)
}
