use std::collections::HashMap;

use super::{SlotId, SlotSpec};
use crate::error::{Error, Result};
use crate::tensor::ConvParams;

/// Gradient (or momentum buffer) shaped like one slot's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SlotGrad {
    pub fn zeros_for(params: &ConvParams) -> Self {
        Self {
            weights: vec![0.0; params.weights.len()],
            bias: vec![0.0; params.bias.len()],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Parameter values for every slot of a graph, plus per-slot momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    specs: Vec<SlotSpec>,
    params: Vec<ConvParams>,
    velocity: Vec<SlotGrad>,
    by_name: HashMap<String, SlotId>,
}

impl ParamStore {
    /// All-zero parameters for the given slots.
    pub fn zeros(specs: &[SlotSpec]) -> Self {
        let params: Vec<ConvParams> = specs.iter().map(SlotSpec::zero_params).collect();
        let velocity = params.iter().map(SlotGrad::zeros_for).collect();
        let by_name = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), SlotId(i)))
            .collect();
        Self {
            specs: specs.to_vec(),
            params,
            velocity,
            by_name,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn specs(&self) -> &[SlotSpec] {
        &self.specs
    }

    pub fn spec(&self, slot: SlotId) -> &SlotSpec {
        &self.specs[slot.0]
    }

    pub fn get(&self, slot: SlotId) -> &ConvParams {
        &self.params[slot.0]
    }

    pub fn get_mut(&mut self, slot: SlotId) -> &mut ConvParams {
        &mut self.params[slot.0]
    }

    pub fn velocity(&self, slot: SlotId) -> &SlotGrad {
        &self.velocity[slot.0]
    }

    pub fn slot_id(&self, name: &str) -> Option<SlotId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&ConvParams> {
        self.slot_id(name).map(|s| self.get(s))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ConvParams> {
        self.slot_id(name).map(|s| &mut self.params[s.0])
    }

    /// Slots in deterministic (creation) order.
    pub fn iter(&self) -> impl Iterator<Item = (SlotId, &SlotSpec, &ConvParams)> {
        self.specs
            .iter()
            .zip(&self.params)
            .enumerate()
            .map(|(i, (s, p))| (SlotId(i), s, p))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(ConvParams::scalar_count).sum()
    }

    /// Replaces one slot's values after checking its extents.
    pub fn set(&mut self, slot: SlotId, params: ConvParams) -> Result<()> {
        let cur = &self.params[slot.0];
        params.validate()?;
        if (params.out_channels, params.in_channels, params.kernel_h, params.kernel_w, params.stride, params.padding)
            != (cur.out_channels, cur.in_channels, cur.kernel_h, cur.kernel_w, cur.stride, cur.padding)
        {
            return Err(Error::ShapeMismatch(format!(
                "slot {} cannot take differently shaped params",
                self.specs[slot.0].name
            )));
        }
        self.params[slot.0] = params;
        Ok(())
    }

    /// Copies values from every identically named and shaped slot of `other`;
    /// returns how many slots were copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for i in 0..self.params.len() {
            if let Some(src) = other.by_name(&self.specs[i].name) {
                if src.weights.len() == self.params[i].weights.len() && src.bias.len() == self.params[i].bias.len() {
                    self.params[i] = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Raw parameter scalar at a flat coordinate (weights first, then bias).
    pub fn scalar(&self, slot: SlotId, index: usize) -> f64 {
        let p = &self.params[slot.0];
        if index < p.weights.len() {
            p.weights[index]
        } else {
            p.bias[index - p.weights.len()]
        }
    }

    pub fn set_scalar(&mut self, slot: SlotId, index: usize, value: f64) {
        let p = &mut self.params[slot.0];
        if index < p.weights.len() {
            p.weights[index] = value;
        } else {
            let b = index - p.weights.len();
            p.bias[b] = value;
        }
    }

    /// Heavy-ball momentum update of every slot not listed in `frozen`:
    /// `v <- momentum * v - lr * g`, `p <- p + v`.
    pub fn sgd_step(&mut self, grads: &GradStore, lr: f64, momentum: f64, frozen: &[bool]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradient slots for {} parameter slots",
                grads.len(),
                self.params.len()
            )));
        }
        for i in 0..self.params.len() {
            let g = grads.get(SlotId(i));
            let p = &mut self.params[i];
            if g.weights.len() != p.weights.len() || g.bias.len() != p.bias.len() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for slot {} has the wrong extent",
                    self.specs[i].name
                )));
            }
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let v = &mut self.velocity[i];
            for ((pv, vv), gv) in p
                .weights
                .iter_mut()
                .chain(p.bias.iter_mut())
                .zip(v.iter_mut())
                .zip(g.iter())
            {
                *vv = momentum * *vv - lr * gv;
                *pv += *vv;
            }
        }
        Ok(())
    }

    pub fn reset_velocity(&mut self) {
        for v in &mut self.velocity {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Gradients for every parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore {
    slots: Vec<SlotGrad>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            slots: params.params.iter().map(SlotGrad::zeros_for).collect(),
        }
    }

    pub fn from_slots(slots: Vec<SlotGrad>) -> Self {
        Self { slots }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, slot: SlotId) -> &SlotGrad {
        &self.slots[slot.0]
    }

    pub fn get_mut(&mut self, slot: SlotId) -> &mut SlotGrad {
        &mut self.slots[slot.0]
    }

    pub fn scalar(&self, slot: SlotId, index: usize) -> f64 {
        let g = &self.slots[slot.0];
        if index < g.weights.len() {
            g.weights[index]
        } else {
            g.bias[index - g.weights.len()]
        }
    }

    /// Largest absolute entry in one slot.
    pub fn max_abs(&self, slot: SlotId) -> f64 {
        self.slots[slot.0].iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}
