use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    RewardHead,
    LmHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Encoder, ParamGroup::RewardHead, ParamGroup::LmHead];

    pub fn of(name: &str) -> Self {
        match name.split('.').next() {
            Some("reward_head") => ParamGroup::RewardHead,
            Some("lm_head") => ParamGroup::LmHead,
            _ => ParamGroup::Encoder,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::RewardHead => "reward_head",
            ParamGroup::LmHead => "lm_head",
        }
    }
}

/// Named parameter tensors with per-parameter counters: how many forward
/// computations read each one, and how many of those bound it for gradients.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    touches: Vec<AtomicU64>,
    grad_touches: Vec<AtomicU64>,
}

fn copy_counters(c: &[AtomicU64]) -> Vec<AtomicU64> {
    c.iter().map(|t| AtomicU64::new(t.load(Ordering::Relaxed))).collect()
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            touches: copy_counters(&self.touches),
            grad_touches: copy_counters(&self.grad_touches),
        }
    }
}

impl ParamStore {
    pub(crate) fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.touches.push(AtomicU64::new(0));
        self.grad_touches.push(AtomicU64::new(0));
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn group(&self, id: usize) -> ParamGroup {
        ParamGroup::of(&self.names[id])
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub(crate) fn touch(&self, id: usize, trainable: bool) {
        self.touches[id].fetch_add(1, Ordering::Relaxed);
        if trainable {
            self.grad_touches[id].fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn grad_touch_count(&self, id: usize) -> u64 {
        self.grad_touches[id].load(Ordering::Relaxed)
    }

    /// Like [`ParamStore::group_touches`], counting only gradient bindings.
    pub fn group_grad_touches(&self, group: ParamGroup) -> u64 {
        (0..self.len())
            .filter(|&i| self.group(i) == group)
            .map(|i| self.grad_touch_count(i))
            .sum()
    }

    pub fn touch_count(&self, id: usize) -> u64 {
        self.touches[id].load(Ordering::Relaxed)
    }

    /// Total touches over every parameter of a group.
    pub fn group_touches(&self, group: ParamGroup) -> u64 {
        (0..self.len())
            .filter(|&i| self.group(i) == group)
            .map(|i| self.touch_count(i))
            .sum()
    }

    pub fn reset_touches(&self) {
        for t in self.touches.iter().chain(&self.grad_touches) {
            t.store(0, Ordering::Relaxed);
        }
    }

    /// Flattened copy of every parameter, in id order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}
