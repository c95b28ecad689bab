//! Gradient accumulation for the hand-derived backward passes.
//!
//! Each loss registers the parameters it should differentiate as leaves,
//! runs its backward pass, and records which primitive it replayed. A
//! parameter that is not registered never receives a gradient, which is how
//! frozen tensors (the encoder, a frozen global prompt) are expressed.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LeafId(usize);

#[derive(Debug, Clone)]
struct Leaf {
    name: String,
    shape: Vec<usize>,
    grad: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct GradTape {
    leaves: Vec<Leaf>,
    ops: Vec<&'static str>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, name: impl Into<String>, shape: &[usize]) -> LeafId {
        let len = shape.iter().product();
        self.leaves.push(Leaf {
            name: name.into(),
            shape: shape.to_vec(),
            grad: vec![0.0; len],
        });
        LeafId(self.leaves.len() - 1)
    }

    /// Adds `grad` into the leaf's accumulator. The length must equal the
    /// leaf's element count.
    pub fn accumulate(&mut self, id: LeafId, grad: &[f64]) -> Result<()> {
        let leaf = &mut self.leaves[id.0];
        if leaf.grad.len() != grad.len() {
            return Err(Error::param(format!(
                "gradient of length {} for leaf {} of shape {:?}",
                grad.len(),
                leaf.name,
                leaf.shape
            )));
        }
        for (a, g) in leaf.grad.iter_mut().zip(grad) {
            *a += g;
        }
        Ok(())
    }

    /// Adds `scale * grad` into a contiguous sub-range of a leaf.
    pub(crate) fn accumulate_slice(&mut self, id: LeafId, offset: usize, scale: f64, grad: &[f64]) {
        let dst = &mut self.leaves[id.0].grad[offset..offset + grad.len()];
        for (a, g) in dst.iter_mut().zip(grad) {
            *a += scale * g;
        }
    }

    pub fn record(&mut self, op: &'static str) {
        self.ops.push(op);
    }

    pub fn ops(&self) -> &[&'static str] {
        &self.ops
    }

    pub fn grad(&self, id: LeafId) -> &[f64] {
        &self.leaves[id.0].grad
    }

    pub fn shape(&self, id: LeafId) -> &[usize] {
        &self.leaves[id.0].shape
    }

    pub fn name(&self, id: LeafId) -> &str {
        &self.leaves[id.0].name
    }

    pub fn scale(&mut self, id: LeafId, factor: f64) {
        self.leaves[id.0].grad.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn take(&mut self, id: LeafId) -> Vec<f64> {
        std::mem::take(&mut self.leaves[id.0].grad)
    }
}
