//! Minimal f64 autograd: a flat tape of eager ops over `ndarray` values.
//!
//! Everything trains in double precision. That keeps analytic gradients
//! checkable against central finite differences and makes runs bit-stable
//! on one machine for a fixed seed.

pub mod adam;
pub mod conv;
pub mod graph;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::next_gaussian;

pub use adam::{cosine_lr, Adam};
pub use graph::{NodeId, Tape};

/// Named, ordered parameter set. Order is the identity: gradient
/// accumulation, optimizer state and checkpoints all follow it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    #[serde(skip)]
    grads: Vec<ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> usize {
        self.names.push(name.into());
        self.grads.push(ArrayD::zeros(value.raw_dim()));
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, pid: usize) -> &str {
        &self.names[pid]
    }

    pub fn value(&self, pid: usize) -> &ArrayD<f64> {
        &self.values[pid]
    }

    pub fn value_mut(&mut self, pid: usize) -> &mut ArrayD<f64> {
        &mut self.values[pid]
    }

    pub fn grad(&self, pid: usize) -> &ArrayD<f64> {
        &self.grads[pid]
    }

    pub fn add_grad(&mut self, pid: usize, g: &ArrayD<f64>) {
        self.grads[pid] += g;
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Restore gradient buffers after deserialization (serde skips them).
    pub fn reset_grads(&mut self) {
        self.grads = self
            .values
            .iter()
            .map(|v| ArrayD::zeros(v.raw_dim()))
            .collect();
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> {
        0..self.values.len()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// He-style init for a conv kernel (Co, Ci, k, k).
pub fn init_conv(rng: &mut impl Rng, c_out: usize, c_in: usize, k: usize) -> ArrayD<f64> {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[c_out, c_in, k, k]), |_| next_gaussian(rng) * std)
}

/// Scaled-normal init for a linear layer (out, in).
pub fn init_linear(rng: &mut impl Rng, out: usize, inp: usize, scale: f64) -> ArrayD<f64> {
    let std = scale * (1.0 / inp as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[out, inp]), |_| next_gaussian(rng) * std)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}
