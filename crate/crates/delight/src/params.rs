//! Named parameter storage, tape binding, and checkpoint serialization.
//!
//! A [`ParamStore`] owns the master copy of every learnable tensor. Each
//! forward pass binds the store onto a fresh tape as leaves; after the
//! backward pass the leaf gradients are pulled back into the store, where
//! the optimizer consumes them.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Handle to one named tensor in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(usize);

struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
}

/// Master copy of all learnable parameters, in registration order.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Tape leaves for one bound forward pass, aligned with store order.
pub struct Bound {
    ids: Vec<TensorId>,
}

impl Bound {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

/// One tensor as stored in a checkpoint.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor with explicit initial values.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<f64>,
    ) -> Result<ParamId> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "parameter {name}: {} values for shape {shape:?}",
                data.len()
            )));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            grad: vec![0.0; numel],
            data,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Register a tensor drawn from U(-bound, bound).
    pub fn register_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        self.register(name, shape, data)
    }

    /// Register a tensor filled with one value.
    pub fn register_const(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
    ) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        self.register(name, shape, vec![value; numel])
    }

    /// Number of registered tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> u64 {
        self.entries.iter().map(|e| e.data.len() as u64).sum()
    }

    pub fn name(&self, p: ParamId) -> &str {
        &self.entries[p.0].name
    }

    pub fn shape(&self, p: ParamId) -> &[usize] {
        &self.entries[p.0].shape
    }

    pub fn data(&self, p: ParamId) -> &[f64] {
        &self.entries[p.0].data
    }

    pub fn grad(&self, p: ParamId) -> &[f64] {
        &self.entries[p.0].grad
    }

    /// Overwrite a tensor's values, keeping its shape.
    pub fn set_data(&mut self, p: ParamId, data: Vec<f64>) -> Result<()> {
        let e = &mut self.entries[p.0];
        if data.len() != e.data.len() {
            return Err(Error::invalid(format!(
                "parameter {}: {} values for shape {:?}",
                e.name,
                data.len(),
                e.shape
            )));
        }
        e.data = data;
        Ok(())
    }

    /// Index-based access for the optimizer loop.
    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].name
    }

    pub fn grad_at(&self, i: usize) -> &[f64] {
        &self.entries[i].grad
    }

    pub fn data_at(&self, i: usize) -> &[f64] {
        &self.entries[i].data
    }

    pub fn numel_at(&self, i: usize) -> usize {
        self.entries[i].data.len()
    }

    pub fn data_and_grad_mut(&mut self, i: usize) -> (&mut [f64], &[f64]) {
        let e = &mut self.entries[i];
        (&mut e.data, &e.grad)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// L2 norm over all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| &e.grad)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Put every parameter on a tape. `trainable` controls whether the
    /// leaves participate in the backward pass.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|e| {
                tape.leaf(e.data.clone(), &e.shape, trainable)
                    .expect("shapes validated at registration")
            })
            .collect();
        Bound { ids }
    }

    /// Pull gradients off a tape back into the store, adding to whatever
    /// is already accumulated.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (e, &tid) in self.entries.iter_mut().zip(&bound.ids) {
            if let Some(g) = tape.grad(tid) {
                e.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn to_saved(&self) -> Vec<SavedParam> {
        self.entries
            .iter()
            .map(|e| SavedParam {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: e.data.clone(),
            })
            .collect()
    }

    /// Load checkpoint tensors into a store with identical structure.
    pub fn load_saved(&mut self, saved: &[SavedParam]) -> Result<()> {
        if saved.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, model has {}",
                saved.len(),
                self.entries.len()
            )));
        }
        for (e, s) in self.entries.iter_mut().zip(saved) {
            if e.name != s.name || e.shape != s.shape {
                return Err(Error::invalid(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    s.name, s.shape, e.name, e.shape
                )));
            }
            if s.data.len() != e.data.len() {
                return Err(Error::invalid(format!(
                    "checkpoint tensor {} has {} values for shape {:?}",
                    s.name,
                    s.data.len(),
                    s.shape
                )));
            }
            e.data = s.data.clone();
        }
        Ok(())
    }
}
