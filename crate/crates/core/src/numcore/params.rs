//! Named parameter storage with accumulated gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, VarId};
use crate::numcore::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub values: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of named parameter matrices. Iteration order is
/// insertion order, which makes checkpoints and optimizer state stable.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, values: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        assert!(values.all_finite(), "non-finite init for {name}");
        let grad = Tensor::zeros(values.rows, values.cols);
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), values, grad });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Mutable access for optimizers. Names must not be changed.
    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].values
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].values
    }

    pub fn grad_of(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].grad
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            for g in &mut e.grad.data {
                *g = 0.0;
            }
        }
    }

    /// Scales every accumulated gradient, e.g. to average over a batch.
    pub fn scale_grad(&mut self, c: f64) {
        for e in &mut self.entries {
            for g in &mut e.grad.data {
                *g *= c;
            }
        }
    }

    /// Registers every entry on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|e| tape.param(e.values.clone()))
            .collect();
        Bound { ids, index: self.index.clone() }
    }

    /// Adds tape leaf gradients from `bound` into the stored grads.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (e, &id) in self.entries.iter_mut().zip(&bound.ids) {
            if let Some(g) = tape.grad(id) {
                for (acc, &gi) in e.grad.data.iter_mut().zip(&g.data) {
                    *acc += gi;
                }
            }
        }
    }

    /// Records `loss_fn` on a fresh tape, runs backward, and adds the
    /// resulting gradients into the stored grads (no zeroing).
    pub fn eval_with_gradients<F>(&mut self, loss_fn: F) -> Result<f64>
    where
        F: FnOnce(&mut Tape, &Bound) -> Result<VarId>,
    {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let loss = loss_fn(&mut tape, &bound)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        self.accumulate_grads(&tape, &bound);
        Ok(value)
    }

    /// Loss value only, no gradient accumulation.
    pub fn eval_value<F>(&self, loss_fn: F) -> Result<f64>
    where
        F: FnOnce(&mut Tape, &Bound) -> Result<VarId>,
    {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let loss = loss_fn(&mut tape, &bound)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            let at = tape
                .first_nonfinite()
                .map(|(i, op)| format!(" (first non-finite at node {i}: {op})"))
                .unwrap_or_default();
            return Err(Error::Numerical(format!("loss is not finite{at}")));
        }
        Ok(v)
    }

    /// Flat coordinate accessors spanning all entries in order.
    pub fn flat_get(&self, k: usize) -> f64 {
        let (e, o) = self.locate(k);
        self.entries[e].values.data[o]
    }

    pub fn flat_set(&mut self, k: usize, v: f64) {
        let (e, o) = self.locate(k);
        self.entries[e].values.data[o] = v;
    }

    pub fn flat_grad(&self, k: usize) -> f64 {
        let (e, o) = self.locate(k);
        self.entries[e].grad.data[o]
    }

    pub fn flat_name(&self, k: usize) -> (&str, usize) {
        let (e, o) = self.locate(k);
        (&self.entries[e].name, o)
    }

    fn locate(&self, k: usize) -> (usize, usize) {
        let mut rem = k;
        for (i, e) in self.entries.iter().enumerate() {
            if rem < e.values.len() {
                return (i, rem);
            }
            rem -= e.values.len();
        }
        panic!("flat index {k} out of range ({} scalars)", self.n_scalars());
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.values.all_finite())
    }
}

/// Tape ids for one `bind` call, resolvable by parameter name.
pub struct Bound {
    ids: Vec<VarId>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn id(&self, name: &str) -> VarId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))]
    }
}
