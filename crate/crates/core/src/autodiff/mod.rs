//! Reverse-mode automatic differentiation.
//!
//! Parameters live in a [`ParamStore`]. A forward pass binds them onto a fresh
//! [`Tape`] as leaves, records primitives, and [`Tape::backward`] returns
//! per-node gradients that [`ParamStore::accumulate`] folds back into the
//! parameter tensors.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

use std::collections::HashMap;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheck, GradCheckOptions};
pub use optim::{clip_grad_norm, grad_norm, AdamW, AdamWConfig, CosineSchedule};
pub use tape::{Gradients, Tape, Unary, Var};
pub use tensor::{numel, Tensor};

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Ordered parameter collection. Insertion order is the iteration order for
/// binding, optimizer state and serialization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, decay: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), tensor, decay });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| &mut self.params[id.0].tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar entries, trainable or not.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| p.tensor.requires_grad()).map(|p| p.tensor.numel()).sum()
    }

    /// Records every parameter as a leaf; the result is indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(&p.tensor)).collect()
    }

    /// Adds the gradients of `vars` (from [`bind`](Self::bind)) into the tensors.
    pub fn accumulate(&mut self, grads: &Gradients, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if p.tensor.requires_grad() {
                grads.accumulate_into(v, &mut p.tensor)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_binds_in_insertion_order() {
        let mut s = ParamStore::new();
        let a = s.insert("a", Tensor::full(&[2], 1.0).trainable(), true).unwrap();
        let b = s.insert("b", Tensor::full(&[3], 2.0), false).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1]), false).is_err());
        assert_eq!(s.numel(), 5);
        assert_eq!(s.trainable_numel(), 2);

        let mut tape = Tape::new();
        let vars = s.bind(&mut tape);
        let sa = tape.sum(vars[a.0]);
        let sb = tape.sum(vars[b.0]);
        let t = tape.add(sa, sb).unwrap();
        let g = tape.backward(t).unwrap();
        s.accumulate(&g, &vars).unwrap();
        assert_eq!(s.get(a).grad().unwrap(), &[1.0, 1.0]);
        assert!(s.get(b).grad().is_none());
    }
}
