//! Named parameter storage shared by every layer.
//!
//! Layers hold [`ParamId`]s. For each forward pass the store is bound onto a
//! fresh tape, which turns every parameter into a gradient-tracking leaf.

use std::collections::HashMap;

use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Controls how the optimizer treats a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Ordinary weight; decayed when its rank is at least 2.
    Weight,
    /// Module signature; never decayed.
    Signature,
    /// Module code; never decayed.
    Code,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

impl Param {
    /// Decoupled weight decay applies to matrices that are not signatures or codes.
    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight && self.tensor.rank() >= 2
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

/// Tape handles for every parameter of a store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles given in store order, for callers that create the leaves
    /// themselves.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name: names are fixed at
    /// model construction, so a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        let id = ParamId(self.params.len());
        assert!(
            self.by_name.insert(name.clone(), id).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, tensor, kind });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Pushes every parameter onto `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.params.iter().map(|p| tape.param(p.tensor.clone())).collect();
        Bound { vars }
    }

    /// Pushes every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect();
        Bound { vars }
    }

    /// Adds tape gradients into each tensor's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            let Some(g) = tape.grad(v) else { continue };
            match &mut p.tensor.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, g)| *a += g),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }
}
