//! Named parameter storage and the forward-pass binding context.
//!
//! Parameters live in a [`ParamArena`] in declaration order; that order is
//! the contract for seeding, optimizer state alignment, and checkpoints.
//! A [`Ctx`] wraps one tape and lazily registers each parameter the forward
//! pass actually touches, so gradient extraction and finite-difference
//! overrides share one code path.

use crate::tensor::{GradGraph, Gradients, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Default)]
pub struct ParamArena {
    entries: Vec<(String, Tensor)>,
}

impl ParamArena {
    pub fn new() -> ParamArena {
        ParamArena::default()
    }

    /// Registers a tensor under a unique name. Duplicate names are a bug in
    /// model construction, not a runtime condition.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name:?}"
        );
        self.entries.push((name, t));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Replaces a value in place; the shape must not change.
    pub fn set(&mut self, id: ParamId, t: Tensor) {
        assert_eq!(
            self.entries[id.0].1.shape(),
            t.shape(),
            "parameter {:?} shape changed",
            self.entries[id.0].0
        );
        self.entries[id.0].1 = t;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries.iter().enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }
}

/// One forward pass: a tape plus lazy parameter binding.
pub struct Ctx<'a> {
    pub g: GradGraph,
    arena: &'a ParamArena,
    bound: Vec<Option<Tensor>>,
    overrides: Option<Vec<Tensor>>,
    trainable: bool,
}

impl<'a> Ctx<'a> {
    /// Parameters bind as trainable leaves; gradients flow to them.
    pub fn new(arena: &'a ParamArena) -> Ctx<'a> {
        Ctx { g: GradGraph::new(), arena, bound: vec![None; arena.len()], overrides: None, trainable: true }
    }

    /// Inference mode: parameters bind as constants, halving backward work
    /// and letting the tape skip gradient bookkeeping.
    pub fn frozen(arena: &'a ParamArena) -> Ctx<'a> {
        Ctx { trainable: false, ..Ctx::new(arena) }
    }

    /// Binds substitute values (same order and shapes as the arena) instead
    /// of the stored ones. Finite-difference checks nudge through this.
    pub fn with_overrides(arena: &'a ParamArena, values: Vec<Tensor>) -> Ctx<'a> {
        assert_eq!(values.len(), arena.len(), "override count mismatch");
        Ctx { overrides: Some(values), ..Ctx::new(arena) }
    }

    /// The tape-bound tensor for a parameter, registering it on first use.
    pub fn param(&mut self, id: ParamId) -> Tensor {
        if let Some(t) = &self.bound[id.0] {
            return t.clone();
        }
        let source = match &self.overrides {
            Some(vals) => &vals[id.0],
            None => self.arena.get(id),
        };
        // an override already living on this tape (difference checks swap
        // their tape in and pre-register leaves) is used as-is
        let t = if self.g.owns(source) {
            source.clone()
        } else if self.trainable {
            self.g.leaf(source)
        } else {
            self.g.constant(source)
        };
        self.bound[id.0] = Some(t.clone());
        t
    }

    /// Runs backward and returns per-parameter gradients, zeros for
    /// parameters the forward pass never touched.
    pub fn grads(self, loss: &Tensor) -> Result<Vec<Tensor>, crate::tensor::TensorError> {
        let Ctx { g, arena, bound, .. } = self;
        let grads: Gradients = g.backward(loss)?;
        Ok(bound
            .iter()
            .enumerate()
            .map(|(i, b)| match b.as_ref().and_then(|t| grads.of(t)) {
                Some(gt) => gt.clone(),
                None => Tensor::zeros(arena.get(ParamId(i)).shape()),
            })
            .collect())
    }
}
