//! Named, shaped parameter tensors and their binding onto a [`Tape`].

use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors. Gradients and optimizer
/// moments live outside (see `train`), indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<F>) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "parameter {} shape change",
            self.names[id.0]
        );
        self.values[id.0] = value;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }
}

/// One forward pass: a tape plus lazy bindings of store parameters to vars.
pub struct Ctx<'a, F: Real> {
    pub tape: Tape<F>,
    pub store: &'a ParamStore<F>,
    bound: Vec<Option<Var>>,
}

impl<'a, F: Real> Ctx<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        Self { tape: Tape::new(), store, bound: vec![None; store.len()] }
    }

    /// Var for a parameter, binding it as a differentiable leaf on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id).clone(), true);
        self.bound[id.0] = Some(v);
        v
    }

    /// After `tape.backward`, add each bound parameter's gradient into `acc`
    /// (indexed like the store). Unbound or un-reached parameters contribute
    /// nothing.
    pub fn accumulate_grads(&self, acc: &mut [Option<Tensor<F>>]) {
        for (i, bound) in self.bound.iter().enumerate() {
            let Some(var) = bound else { continue };
            let Some(g) = self.tape.grad(*var) else { continue };
            match &mut acc[i] {
                Some(t) => *t = t.zip(g, |a, b| a + b),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }
}
