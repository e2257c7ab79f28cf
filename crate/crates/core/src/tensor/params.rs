use std::collections::HashMap;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

/// Tape handles for every entry of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Records every tensor as a borrowed leaf.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| tape.param(&e.tensor, requires_grad))
                .collect(),
        }
    }

    /// Leaf gradients in store order; entries not requiring grad are zero.
    pub fn collect_grads(&self, tape: &Tape<'_, T>, bound: &Bound) -> Vec<Vec<T>> {
        self.entries
            .iter()
            .zip(&bound.vars)
            .map(|(e, &v)| {
                tape.grad(v)
                    .map(Tensor::into_data)
                    .unwrap_or_else(|| vec![T::zero(); e.tensor.numel()])
            })
            .collect()
    }

    /// All parameters concatenated in store order.
    pub fn flatten(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .entries
            .iter()
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect();
        let n = data.len();
        Tensor::new(vec![n], data).expect("flat shape")
    }

    /// Binds every entry as a slice of one flat leaf (see [`Self::flatten`]),
    /// so a whole parameter set can be differentiated as a single tensor.
    pub fn bind_flat(&self, tape: &mut Tape<'_, T>, flat: Var) -> Result<Bound> {
        let total = tape.value(flat).numel();
        if total != self.num_params() {
            return Err(Error::shape(format!(
                "flat vector of {total} for {} parameters",
                self.num_params()
            )));
        }
        let mut start = 0;
        let mut vars = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let n = e.tensor.numel();
            vars.push(tape.select(flat, (start..start + n).collect(), e.tensor.shape())?);
            start += n;
        }
        Ok(Bound { vars })
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    decay: e.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
