use std::collections::HashMap;
use std::ops::Index;

use crate::element::Element;
use crate::error::{invalid, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Stable handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Element = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape variables for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binds externally created variables, one per store entry in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(invalid("ParamStore::add", format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect() }
    }

    /// Gradient per parameter, zero-filled where the loss did not reach it.
    pub fn collect_grads(&self, grads: &Gradients<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(v, &var)| grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.values.iter().map(|v| Tensor::zeros(v.shape())).collect()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Overwrites values from `(name, tensor)` pairs; every stored name must be present
    /// with a matching shape.
    pub fn load_named<U: Element>(&mut self, tensors: &[(String, Tensor<U>)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor<U>> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = lookup
                .get(name.as_str())
                .ok_or_else(|| invalid("load_named", format!("missing tensor {name}")))?;
            if src.shape() != value.shape() {
                return Err(invalid(
                    "load_named",
                    format!("{name}: stored shape {:?} != expected {:?}", src.shape(), value.shape()),
                ));
            }
            *value = src.cast();
        }
        Ok(())
    }
}

/// Element-wise accumulate `src` into `acc`.
pub fn accumulate<T: Element>(acc: &mut [Tensor<T>], src: &[Tensor<T>]) {
    for (a, s) in acc.iter_mut().zip(src) {
        a.add_assign(s);
    }
}
