use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

/// One trainable tensor plus its gradient and the two optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Ordered, name-addressed parameter collection.
///
/// Iteration follows insertion order, which is also the on-disk order of
/// checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            params: Vec::new(),
            index: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::invalid("param_store", alloc::format!("duplicate parameter `{name}`")));
        }
        let n = value.numel();
        self.names.push(name.to_string());
        self.params.push(Param {
            value,
            grad: None,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(&self.params)
    }

    /// Number of optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Drops all gradients; the next backward pass starts from zero.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the parameter gradients recorded on `tape` into this store.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) {
        for (idx, g) in tape.param_grads() {
            let p = &mut self.params[idx];
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => p.grad = Some(g.to_vec()),
            }
        }
    }

    /// Same names and values at another precision; gradients and moments reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, p) in self.iter() {
            out.insert(name, p.value.cast()).expect("names are unique");
        }
        out
    }

    /// Parameter values only, for bit-exact comparisons of two stores.
    pub fn values_equal(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.value == b.value)
    }
}
