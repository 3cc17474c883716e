//! Named parameter storage shared between graphs, the optimizer and checkpoints.

use std::collections::BTreeMap;

use crate::autograd::{Gradients, Graph};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = vec![T::zero(); value.numel()];
        self.params.push(Param { name, value, grad });
        Ok(id)
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the gradients of every parameter used in `graph` into the store.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (pid, node) in graph.params() {
            if let Some(g) = grads.get(node) {
                for (dst, &src) in self.params[pid].grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    /// Adds another store's gradients (same layout) into this one.
    pub fn add_grads_from(&mut self, other: &ParamStore<T>) {
        for (p, o) in self.params.iter_mut().zip(&other.params) {
            for (d, &s) in p.grad.iter_mut().zip(&o.grad) {
                *d += s;
            }
        }
    }

    /// Grad vectors only, in parameter order.
    pub fn grads(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| p.grad.clone()).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.iter().map(|g| U::of(g.f64())).collect(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Parameter initialisers.
pub mod init {
    use super::*;

    /// Glorot uniform for a `[fan_in, fan_out]` matrix.
    pub fn xavier<T: Real>(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| T::of(rng.range(-a, a))).collect();
        Tensor::new([fan_in, fan_out], data).expect("positive extents")
    }

    pub fn uniform<T: Real>(rng: &mut SeededRng, shape: &[usize], a: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.range(-a, a))).collect();
        Tensor::new(shape.to_vec(), data).expect("positive extents")
    }

    pub fn normal<T: Real>(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.normal() * std)).collect();
        Tensor::new(shape.to_vec(), data).expect("positive extents")
    }
}
