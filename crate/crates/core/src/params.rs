//! Named trainable parameters, their initialization, and per-pass variable views.

use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Zeros,
    Ones,
}

/// Ordered map from hierarchical names (`encoder.0.block.1.dw1.weight`) to tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

fn bits<T: Scalar>(v: T) -> Vec<u8> {
    let mut out = Vec::with_capacity(8);
    v.write_le(&mut out);
    out
}

impl<T: Scalar> PartialEq for ParamStore<T> {
    /// Bitwise equality of names, order and values.
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(&x, &y)| bits(x) == bits(y))
            })
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i]).ok_or_else(|| Error::MissingParam(name.into()))
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| Error::MissingParam(name.into()))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::ShapeMismatch { op: "set parameter", lhs: self.tensors[i].shape(), rhs: value.shape() });
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn total(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }

    /// Zeroes every parameter whose name satisfies `pred`; returns how many matched.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let mut hits = 0;
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if pred(name) {
                *t = Tensor::zeros(t.shape());
                hits += 1;
            }
        }
        hits
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Registers parameters with deterministic, name-seeded initial values.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a Rng,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a Rng) -> Self {
        ParamBuilder { store, rng }
    }

    pub fn declare(&mut self, name: String, shape: Shape, init: Init) -> Result<String> {
        let value = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                self.rng.split(&name).uniform_tensor(shape, -bound, bound)
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
        };
        self.store.insert(name.clone(), value)?;
        Ok(name)
    }
}

/// Parameters wrapped as autodiff variables for one pass, in store order.
pub struct ParamVars<T: Scalar> {
    vars: Vec<Var<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamVars<T> {
    /// Untracked view: no gradients are recorded for parameters.
    pub fn constants(store: &ParamStore<T>) -> Self {
        ParamVars { vars: store.tensors.iter().cloned().map(Var::constant).collect(), index: store.index.clone() }
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn tracked(store: &ParamStore<T>, tape: &Tape<T>) -> Self {
        ParamVars { vars: store.tensors.iter().map(|t| tape.leaf(t.clone())).collect(), index: store.index.clone() }
    }

    /// Pairs existing variables with parameter names, in order.
    pub fn from_vars(names: &[String], vars: &[Var<T>]) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ParamVars { vars: vars.to_vec(), index }
    }

    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.index.get(name).map(|&i| &self.vars[i]).ok_or_else(|| Error::MissingParam(name.into()))
    }

    /// Gradient of every parameter, in store order.
    pub fn grads(&self, grads: &Gradients<T>) -> Result<Vec<Tensor<T>>> {
        self.vars.iter().map(|v| grads.get(v)).collect()
    }
}

/// Everything a block needs during a forward pass.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    pub params: &'a ParamVars<T>,
    /// Treat globally pooled gate statistics as constants during backward.
    pub detach_global_gates: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamVars<T>) -> Self {
        Ctx { tape, params, detach_global_gates: false }
    }

    pub fn p(&self, name: &str) -> Result<&'a Var<T>> {
        self.params.get(name)
    }
}
