//! Named parameter tables and per-step graph binding.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

/// All model tensors keyed by dotted name (`x.layer0.self_attn.wq`, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, requires_grad: bool) {
        self.params.insert(
            name.into(),
            Param {
                value,
                grad: None,
                requires_grad,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Format(format!("unknown tensor name {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Format(format!("unknown tensor name {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Param<T>)> {
        self.params.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Total scalar count of tensors under `prefix`.
    pub fn numel(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).map(|(_, p)| p.value.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, prefix: &str, requires_grad: bool) {
        for (_, p) in self.params.iter_mut().filter(|(k, _)| k.starts_with(prefix)) {
            p.requires_grad = requires_grad;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Adds `grads` into the stored grad buffers.
    pub fn accumulate_grads(&mut self, grads: BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let p = self.get_mut(&name)?;
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Copies every tensor under `from` onto the same suffix under `to`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) {
        let copies: Vec<(String, Tensor<T>)> = self
            .with_prefix(from)
            .map(|(k, p)| (format!("{to}{}", &k[from.len()..]), p.value.clone()))
            .collect();
        for (name, value) in copies {
            match self.params.get_mut(&name) {
                Some(p) => p.value = value,
                None => self.insert(name, value, false),
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.as_ref().map(Tensor::cast),
                            requires_grad: p.requires_grad,
                        },
                    )
                })
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and value bytes of tensors under `prefix`.
    pub fn digest(&self, prefix: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, p) in self.with_prefix(prefix) {
            h.update(name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// A tape bound to a parameter table for one forward/backward pass.
///
/// Each parameter becomes a single leaf the first time it is used. With
/// `no_grad` every parameter is bound as a constant, so nothing computed
/// through this graph can receive gradients.
pub struct Graph<'p, T: Scalar = f32> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: BTreeMap<String, Var>,
    no_grad: bool,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            no_grad: false,
        }
    }

    pub fn no_grad(params: &'p ParamStore<T>) -> Self {
        Graph {
            no_grad: true,
            ..Graph::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.params.get(name)?;
        let v = self
            .tape
            .leaf(p.value.clone(), p.requires_grad && !self.no_grad);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Gradients of `loss` for every bound trainable parameter; parameters
    /// off the loss path get zeros.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor<T>>> {
        let grads = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter(|(_, &v)| self.tape.requires_grad(v))
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(&self.tape, v)))
            .collect())
    }
}
