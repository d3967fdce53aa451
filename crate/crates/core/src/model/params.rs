use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub(crate) fn randn<R: Rng + ?Sized>(&mut self, name: String, shape: &[usize], std: f64, rng: &mut R) -> usize {
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn shapes(&self) -> Vec<&[usize]> {
        self.tensors.iter().map(Tensor::shape).collect()
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        if !self.tensors[id].same_shape(&value) {
            return Err(Error::shape(
                "set parameter",
                format!("{name}: {:?} vs {:?}", self.tensors[id].shape(), value.shape()),
            ));
        }
        self.tensors[id] = value;
        Ok(())
    }

    /// Places every parameter on the tape, in registration order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Order-sensitive bit fingerprint of all parameters.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::tensor::Fnv::default();
        for (name, t) in self.iter() {
            h.write(name.as_bytes());
            h.write(&t.checksum().to_le_bytes());
        }
        h.finish()
    }
}
