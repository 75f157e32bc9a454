//! Named parameter storage shared by every network module.
//!
//! Modules hold [`ParamId`] handles into a [`Params`] store rather than owning
//! tensors, so one architecture description can run against an `f32` store
//! for training and an `f64` copy for gradient checking.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PcqError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<F = f32> {
    pub name: String,
    pub value: Tensor<F>,
}

#[derive(Debug, Clone, Default)]
pub struct Params<F = f32> {
    entries: Vec<Parameter<F>>,
}

impl<F: Scalar> Params<F> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn numel_under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Replaces all values from `other`, which must have identical layout.
    pub fn copy_from(&mut self, other: &Params<F>) {
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            debug_assert_eq!(dst.name, src.name);
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
    }

    pub(crate) fn push(&mut self, name: String, value: Tensor<F>) -> ParamId {
        self.entries.push(Parameter { name, value });
        ParamId(self.entries.len() - 1)
    }
}

/// Weight initialisation scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Kaiming-uniform over fan-in: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    KaimingUniform {
        fan_in: usize,
    },
    Zeros,
}

/// Registers named parameters while a model is being constructed.
pub struct ParamBuilder {
    params: Params<f32>,
    names: HashSet<String>,
    prefix: Vec<String>,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            params: Params::default(),
            names: HashSet::new(),
            prefix: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Runs `f` with `segment` appended to the name prefix.
    pub fn scope<T>(&mut self, segment: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.prefix.push(segment.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn add(&mut self, leaf: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let mut name = self.prefix.join(".");
        if !name.is_empty() {
            name.push('.');
        }
        name.push_str(leaf);
        if !self.names.insert(name.clone()) {
            return Err(PcqError::Config(format!("duplicate parameter name {name}")));
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
            }
        };
        Ok(self.params.push(name, value))
    }

    pub fn finish(self) -> Params<f32> {
        self.params
    }
}
