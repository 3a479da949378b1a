//! Named trainable tensors.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{AdsError, Result};
use crate::tensor::DenseValue;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: DenseValue,
    /// Embedding tables receive row-sparse gradients and lazy optimizer updates.
    pub sparse: bool,
}

/// Insertion-ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: DenseValue) -> Result<ParamId> {
        self.insert_with(name, value, false)
    }

    pub fn insert_table(&mut self, name: &str, value: DenseValue) -> Result<ParamId> {
        if value.rank() != 2 {
            return Err(AdsError::Validation(format!(
                "embedding table {name} must be 2-D, got {:?}",
                value.shape()
            )));
        }
        self.insert_with(name, value, true)
    }

    fn insert_with(&mut self, name: &str, value: DenseValue, sparse: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(AdsError::Validation(format!(
                "duplicate parameter name {name}"
            )));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            sparse,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| AdsError::Validation(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, name: &str) -> Result<&DenseValue> {
        Ok(&self.get(self.id(name)?).value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut DenseValue> {
        let id = self.id(name)?;
        Ok(&mut self.get_mut(id).value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    /// Total trainable scalar count, optionally excluding embedding tables.
    pub fn scalar_count(&self, include_tables: bool) -> usize {
        self.params
            .iter()
            .filter(|p| include_tables || !p.sparse)
            .map(|p| p.value.len())
            .sum()
    }

    /// Overwrites every entry with uniform noise in `[-scale, scale]`.
    pub fn randomize<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = rng.random_range(-scale..=scale);
            }
        }
    }
}
