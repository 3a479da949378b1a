//! Fully connected layers shared by the generator networks and the head.

use rand::Rng;

use crate::error::Result;
use crate::params::ParameterStore;
use crate::tensor::{DenseValue, Graph, Var};

/// How a layer's weight starts out; biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    Uniform,
    Zero,
}

/// `y = x·Wᵀ + b` with `W: [out × in]` stored as `{name}.w` / `{name}.b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn register<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R, init: Init) -> Result<()> {
        let w = match init {
            Init::Uniform => uniform(rng, &[self.output, self.input], self.input),
            Init::Zero => DenseValue::zeros(&[self.output, self.input]),
        };
        store.insert(&self.weight(), w)?;
        store.insert(&self.bias(), DenseValue::zeros(&[self.output]))?;
        Ok(())
    }

    /// Applies the layer to `x: [..., in]` flattened to rows.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight())?;
        let b = g.param(&self.bias())?;
        let y = g.matmul_nt(x, w)?;
        g.add(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.output * self.input + self.output
    }

    /// Multiply-adds plus the bias additions for one input row.
    pub fn flops(&self) -> usize {
        self.output * self.input + self.output
    }
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> DenseValue {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    DenseValue::new(shape, data).expect("positive extents")
}
