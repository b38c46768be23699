//! Named, shaped storage for every learnable array of a model.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Vec<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            specs: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn add<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init, rng: &mut R) -> ParamId {
        let n = rows * cols;
        let values = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
            }
        };
        self.specs.push(ParamSpec {
            name: name.into(),
            rows,
            cols,
        });
        self.values.push(values);
        ParamId(self.specs.len() - 1)
    }

    /// Rebuilds a store from raw arrays, checking them against `specs`.
    pub fn from_parts(specs: Vec<ParamSpec>, values: Vec<Vec<T>>) -> Option<Self> {
        if specs.len() != values.len() || specs.iter().zip(&values).any(|(s, v)| s.len() != v.len()) {
            return None;
        }
        Some(ParamStore { specs, values })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Vec<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    /// Total number of scalars across all arrays.
    pub fn total(&self) -> usize {
        self.specs.iter().map(ParamSpec::len).sum()
    }

    /// Records the parameter on `tape` as a trainable leaf.
    pub fn var<'p>(&'p self, tape: &mut Tape<'p, T>, id: ParamId) -> Var {
        let s = &self.specs[id.0];
        tape.param(id.0, &self.values[id.0], s.rows, s.cols)
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.values.iter().map(|v| vec![T::zero(); v.len()]).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|&x| U::from_f64(x.as_f64())).collect())
                .collect(),
        }
    }
}
