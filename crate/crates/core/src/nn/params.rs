use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Handle to one parameter tensor in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter store shared by every layer of a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub const fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Overwrites values from another set with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid("parameter names differ"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::invalid("parameter shapes differ"));
            }
            a.data.clone_from(&b.data);
        }
        Ok(())
    }

    /// Copies the named subset of `other` (matching names and shapes) into self.
    pub fn copy_matching(&mut self, other: &ParamSet, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            if !name.starts_with(prefix) {
                continue;
            }
            let idx = other
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::invalid(format!("parameter {name} missing from source")))?;
            if other.values[idx].shape() != value.shape() {
                return Err(Error::invalid(format!("parameter {name} has a different shape")));
            }
            value.data.clone_from(&other.values[idx].data);
            copied += 1;
        }
        Ok(copied)
    }
}

pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect(),
    )
}

/// Glorot/Xavier uniform initialization.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rows, cols, bound, rng)
}

pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite positive std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}
