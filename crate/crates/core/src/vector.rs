//! Flat parameter vectors.
//!
//! A [`WeightVector`] is the flattened real-valued parameter set of a
//! network; every object the pipeline optimizes, noises, or generates is
//! one of these. Entries are required to be finite at API boundaries.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    values: Vec<f64>,
}

impl WeightVector {
    /// Wraps a raw vector, rejecting NaN/Inf entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let v = WeightVector { values };
        v.check_finite("WeightVector::new")?;
        Ok(v)
    }

    pub fn zeros(dim: usize) -> Self {
        WeightVector {
            values: vec![0.0; dim],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.values.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{context} (index {i})"))),
            None => Ok(()),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum()
    }

    pub fn dot(&self, other: &WeightVector) -> Result<f64> {
        self.match_dim(other, "dot")?;
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    /// self += factor * other
    pub fn add_scaled(&mut self, other: &WeightVector, factor: f64) -> Result<()> {
        self.match_dim(other, "add_scaled")?;
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> WeightVector {
        WeightVector {
            values: self.values.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn add(&self, other: &WeightVector) -> Result<WeightVector> {
        self.match_dim(other, "add")?;
        Ok(WeightVector {
            values: self
                .values
                .iter()
                .zip(other.values.iter())
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &WeightVector) -> Result<WeightVector> {
        self.match_dim(other, "sub")?;
        Ok(WeightVector {
            values: self
                .values
                .iter()
                .zip(other.values.iter())
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn squared_distance(&self, other: &WeightVector) -> Result<f64> {
        self.match_dim(other, "squared_distance")?;
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// Mean squared coordinate difference, the reconstruction metric.
    pub fn mse(&self, other: &WeightVector) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Empty("mse over empty vectors".into()));
        }
        Ok(self.squared_distance(other)? / self.len() as f64)
    }

    fn match_dim(&self, other: &WeightVector, op: &str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::dim(format!(
                "{op}: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

impl Deref for WeightVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.values
    }
}

impl DerefMut for WeightVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(v: WeightVector) -> Vec<f64> {
        v.values
    }
}
