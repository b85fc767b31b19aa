use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math::{Matrix, Real};

/// Named learnable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Matrix<T>)>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, value: Matrix<T>) -> usize {
        self.entries.push((name.into(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].0
    }

    pub fn get(&self, slot: usize) -> &Matrix<T> {
        &self.entries[slot].1
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Matrix<T> {
        &mut self.entries[slot].1
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix<T>> {
        self.slot(name).map(|s| self.get(s))
    }

    pub fn values(&self) -> Vec<Matrix<T>> {
        self.entries.iter().map(|(_, m)| m.clone()).collect()
    }

    /// Replaces every tensor, keeping names; shapes must match.
    pub fn set_values(&mut self, values: Vec<Matrix<T>>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                values.len()
            )));
        }
        for ((name, cur), v) in self.entries.iter().zip(&values) {
            if cur.shape() != v.shape() {
                return Err(Error::InvalidArgument(format!(
                    "tensor {name}: shape {:?} does not match {:?}",
                    v.shape(),
                    cur.shape()
                )));
            }
        }
        for ((_, cur), v) in self.entries.iter_mut().zip(values) {
            *cur = v;
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf, in slot order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, m)| tape.leaf(m.clone()))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }
}
