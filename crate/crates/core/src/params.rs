use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Index of a tensor inside a [`ParamStore`]. Stores built from the same
/// layout (student, sampling EMA, consistency teacher) share ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Mat<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(id))
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.tensors[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Mat<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Mat::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Flattened view of every parameter, in store order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    pub fn unflatten_from(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}
