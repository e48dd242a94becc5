use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::tape::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named parameter tensors, each marked trainable or frozen.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Matrix>,
    trainable: Vec<bool>,
    decay: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    /// Registers a tensor. `decay` marks it for weight decay (weight
    /// matrices yes, biases and normalisation parameters no).
    pub fn insert(&mut self, name: &str, value: Matrix, decay: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
        self.trainable.push(true);
        self.decay.push(decay);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|id| &self.tensors[id.0])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn set_trainable_all(&mut self, trainable: bool) {
        self.trainable.iter_mut().for_each(|t| *t = trainable);
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.is_trainable(*id)).collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| !self.is_trainable(*id)).collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Little-endian bytes of every tensor in registration order, each
    /// preceded by its name and shape.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_values() * 8);
        for (name, t) in self.iter() {
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update([0]);
            h.update((t.nrows() as u64).to_le_bytes());
            h.update((t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    Matrix::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_and_digest() {
        let mut s = ParamStore::default();
        let a = s.insert("a", Matrix::zeros((2, 2)), true);
        let b = s.insert("b", Matrix::ones((1, 2)), false);
        assert_eq!(s.id("b"), Some(b));
        assert_eq!(s.num_values(), 6);
        let d0 = s.digest();
        s.get_mut(a)[(0, 0)] = 1.0;
        assert_ne!(d0, s.digest());
        s.set_trainable_all(false);
        assert!(s.trainable_ids().is_empty());
        assert_eq!(s.frozen_ids().len(), 2);
    }
}
