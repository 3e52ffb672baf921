//! Dense parameter tensors and the named registry that owns them.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::io_formats::{Entry, TensorData};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!("dims {dims:?} do not match {} values", values.len())));
        }
        let grad = vec![0.0; values.len()];
        Ok(Self { dims, values, grad })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            values: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered, uniquely named set of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), self.tensors.len() - 1);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `(index, gradient)` pairs produced by a backward pass.
    pub fn accumulate(&mut self, grads: &[(usize, Vec<f64>)], scale: f64) {
        for (i, g) in grads {
            if let Some(t) = self.tensors.get_mut(*i) {
                t.grad.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| Entry::f64(n.clone(), &t.dims, t.values.clone()))
            .collect()
    }

    /// Restores values for every tensor of `self` from container entries.
    pub fn load_entries(&mut self, entries: &[Entry]) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let e = crate::io_formats::find(entries, name)?;
            let dims: Vec<usize> = e.dims.iter().map(|&d| d as usize).collect();
            if dims != t.dims {
                return Err(Error::Shape(format!("checkpoint tensor {name:?} has dims {dims:?}, expected {:?}", t.dims)));
            }
            match &e.data {
                TensorData::F64(v) => t.values.clone_from(v),
                other => t.values = other.to_f64(),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_names_and_bad_dims() {
        let mut p = ModelParams::new();
        p.insert("a", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(matches!(p.insert("a", Tensor::zeros(vec![1])), Err(Error::DuplicateName(_))));
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn entries_round_trip() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap()).unwrap();
        p.insert("b", Tensor::new(vec![1], vec![-0.5]).unwrap()).unwrap();
        let entries = p.to_entries();
        let mut q = p.clone();
        q.tensors_mut().iter_mut().for_each(|t| t.values.fill(9.0));
        q.load_entries(&entries).unwrap();
        assert_eq!(p, q);
    }
}
