use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
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

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Bit-level digest of all values.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            n.hash(&mut h);
            for v in t.values() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Binds every tensor as a graph leaf. `trainable` decides whether
    /// gradients flow into them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                let (r, c) = t.matrix_dims();
                let v = t.values().to_vec();
                if trainable {
                    g.param(r, c, v).expect("tensor dims consistent")
                } else {
                    g.constant_values(r, c, v).expect("tensor dims consistent")
                }
            })
            .collect()
    }

    /// Overwrites values from flat vectors, one per tensor.
    pub fn set_values(&mut self, values: &[Vec<f64>]) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for (t, v) in self.tensors.iter_mut().zip(values) {
            if t.len() != v.len() {
                return Err(Error::InvalidArgument("tensor length mismatch".into()));
            }
            t.values_mut().copy_from_slice(v);
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.values().to_vec()).collect()
    }
}

/// Glorot-uniform matrix `[fan_in × fan_out]`.
pub(crate) fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let v = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(&[fan_in, fan_out], v).expect("valid shape")
}

pub(crate) fn zeros_row(n: usize) -> Tensor {
    Tensor::zeros(&[n])
}

pub(crate) fn ones_row(n: usize) -> Tensor {
    Tensor::filled(&[n], 1.0)
}
