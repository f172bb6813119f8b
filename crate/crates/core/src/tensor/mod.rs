//! Dense tensors and a tape-based reverse-mode differentiation graph.
//!
//! Parameters live in [`Tensor`]s outside any graph. A forward pass binds them
//! into a fresh [`Graph`] as leaves, records operations, and `backward`
//! accumulates gradients back into the owning tensors.

mod gradcheck;
mod graph;

pub use gradcheck::{check_gradients, finite_difference, relative_error};
pub use graph::{sigmoid, softplus, ElementwiseOp, Graph, Var};

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

/// Dense row-major tensor of rank at most 3, with an accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::InvalidArgument(format!(
                "tensor rank must be 1..=3, got shape {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(shape_err("Tensor::new", shape, &[values.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            values,
            requires_grad: true,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("valid zero tensor")
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n]).expect("valid filled tensor")
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self::new(&[m.rows(), m.cols()], m.data().to_vec()).expect("matrix shape is valid")
    }

    pub fn constant(mut self) -> Self {
        self.requires_grad = false;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.grad.len() {
            return Err(shape_err("accumulate_grad", &self.shape, &[g.len()]));
        }
        for (a, b) in self.grad.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    /// Rank-2 view used by the graph: leading dimensions are folded into rows.
    pub fn matrix_dims(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("rank >= 1");
        (self.values.len() / cols.max(1), cols)
    }

    pub fn to_matrix(&self) -> Matrix {
        let (r, c) = self.matrix_dims();
        Matrix::from_vec(r, c, self.values.clone()).expect("consistent dims")
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
