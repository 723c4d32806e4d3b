//! Dense tensors with a small tape-based reverse-mode engine.
//!
//! Everything is 64-bit. The op set is exactly what the point-set networks
//! need: dense products, row-broadcast bias, ReLU, batch norm, per-set
//! reductions (max / mean / attention), affine transforms applied per set,
//! and the task losses. There is no general broadcasting.

mod adam;
mod gemm;
mod gradcheck;
mod graph;

pub use adam::AdamState;
pub use gemm::gemm;
pub use gradcheck::finite_difference_check;
pub use graph::{BnStats, Graph, Var, COSINE_EPS};

use crate::error::{dim_err, Result};

/// Whether a forward pass is a training pass (batch statistics, dropout)
/// or an inference pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dense row-major value/gradient pair. The gradient buffer is allocated
/// only for tensors that require gradients or that a backward pass reaches.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

impl PartialEq for Tensor {
    /// Shape and values; gradient buffers are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return dim_err(format!("shape {shape:?} must be a non-empty list of positive extents"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            grad: Vec::new(),
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: Vec::new(),
            requires_grad: false,
        }
    }

    /// Builds an `r×c` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return dim_err("no rows given");
        };
        let cols = first.len();
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        if requires_grad {
            self.grad.resize(self.data.len(), 0.0);
        }
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Accumulated gradient; empty while no buffer has been allocated.
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        self.grad.resize(self.data.len(), 0.0);
        &mut self.grad
    }

    /// Adds `g` to the gradient, taking ownership when no buffer exists yet.
    pub(crate) fn accumulate_grad(&mut self, g: Vec<f64>) {
        if self.grad.is_empty() {
            self.grad = g;
        } else {
            self.grad.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a 2-D tensor (the full length for a 1-D tensor).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub(crate) fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }
}

/// Partition of the rows of a stacked matrix into consecutive sets
/// (one set per point cloud in a batch).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        if lengths.is_empty() {
            return Err(crate::Error::EmptySet("no segments".into()));
        }
        if lengths.iter().any(|&n| n == 0) {
            return Err(crate::Error::EmptySet("segment with zero rows".into()));
        }
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        let mut acc = 0;
        for &n in lengths {
            acc += n;
            offsets.push(acc);
        }
        Ok(Segments { offsets })
    }

    pub fn single(n: usize) -> Result<Self> {
        Self::from_lengths(&[n])
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_shape_against_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
    }

    #[test]
    fn grad_starts_zero_and_resets() {
        let plain = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(plain.grad().is_empty());
        let mut t = plain.clone().with_requires_grad(true);
        assert_eq!(t, plain);
        assert_eq!(t.grad().len(), t.numel());
        assert!(t.grad().iter().all(|&g| g == 0.0));
        t.grad_mut()[1] = 5.0;
        t.zero_grad();
        assert!(t.grad().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn segments_cover_rows() {
        let s = Segments::from_lengths(&[2, 3]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.total_rows(), 5);
        assert_eq!(s.range(1), 2..5);
        assert!(Segments::from_lengths(&[2, 0]).is_err());
    }
}

#[cfg(test)]
mod op_tests;
