use crate::error::{Error, Result};
use crate::linalg::{Matrix, Precision};

/// A dense tensor of up to three dimensions with an optional gradient buffer.
///
/// Model parameters live in `Tensor`s; a forward pass copies them onto a
/// [`Tape`](super::Tape) as leaves and the resulting gradients are
/// accumulated back with [`Tensor::accumulate_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > 3 {
            return Err(Error::ShapeMismatch(format!("tensors have at most 3 dims, got {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![0.0; numel(shape)]).expect("valid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::new(shape, vec![value; numel(shape)]).expect("valid shape")
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self::new(&[m.rows(), m.cols()], m.data().to_vec()).expect("matrix shape")
    }

    /// Marks this tensor as trainable.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient of length {} for tensor {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Rounds the stored values to `precision`.
    pub fn quantize(&mut self, precision: Precision) {
        if precision == Precision::F32 {
            self.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// 2-D view as a [`Matrix`]; 1-D tensors become a single row.
    pub fn to_matrix(&self) -> Matrix {
        let (r, c) = match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            [b, r, c] => (b * r, *c),
            _ => unreachable!(),
        };
        Matrix::from_vec(r, c, self.data.clone()).expect("finite tensor")
    }
}
