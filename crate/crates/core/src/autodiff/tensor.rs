use crate::error::{shape_err, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
///
/// A tensor "requires grad" exactly when it carries a gradient buffer, and
/// that buffer always has the same length as `values`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.is_empty() {
            return Err(shape_err!("tensor needs at least one dimension"));
        }
        if expected != values.len() {
            return Err(shape_err!(
                "dims {:?} need {} values, got {}",
                dims,
                expected,
                values.len()
            ));
        }
        Ok(Tensor {
            dims,
            values,
            grad: None,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err!("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    /// Attaches a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.values.len()]);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        match (on, self.grad.is_some()) {
            (true, false) => self.grad = Some(vec![0.0; self.values.len()]),
            (false, true) => self.grad = None,
            _ => {}
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer; a no-op for tensors without one.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(shape_err!(
                "gradient of length {} for tensor of length {}",
                delta.len(),
                self.values.len()
            ));
        }
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().zip(delta).for_each(|(g, d)| *g += d);
        }
        Ok(())
    }

    /// `(rows, cols)` view: rank-1 tensors are a single row.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(shape_err!("expected rank 1 or 2, got {:?}", other)),
        }
    }

    pub fn rows(&self) -> usize {
        self.matrix_dims().map_or(0, |d| d.0)
    }

    pub fn cols(&self) -> usize {
        self.matrix_dims().map_or(0, |d| d.1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
            && self.grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }
}
