//! Dense 4-axis feature-map storage.
//!
//! Every feature map in the network is a `(N, C, H, W)` array stored row-major
//! with `W` fastest. Matrices are carried as `(1, 1, R, S)` and batched
//! matrices as `(N, C, R, S)`.

use std::fmt;

use crate::error::{Error, Result};

/// Extents of a 4-axis tensor: `[N, C, H, W]`.
pub type Dims = [usize; 4];

pub fn numel(dims: Dims) -> usize {
    dims.iter().product()
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &preview)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, validating length and finiteness.
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {dims:?}")));
        }
        if data.len() != numel(dims) {
            return Err(Error::shape(
                "tensor",
                format!("{} values for dims {dims:?} ({} expected)", data.len(), numel(dims)),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("tensor construction, flat index {i}"),
            });
        }
        Ok(Self::from_parts(dims, data))
    }

    /// Caller guarantees `data.len() == numel(dims)`; finiteness is checked by the tape.
    pub(crate) fn from_parts(dims: Dims, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), numel(dims));
        Self {
            dims,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::from_parts(dims, vec![0.0; numel(dims)])
    }

    pub fn full(dims: Dims, value: f64) -> Self {
        Self::from_parts(dims, vec![value; numel(dims)])
    }

    /// Fills by evaluating `f(n, c, h, w)` in storage order.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(numel(dims));
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self::from_parts(dims, data)
    }

    /// A `(1, 1, rows, cols)` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new([1, 1, rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts([1, 1, 1, 1], vec![value])
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cc, hh, ww] = self.dims;
        ((n * cc + c) * hh + h) * ww + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.offset(n, c, h, w);
        self.data[i] = value;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor with dims {:?}",
                self.dims
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, dims: Dims) -> Result<Self> {
        if numel(dims) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {dims:?}", self.dims),
            ));
        }
        self.dims = dims;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), numel(dims));
        }
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.numel() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{} gradient values for {:?}", delta.len(), self.dims),
            ));
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Channel range `[start, end)` as a new tensor.
    pub fn channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims;
        if start >= end || end > c {
            return Err(Error::shape(
                "channels",
                format!("range {start}..{end} of {c} channels"),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * plane);
        for b in 0..n {
            let base = b * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Ok(Self::from_parts([n, end - start, h, w], data))
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{context}, flat index {i}"),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_nan() {
        assert!(Tensor::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
        let err = Tensor::new([1, 1, 1, 2], vec![0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert!(Tensor::new([1, 0, 2, 2], vec![]).is_err());
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::from_fn([2, 3, 4, 5], |n, c, h, w| (n * 1000 + c * 100 + h * 10 + w) as f64);
        for (i, v) in t.data().iter().enumerate() {
            let w = i % 5;
            let h = (i / 5) % 4;
            let c = (i / 20) % 3;
            let n = i / 60;
            assert_eq!(*v, (n * 1000 + c * 100 + h * 10 + w) as f64);
        }
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros([1, 1, 1, 2]);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }
}
