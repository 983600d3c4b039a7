//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. Every extent is at least one and the data length
/// always equals the product of the shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor must have at least one dimension"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(format!("extent {pos} of {shape:?} is zero")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows usize")))
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![T::zero(); len],
        })
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> T) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self { shape, data })
    }

    /// Matrix from nested rows; handy in tests and fixtures.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(vec![r, c], rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(vec![n, n], |i| if i[0] == i[1] { T::one() } else { T::zero() })
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size in bytes of the payload.
    pub fn nbytes(&self) -> u64 {
        (self.data.len() * T::BYTES) as u64
    }

    /// Leading extents flattened into rows; the last extent is the row width.
    pub fn as_rows(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("nonempty shape");
        (self.data.len() / cols, cols)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// `(b, m, d)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, m, d] => Ok((b, m, d)),
            s => Err(Error::shape(format!("expected a B×M×D tensor, got shape {s:?}"))),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        Self::from_fn(vec![c, r], |i| self.data[i[1] * c + i[0]])
    }

    /// Columns `start..start + width` of a matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if width == 0 || start + width > c {
            return Err(Error::shape(format!(
                "column block {start}..{} out of range for {c} columns",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(r * width);
        for row in self.data.chunks_exact(c) {
            data.extend_from_slice(&row[start..start + width]);
        }
        Self::new(vec![r, width], data)
    }

    /// Elements `start..start + width` of a vector.
    pub fn segment(&self, start: usize, width: usize) -> Result<Self> {
        if self.ndim() != 1 || width == 0 || start + width > self.len() {
            return Err(Error::shape(format!(
                "segment {start}..{} out of range for shape {:?}",
                start + width,
                self.shape
            )));
        }
        Self::vector(self.data[start..start + width].to_vec())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64_lossy(x.to_f64_lossy())).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot add {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    /// Largest elementwise absolute difference, evaluated in f64.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot compare {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| {
                let v = x.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
