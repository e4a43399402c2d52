//! Dense row-major tensors over a [`Scalar`] element type.
//!
//! Tensors are immutable values: every operation returns a fresh tensor,
//! so sharing them across threads is safe. Construction rejects NaN and
//! infinite entries.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense multi-dimensional array, row-major. Scalars have an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBase<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> TensorBase<F> {
    /// Build a tensor, checking the shape/data length agreement and that
    /// every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {v}")));
        }
        Ok(Self { shape, data })
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: F) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    /// 1-D tensor from a vector.
    pub fn vector(data: Vec<F>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// 2-D tensor from rows*cols data in row-major order.
    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::one(); n],
        }
    }

    /// One-hot 1-D tensor of length `len` with a single unit entry.
    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut data = vec![F::zero(); len];
        data[index] = F::one();
        Self {
            shape: vec![len],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn dot(&self, other: &Self) -> Result<F> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "dot of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(F::zero(), |acc, (a, b)| acc + *a * *b))
    }

    pub fn norm_l2(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |acc, v| acc + *v * *v)
            .sqrt()
    }

    pub fn norm_l1(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, v| acc + v.abs())
    }

    pub fn norm_linf(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |acc, v| acc.max(v.abs()))
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    /// Elementwise difference; shapes must match.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| *v * factor).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    /// Clamp every coordinate into its `[lo, hi]` interval.
    pub fn clamp_to_box(&self, bounds: &[(F, F)]) -> Result<Self> {
        if bounds.len() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "box of {} bounds for tensor of {} entries",
                bounds.len(),
                self.data.len()
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(bounds)
                .map(|(v, (lo, hi))| v.max(*lo).min(*hi))
                .collect(),
        })
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<F>) -> Self {
        Self { shape, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Tensor = TensorBase<f64>;

    #[test]
    fn rejects_shape_data_disagreement() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::vector(vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::vector(vec![0.5, 0.5, 0.1]).unwrap();
        assert_eq!(t.argmax(), 0);
    }

    #[test]
    fn norms() {
        let t = Tensor::vector(vec![3.0, -4.0]).unwrap();
        assert_eq!(t.norm_l2(), 5.0);
        assert_eq!(t.norm_l1(), 7.0);
        assert_eq!(t.norm_linf(), 4.0);
    }

    #[test]
    fn box_clamp() {
        let t = Tensor::vector(vec![-0.5, 1.5]).unwrap();
        let clamped = t.clamp_to_box(&[(0.0, 1.0), (0.0, 1.0)]).unwrap();
        assert_eq!(clamped.data(), &[0.0, 1.0]);
    }
}
