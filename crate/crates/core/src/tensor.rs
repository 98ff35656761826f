//! Dense row-major `f64` tensors.
//!
//! Images, feature maps and layer parameters all use this one type. The
//! element type is fixed to `f64` so that recomputing a subset of a layer on
//! another node reproduces the original values bit for bit.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!("dims {dims:?} need {expected} elements, got {}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite element at index {i}")));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![value; n] }
    }

    /// Builds a tensor from parts already known to be consistent.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {dims:?}", self.dims)));
        }
        self.dims = dims;
        Ok(self)
    }

    /// Copies channels `[start, end)` of a `[C, ...]` tensor.
    pub fn channel_slice(&self, start: usize, end: usize) -> Result<Tensor> {
        let c = *self.dims.first().ok_or_else(|| Error::shape("channel_slice on a rank-0 tensor"))?;
        if start >= end || end > c {
            return Err(Error::shape(format!("channel range {start}..{end} out of bounds for {:?}", self.dims)));
        }
        let plane: usize = self.dims[1..].iter().product();
        let mut dims = self.dims.clone();
        dims[0] = end - start;
        Ok(Tensor::from_parts(dims, self.data[start * plane..end * plane].to_vec()))
    }

    /// Stacks `[C_i, ...]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let tail = &first.dims[1..];
        let mut channels = 0;
        let mut data = Vec::new();
        for t in parts {
            if t.dims.len() != first.dims.len() || &t.dims[1..] != tail {
                return Err(Error::shape(format!("cannot concat {:?} with {:?}", first.dims, t.dims)));
            }
            channels += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        let mut dims = first.dims.clone();
        dims[0] = channels;
        Ok(Tensor::from_parts(dims, data))
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when both tensors have the same dims and every element has the
    /// same bit pattern.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.dims)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ..")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn slice_then_concat_restores() {
        let t = Tensor::new(vec![3, 2], (0..6).map(f64::from).collect()).unwrap();
        let a = t.channel_slice(0, 1).unwrap();
        let b = t.channel_slice(1, 3).unwrap();
        assert_eq!(b.data(), &[2.0, 3.0, 4.0, 5.0]);
        let joined = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert!(joined.bit_eq(&t));
    }

    #[test]
    fn slice_out_of_range() {
        let t = Tensor::zeros(&[2, 2]);
        assert!(t.channel_slice(1, 3).is_err());
        assert!(t.channel_slice(1, 1).is_err());
    }

    #[test]
    fn argmax_takes_first_of_ties() {
        let t = Tensor::new(vec![4], vec![0.1, 0.7, 0.7, 0.2]).unwrap();
        assert_eq!(t.argmax(), 1);
    }
}
