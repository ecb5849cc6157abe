//! Dense real tensors and bit-packed binary spike tensors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

/// Row-major dense `f64` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(alloc::format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(alloc::format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Binary tensor indexed `[t, c, y, x]` with dims `(T, C, H, W)`.
///
/// Bits are stored row-major, least-significant bit first inside each `u64`
/// word, so the little-endian byte image of `words` is the packed payload of
/// the `SPK1` dump format.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SpikeTensor {
    dims: [usize; 4],
    words: Vec<u64>,
}

impl SpikeTensor {
    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(shape_err(alloc::format!("spike tensor dims must be positive, got {dims:?}")));
        }
        let n: usize = dims.iter().product();
        Ok(Self { dims, words: vec![0; n.div_ceil(64)] })
    }

    /// Build from `{0,1}` values; anything else is rejected.
    pub fn from_values(dims: [usize; 4], values: &[f64]) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        if values.len() != t.len() {
            return Err(shape_err(alloc::format!(
                "spike tensor {dims:?} needs {} values, got {}",
                t.len(),
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if v == 1.0 {
                t.set_flat(i, true);
            } else if v != 0.0 {
                return Err(Error::InvalidInput(alloc::format!(
                    "spike tensor value {v} at flat index {i} is not binary"
                )));
            }
        }
        Ok(t)
    }

    /// Rebuild from packed words (e.g. read from disk). Trailing pad bits must be zero.
    pub fn from_words(dims: [usize; 4], words: Vec<u64>) -> Result<Self> {
        let t = Self::zeros(dims)?;
        if words.len() != t.words.len() {
            return Err(shape_err("packed payload length does not match dims"));
        }
        let n = t.len();
        if n % 64 != 0 {
            let last = *words.last().unwrap_or(&0);
            if last >> (n % 64) != 0 {
                return Err(Error::InvalidInput("non-zero padding bits in packed spike payload".into()));
            }
        }
        Ok(Self { dims, words })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, hh, ww] = self.dims;
        ((t * cc + c) * hh + y) * ww + x
    }

    #[inline]
    pub fn get_flat(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set_flat(&mut self, i: usize, v: bool) {
        let w = &mut self.words[i / 64];
        if v {
            *w |= 1 << (i % 64);
        } else {
            *w &= !(1 << (i % 64));
        }
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> bool {
        self.get_flat(self.index(t, c, y, x))
    }

    #[inline]
    pub fn set(&mut self, t: usize, c: usize, y: usize, x: usize, v: bool) {
        let i = self.index(t, c, y, x);
        self.set_flat(i, v)
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn firing_rate(&self) -> f64 {
        self.count_ones() as f64 / self.len() as f64
    }

    pub fn to_values(&self) -> Vec<f64> {
        (0..self.len()).map(|i| if self.get_flat(i) { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        let d = self.dims;
        Tensor { shape: d.to_vec(), data: self.to_values() }
    }

    fn zip_words(&self, other: &Self, f: impl Fn(u64, u64) -> u64) -> Result<Self> {
        if self.dims != other.dims {
            return Err(shape_err(alloc::format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        let words = self.words.iter().zip(&other.words).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { dims: self.dims, words })
    }

    /// Element-wise product of two binary tensors.
    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip_words(other, |a, b| a & b)
    }

    /// `self - other` where `other ⊆ self`; equals `self AND NOT other`.
    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.zip_words(other, |a, b| a & !b)
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip_words(other, |a, b| a | b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spike_tensor_rejects_non_binary_and_zero_dims() {
        assert!(SpikeTensor::zeros([0, 2, 2, 2]).is_err());
        assert!(SpikeTensor::from_values([1, 1, 1, 2], &[1.0, 0.5]).is_err());
        let t = SpikeTensor::from_values([1, 1, 1, 3], &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(t.count_ones(), 2);
        assert_eq!(t.to_values(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn packed_padding_must_be_zero() {
        assert!(SpikeTensor::from_words([1, 1, 1, 3], vec![0b1000]).is_err());
        assert!(SpikeTensor::from_words([1, 1, 1, 3], vec![0b101]).is_ok());
    }

    #[test]
    fn indexing_is_row_major() {
        let mut t = SpikeTensor::zeros([2, 2, 3, 4]).unwrap();
        t.set(1, 0, 2, 3, true);
        assert_eq!(t.index(1, 0, 2, 3), 24 + 11);
        assert!(t.get_flat(35));
    }
}
