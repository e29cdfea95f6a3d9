//! Channel-major image tensors and the flat-vector helpers shared by the
//! solvers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(channels, height, width)`; complex images use two channels (re, im).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape { channels, height, width }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Dense real tensor, row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Rejects length mismatches and non-finite entries.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for data produced by finite arithmetic on
    /// finite inputs. Length is still checked.
    pub(crate) fn from_vec_unchecked(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), shape.len(), "tensor length does not match {shape}");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.len()] }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        assert!(value.is_finite());
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn expect_shape(&self, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch { expected, got: self.shape });
        }
        Ok(())
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                got: self.data.len(),
            });
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        other.expect_shape(self.shape)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_vec_unchecked(self.shape, data))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        other.expect_shape(self.shape)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_vec_unchecked(self.shape, data))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor::from_vec_unchecked(self.shape, self.data.iter().map(|v| v * s).collect())
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Tensor) -> Result<()> {
        other.expect_shape(self.shape)?;
        vec_axpy(&mut self.data, a, &other.data);
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec_unchecked(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        other.expect_shape(self.shape)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Pixelwise modulus of a two-channel complex image; other channel
    /// counts pass through unchanged.
    pub fn magnitude(&self) -> Tensor {
        if self.shape.channels != 2 {
            return self.clone();
        }
        let (re, im) = (self.channel(0), self.channel(1));
        let data = re.iter().zip(im).map(|(a, b)| a.hypot(*b)).collect();
        Tensor::from_vec_unchecked(self.shape.with_channels(1), data)
    }

    /// Stacks `self` and `other` along the channel axis.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.height != other.shape.height || self.shape.width != other.shape.width {
            return Err(Error::ShapeMismatch {
                expected: other.shape.with_channels(self.shape.channels),
                got: self.shape,
            });
        }
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor::from_vec_unchecked(
            self.shape.with_channels(self.shape.channels + other.shape.channels),
            data,
        ))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn vec_axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn vec_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn vec_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_length() {
        let s = Shape::new(1, 2, 2);
        assert!(matches!(
            Tensor::new(s, vec![0.0, 1.0, f64::NAN, 2.0]),
            Err(Error::NonFinite { index: 2 })
        ));
        assert!(matches!(
            Tensor::new(s, vec![0.0; 3]),
            Err(Error::LengthMismatch { expected: 4, got: 3 })
        ));
        assert!(Tensor::new(s, vec![f64::INFINITY; 4]).is_err());
    }

    #[test]
    fn magnitude_of_complex_pair() {
        let t = Tensor::new(Shape::new(2, 1, 2), vec![3.0, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(t.magnitude().data(), &[5.0, 1.0]);
    }

    #[test]
    fn arithmetic_checks_shapes() {
        let a = Tensor::zeros(Shape::new(1, 2, 2));
        let b = Tensor::zeros(Shape::new(1, 4, 1));
        assert!(a.add(&b).is_err());
        assert!(a.dot(&b).is_err());
    }
}
