//! Dense three-axis raster used throughout the crate.
//!
//! Layout is channel-major and row-major within a channel: entry `(c, y, x)`
//! lives at `data[(c * height + y) * width + x]`. Images are `C×H×W`; the same
//! type also carries convolution kernels (`out×in×k²`), style vectors
//! (`1×1×D`) and scalars (`1×1×1`).

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Axis, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1)
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
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

/// A `C×H×W` image.
pub type ImageTensor = Tensor;

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        f.write_str(")")
    }
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::filled(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                format!("{} entries for {shape}", shape.len()),
                format!("{} entries", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor { shape, data }
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor { shape, data }
    }

    /// Entries drawn i.i.d. from `U[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| lo + (hi - lo) * rng.random::<f64>())
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Byte-level equality, distinguishing `0.0` from `-0.0` and NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn expect_shape(&self, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(expected, self.shape));
        }
        Ok(())
    }

    /// Fails unless height and width are both divisible by `divisor`.
    pub fn expect_divisible(&self, divisor: usize) -> Result<()> {
        if self.shape.height == 0 || !self.shape.height.is_multiple_of(divisor) {
            return Err(Error::Dimension {
                axis: Axis::Height,
                size: self.shape.height,
                divisor,
            });
        }
        if self.shape.width == 0 || !self.shape.width.is_multiple_of(divisor) {
            return Err(Error::Dimension {
                axis: Axis::Width,
                size: self.shape.width,
                divisor,
            });
        }
        Ok(())
    }

    /// Stacks tensors with identical spatial size along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.height() != h || p.width() != w {
                return Err(Error::shape(format!("_×{h}×{w}"), p.shape));
            }
            channels += p.channels();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: Shape::new(channels, h, w),
            data,
        })
    }

    /// Channels `start..start + count`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Tensor> {
        if start + count > self.channels() {
            return Err(Error::Argument(format!(
                "channel slice {start}..{} out of range for {}",
                start + count,
                self.shape
            )));
        }
        let p = self.shape.plane();
        Ok(Tensor {
            shape: Shape::new(count, self.height(), self.width()),
            data: self.data[start * p..(start + count) * p].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_channel_major() {
        let t = Tensor::from_fn(Shape::new(2, 2, 3), |c, y, x| (c * 100 + y * 10 + x) as f64);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[4], 11.0);
        assert_eq!(t.data()[6], 100.0);
        assert_eq!(t.at(1, 1, 2), 112.0);
    }

    #[test]
    fn divisibility_names_axis() {
        let t = Tensor::zeros(Shape::new(1, 4, 6));
        match t.expect_divisible(4) {
            Err(Error::Dimension { axis, size, .. }) => {
                assert_eq!(axis, Axis::Width);
                assert_eq!(size, 6);
            }
            other => panic!("unexpected {other:?}"),
        }
        let t = Tensor::zeros(Shape::new(1, 3, 4));
        assert!(matches!(
            t.expect_divisible(2),
            Err(Error::Dimension {
                axis: Axis::Height,
                ..
            })
        ));
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::filled(Shape::new(1, 2, 2), 1.0);
        let b = Tensor::filled(Shape::new(2, 2, 2), 2.0);
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), Shape::new(3, 2, 2));
        assert_eq!(c.slice_channels(1, 2).unwrap(), b);
        assert!(c.slice_channels(2, 2).is_err());
    }
}
