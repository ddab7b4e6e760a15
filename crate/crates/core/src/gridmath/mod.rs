//! Dense-array substrate: 2-D rasters, batched 4-D tensors, deterministic
//! reductions, convolution with exact backward passes, and a seedable
//! counter-based random source.
//!
//! Everything here is 64-bit, single-threaded per call, and accumulates in a
//! fixed documented order so reruns are bit-identical.

pub mod conv;
pub mod rng;

use crate::error::{Error, Result};

/// Which space a raster's pixel values live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// SAR amplitude, strictly positive.
    Amplitude,
    /// Natural log of amplitude.
    Log,
    /// Gaussianized space after the log + power transform.
    ZDomain,
}

/// Dense row-major 2-D grid of f64, tagged with the domain its values live in.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    height: usize,
    width: usize,
    domain: Domain,
    data: Vec<f64>,
}

impl Grid2 {
    pub fn new(height: usize, width: usize, domain: Domain, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, domain, data })
    }

    pub fn filled(height: usize, width: usize, domain: Domain, value: f64) -> Result<Self> {
        Self::new(height, width, domain, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same shape and data, different domain tag.
    pub fn retag(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    /// Element-wise map into a (possibly different) domain.
    pub fn map<F: Fn(f64) -> f64>(&self, domain: Domain, f: F) -> Self {
        Self {
            height: self.height,
            width: self.width,
            domain,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn require_domain(&self, expected: Domain, what: &str) -> Result<()> {
        if self.domain != expected {
            return Err(Error::Domain(format!(
                "{what}: expected {expected:?} raster, got {:?}",
                self.domain
            )));
        }
        Ok(())
    }
}

/// Batched activation tensor, shape (batch, channels, height, width), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, ch, h, w] = self.shape;
        self.data[((b * ch + c) * h + y) * w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let [_, ch, h, w] = self.shape;
        &mut self.data[((b * ch + c) * h + y) * w + x]
    }

    /// One (batch, channel) plane as a contiguous slice.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let [_, ch, h, w] = self.shape;
        let start = (b * ch + c) * h * w;
        &self.data[start..start + h * w]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let [_, ch, h, w] = self.shape;
        let start = (b * ch + c) * h * w;
        &mut self.data[start..start + h * w]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Sum in index order, sequential binary accumulation. Bit-identical reruns.
pub fn sum(values: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in values {
        acc += v;
    }
    acc
}

pub fn mean(values: &[f64]) -> f64 {
    sum(values) / values.len() as f64
}

/// Population (biased) variance in a fixed two-pass order.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    let mut acc = 0.0;
    for &v in values {
        let d = v - m;
        acc += d * d;
    }
    acc / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shape_mismatch_rejected() {
        assert!(Grid2::new(4, 4, Domain::Amplitude, vec![0.0; 15]).is_err());
        assert!(Grid2::new(0, 4, Domain::Amplitude, vec![]).is_err());
    }

    #[test]
    fn grid_indexing_row_major() {
        let g = Grid2::new(2, 3, Domain::Log, (0..6).map(|i| i as f64).collect()).unwrap();
        assert_eq!(g.get(0, 2), 2.0);
        assert_eq!(g.get(1, 0), 3.0);
        assert_eq!(g.row(1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn tensor_plane_layout() {
        let t = Tensor4::new([2, 2, 2, 2], (0..16).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.plane(1, 0), &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!(t.at(1, 1, 0, 1), 13.0);
    }

    #[test]
    fn reductions_deterministic() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.7).sin()).collect();
        let a = sum(&v);
        let b = sum(&v);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn variance_of_constant_is_zero() {
        assert_eq!(variance(&[3.5; 100]), 0.0);
    }
}
