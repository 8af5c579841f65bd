//! Dense `(channels, height, width)` latent tensors.
//!
//! Values are `f32` in row-major `(c, h, w)` order. Tensors are treated as
//! immutable values: every operation returns a fresh tensor, and every public
//! constructor rejects non-finite data.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::SeededRng;

/// Magic prefix of the raw tensor file format.
pub const ASGT_MAGIC: &[u8; 4] = b"ASGT";

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape([usize; 3]),
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape, right: Shape },
    #[error("data length {got} does not match shape {shape} (expected {expected})")]
    LengthMismatch { shape: Shape, expected: usize, got: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("statistics of an empty tensor")]
    Empty,
    #[error("malformed ASGT data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(TensorError::InvalidShape([channels, height, width]));
        }
        Ok(Self {
            channels,
            height,
            width,
        })
    }

    pub fn from_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims[0], dims[1], dims[2])
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn with_spatial(&self, height: usize, width: usize) -> Result<Self> {
        Self::new(self.channels, height, width)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.channels, self.height, self.width)
    }
}

/// Population statistics over all elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub variance: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &head)
            .finish()
    }
}

fn check_finite(data: &[f32], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected: shape.len(),
                got: data.len(),
            });
        }
        check_finite(&data, "from_vec")?;
        Ok(Self { shape, data })
    }

    pub fn full(shape: Shape, value: f32) -> Result<Self> {
        Self::from_vec(shape, vec![value; shape.len()])
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn ones(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![1.0; shape.len()],
        }
    }

    /// I.i.d. standard normal tensor; advances `rng` by exactly `c·h·w` draws.
    pub fn randn(dims: [usize; 3], rng: &mut SeededRng) -> Result<Self> {
        let shape = Shape::from_dims(dims)?;
        let mut data = vec![0.0f32; shape.len()];
        rng.fill_standard_normal(&mut data);
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    pub fn ensure_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }

    /// Elementwise `a·x + b·y`.
    ///
    /// A zero coefficient drops its term entirely, so `(1, 0)` and `(0, 1)`
    /// return the selected input bit for bit.
    pub fn axpby(a: f32, x: &Tensor, b: f32, y: &Tensor) -> Result<Tensor> {
        x.ensure_same_shape(y)?;
        let data: Vec<f32> = match (a == 0.0, b == 0.0) {
            (true, true) => vec![0.0; x.len()],
            (false, true) => x.data.iter().map(|&v| a * v).collect(),
            (true, false) => y.data.iter().map(|&v| b * v).collect(),
            (false, false) => x.data.iter().zip(&y.data).map(|(&u, &v)| a * u + b * v).collect(),
        };
        check_finite(&data, "axpby")?;
        Ok(Tensor { shape: x.shape, data })
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.ensure_same_shape(other)?;
        let data: Vec<f32> = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        check_finite(&data, op)?;
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        let data: Vec<f32> = self.data.iter().map(|&a| f(a)).collect();
        check_finite(&data, op)?;
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: f32) -> Result<Tensor> {
        self.map("scale", |a| a * k)
    }

    pub fn stats(&self) -> Result<Stats> {
        if self.data.is_empty() {
            return Err(TensorError::Empty);
        }
        let n = self.data.len() as f64;
        let mut sum = 0.0f64;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in &self.data {
            let v = v as f64;
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        let mean = sum / n;
        let variance = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        Ok(Stats {
            mean,
            variance,
            min,
            max,
        })
    }

    /// Copies the `(height, width)` window at `(y0, x0)`, all channels.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Tensor> {
        let shape = self.shape.with_spatial(height, width)?;
        if y0 + height > self.shape.height || x0 + width > self.shape.width {
            return Err(TensorError::ShapeMismatch {
                left: self.shape,
                right: shape,
            });
        }
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..self.shape.channels {
            for y in y0..y0 + height {
                let start = self.index(c, y, x0);
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Ok(Tensor { shape, data })
    }

    pub fn to_asgt_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(ASGT_MAGIC);
        for d in self.shape.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_asgt_bytes(bytes: &[u8]) -> Result<Tensor> {
        if bytes.len() < 16 || &bytes[..4] != ASGT_MAGIC {
            return Err(TensorError::Format("missing ASGT header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let shape = Shape::new(dim(0), dim(1), dim(2))?;
        let body = &bytes[16..];
        if body.len() != 4 * shape.len() {
            return Err(TensorError::Format(format!(
                "payload has {} bytes, shape {} needs {}",
                body.len(),
                shape,
                4 * shape.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(shape, data)
    }

    pub fn write_asgt(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_asgt_bytes())?;
        Ok(())
    }

    pub fn read_asgt(path: impl AsRef<Path>) -> Result<Tensor> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_asgt_bytes(&bytes)
    }

    /// SHA-256 of the ASGT encoding, hex.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_asgt_bytes()))
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }
}

/// Elementwise `a·x + b·y` over two same-shape tensors.
pub fn axpy_like(a: f32, x: &Tensor, b: f32, y: &Tensor) -> Result<Tensor> {
    Tensor::axpby(a, x, b, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(values: &[f32]) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, values.len()).unwrap(), values.to_vec()).unwrap()
    }

    #[test]
    fn randn_is_deterministic() {
        let a = Tensor::randn([1, 1, 1], &mut SeededRng::new(3)).unwrap();
        let b = Tensor::randn([1, 1, 1], &mut SeededRng::new(3)).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn randn_moments() {
        let x = Tensor::randn([1, 100, 1000], &mut SeededRng::new(11)).unwrap();
        let s = x.stats().unwrap();
        assert!(s.mean.abs() < 0.02, "mean {}", s.mean);
        assert!(s.variance > 0.97 && s.variance < 1.03, "var {}", s.variance);
    }

    #[test]
    fn randn_rejects_zero_dim() {
        assert!(matches!(
            Tensor::randn([0, 4, 4], &mut SeededRng::new(0)),
            Err(TensorError::InvalidShape(_))
        ));
    }

    #[test]
    fn axpby_identities_and_value() {
        let mut rng = SeededRng::new(5);
        let x = Tensor::randn([2, 3, 3], &mut rng).unwrap();
        let y = Tensor::randn([2, 3, 3], &mut rng).unwrap();
        assert!(axpy_like(1.0, &x, 0.0, &y).unwrap().bitwise_eq(&x));
        assert!(axpy_like(0.0, &x, 1.0, &y).unwrap().bitwise_eq(&y));
        let r = axpy_like(0.5, &t1(&[2.0]), 0.5, &t1(&[4.0])).unwrap();
        assert_eq!(r.data(), &[3.0]);
    }

    #[test]
    fn axpby_shape_mismatch() {
        assert!(matches!(
            axpy_like(1.0, &t1(&[1.0]), 1.0, &t1(&[1.0, 2.0])),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn stats_examples() {
        let s = Tensor::full(Shape::new(1, 2, 2).unwrap(), 3.5)
            .unwrap()
            .stats()
            .unwrap();
        assert_eq!((s.mean, s.variance, s.min, s.max), (3.5, 0.0, 3.5, 3.5));
        let s = t1(&[0.0, 2.0]).stats().unwrap();
        assert_eq!((s.mean, s.variance), (1.0, 1.0));
        let s = t1(&[-1.0, 1.0]).stats().unwrap();
        assert_eq!((s.min, s.max), (-1.0, 1.0));
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(matches!(
            Tensor::from_vec(Shape::new(1, 1, 2).unwrap(), vec![0.0, f32::NAN]),
            Err(TensorError::NonFinite(_))
        ));
    }

    #[test]
    fn asgt_layout() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2).unwrap(), vec![1.0, -2.0]).unwrap();
        let b = x.to_asgt_bytes();
        assert_eq!(&b[..4], b"ASGT");
        assert_eq!(&b[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert!(Tensor::from_asgt_bytes(&b).unwrap().bitwise_eq(&x));
        assert!(Tensor::from_asgt_bytes(&b[..18]).is_err());
    }

    #[test]
    fn crop_window() {
        let x = Tensor::from_vec(Shape::new(1, 3, 3).unwrap(), (0..9).map(|v| v as f32).collect()).unwrap();
        assert_eq!(x.crop(1, 1, 2, 2).unwrap().data(), &[4.0, 5.0, 7.0, 8.0]);
        assert!(x.crop(2, 2, 2, 2).is_err());
    }
}
