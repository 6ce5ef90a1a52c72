//! Latent tensors, signal maps and seeded Gaussian sampling.
//!
//! Both containers are laid out row-major as `(channel, i, j)` with
//! `i < width` and `j < height`, matching the `c × w × h` convention used
//! throughout the codec.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
}

impl Shape {
    /// The default latent space of a 512×512 latent diffusion model.
    pub const DEFAULT: Shape = Shape {
        channels: 4,
        width: 64,
        height: 64,
    };

    pub fn new(channels: usize, width: usize, height: usize) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(Error::InvalidShape(vec![channels, width, height]));
        }
        Ok(Shape {
            channels,
            width,
            height,
        })
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [c, w, h] => Shape::new(c, w, h),
            _ => Err(Error::InvalidShape(dims.to_vec())),
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.width * self.height
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.width, self.height]
    }

    #[inline]
    pub fn index(&self, channel: usize, i: usize, j: usize) -> usize {
        (channel * self.width + i) * self.height + j
    }
}

impl Default for Shape {
    fn default() -> Self {
        Shape::DEFAULT
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.width, self.height)
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims = s
            .split([',', 'x'])
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::InvalidParameter(format!("cannot parse shape `{s}`")))?;
        Shape::from_dims(&dims)
    }
}

/// A real-valued `c × w × h` latent, e.g. the initial noise map of a
/// diffusion sampler or an estimate of it recovered by inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl LatentTensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidShape(shape.dims().to_vec()));
        }
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(LatentTensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        LatentTensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub(crate) fn from_raw(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        LatentTensor { shape, data }
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

    pub fn get(&self, channel: usize, i: usize, j: usize) -> f32 {
        self.data[self.shape.index(channel, i, j)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        LatentTensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn abs(&self) -> Self {
        self.map(f32::abs)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }
}

/// A binary `c × w × h` map; one bit per latent element.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignalMap {
    shape: Shape,
    bits: Vec<u8>,
}

impl SignalMap {
    /// Builds a map from 0/1 bytes; any other value is rejected.
    pub fn new(shape: Shape, bits: Vec<u8>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidShape(shape.dims().to_vec()));
        }
        if bits.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                actual: bits.len(),
            });
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidParameter(
                "signal map elements must be 0 or 1".into(),
            ));
        }
        Ok(SignalMap { shape, bits })
    }

    pub(crate) fn from_raw(shape: Shape, bits: Vec<u8>) -> Self {
        debug_assert_eq!(shape.len(), bits.len());
        SignalMap { shape, bits }
    }

    pub fn zeros(shape: Shape) -> Self {
        SignalMap {
            shape,
            bits: vec![0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<u8> {
        self.bits
    }

    pub fn get(&self, channel: usize, i: usize, j: usize) -> u8 {
        self.bits[self.shape.index(channel, i, j)]
    }

    pub fn ones_fraction(&self) -> f64 {
        self.bits.iter().map(|&b| b as usize).sum::<usize>() as f64 / self.bits.len() as f64
    }

    /// Number of positions where the two maps disagree.
    pub fn hamming(&self, other: &SignalMap) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }

    /// The map as reals in `{0.0, 1.0}`, the restorer's input encoding.
    pub fn to_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    pub fn xor(&self, other: &SignalMap) -> Result<SignalMap> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch(self.shape, other.shape));
        }
        Ok(SignalMap {
            shape: self.shape,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a ^ b).collect(),
        })
    }
}

/// Draws an i.i.d. standard normal latent, deterministic in `seed`.
pub fn sample_gaussian(shape: Shape, seed: u64) -> Result<LatentTensor> {
    if shape.is_empty() {
        return Err(Error::InvalidShape(shape.dims().to_vec()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok(sample_gaussian_with(shape, &mut rng))
}

pub(crate) fn sample_gaussian_with<R: rand::Rng + ?Sized>(shape: Shape, rng: &mut R) -> LatentTensor {
    let data = (0..shape.len())
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect();
    LatentTensor { shape, data }
}

pub(crate) fn random_signal_with<R: rand::Rng + ?Sized>(shape: Shape, rng: &mut R) -> SignalMap {
    SignalMap {
        shape,
        bits: (0..shape.len()).map(|_| rng.gen::<bool>() as u8).collect(),
    }
}

/// Sign pattern of a latent: 1 for strictly positive elements, 0 otherwise.
pub fn sign_map(z: &LatentTensor) -> SignalMap {
    SignalMap {
        shape: z.shape,
        bits: z.data.iter().map(|&v| (v > 0.0) as u8).collect(),
    }
}
