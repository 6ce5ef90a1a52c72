//! Multi-bit spatial watermark carried by the signs of the latent.
//!
//! Encoding: the bits are replicated over the `n = c·w·h` flat positions
//! (bit `i` owns `[⌊i·n/l⌋, ⌊(i+1)·n/l⌋)`), the replicated vector is
//! permuted by a ChaCha20-keyed Fisher–Yates shuffle, and the result dictates
//! the sign of every latent element. Decoding inverts the permutation and
//! takes the mean of each bit's votes.

use std::fmt;

use chacha20::cipher::{KeyIvInit, StreamCipher};
use chacha20::ChaCha20;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{sign_map, LatentTensor, Shape, SignalMap};

/// The `l`-bit message ω.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WatermarkBits(Vec<u8>);

impl WatermarkBits {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidParameter("watermark needs at least one bit".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidParameter("watermark bits must be 0 or 1".into()));
        }
        Ok(WatermarkBits(bits))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn xor(&self, other: &WatermarkBits) -> Result<WatermarkBits> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(WatermarkBits(self.0.iter().zip(&other.0).map(|(a, b)| a ^ b).collect()))
    }

    pub fn inverted(&self) -> WatermarkBits {
        WatermarkBits(self.0.iter().map(|b| 1 - b).collect())
    }

    /// Packs MSB-first into bytes; trailing pad bits are zero.
    pub fn to_hex(&self) -> String {
        let mut bytes = vec![0u8; self.0.len().div_ceil(8)];
        for (i, &b) in self.0.iter().enumerate() {
            bytes[i / 8] |= b << (7 - i % 8);
        }
        hex::encode(bytes)
    }

    pub fn from_hex(s: &str, len: usize) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Key(format!("watermark bits: {e}")))?;
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::Key(format!(
                "watermark hex holds {} bytes, {len} bits need {}",
                bytes.len(),
                len.div_ceil(8)
            )));
        }
        Self::new((0..len).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect())
    }
}

/// ChaCha20 key and 96-bit nonce driving the shuffle.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ShuffleKey {
    pub cipher_key: [u8; 32],
    pub nonce: [u8; 12],
}

impl fmt::Debug for ShuffleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ShuffleKey").finish_non_exhaustive()
    }
}

impl ShuffleKey {
    pub fn new(cipher_key: [u8; 32], nonce: [u8; 12]) -> Self {
        ShuffleKey { cipher_key, nonce }
    }
}

/// Flat boundary map between `l` bits and the `n` latent positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsampleLayout {
    bits: usize,
    shape: Shape,
}

impl UpsampleLayout {
    pub fn new(bits: usize, shape: Shape) -> Result<Self> {
        if bits == 0 || shape.is_empty() {
            return Err(Error::InvalidParameter("layout needs l ≥ 1 and a non-empty shape".into()));
        }
        if bits > shape.len() {
            return Err(Error::Capacity {
                bits,
                capacity: shape.len(),
            });
        }
        Ok(UpsampleLayout { bits, shape })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Flat positions owned by bit `i`.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        let n = self.shape.len();
        (i * n / self.bits)..((i + 1) * n / self.bits)
    }
}

/// A permutation of the flat latent positions; `apply` scatters
/// `out[k] = x[perm[k]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<u32>,
    inverse: Vec<u32>,
}

/// Little-endian 64-bit words of the ChaCha20 keystream (block counter 0).
struct KeystreamWords {
    cipher: ChaCha20,
    block: [u8; 64],
    pos: usize,
}

impl KeystreamWords {
    fn new(key: &ShuffleKey) -> Self {
        KeystreamWords {
            cipher: ChaCha20::new(&key.cipher_key.into(), &key.nonce.into()),
            block: [0; 64],
            pos: 64,
        }
    }

    fn next_u64(&mut self) -> u64 {
        if self.pos == 64 {
            self.block = [0; 64];
            self.cipher.apply_keystream(&mut self.block);
            self.pos = 0;
        }
        let word = u64::from_le_bytes(self.block[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        word
    }

    /// Uniform draw from `0..bound` by rejection of the biased tail.
    fn below(&mut self, bound: u64) -> u64 {
        let rejected = (u64::MAX % bound + 1) % bound;
        loop {
            let u = self.next_u64();
            if u <= u64::MAX - rejected {
                return u % bound;
            }
        }
    }
}

impl Permutation {
    /// Fisher–Yates over `n` positions, drawing indices from the keystream.
    pub fn from_key(key: &ShuffleKey, n: usize) -> Self {
        assert!(n <= u32::MAX as usize, "permutation too large");
        let mut words = KeystreamWords::new(key);
        let mut forward: Vec<u32> = (0..n as u32).collect();
        for i in (1..n).rev() {
            let j = words.below(i as u64 + 1) as usize;
            forward.swap(i, j);
        }
        let mut inverse = vec![0u32; n];
        for (k, &p) in forward.iter().enumerate() {
            inverse[p as usize] = k as u32;
        }
        Permutation { forward, inverse }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.forward
    }

    pub fn apply<T: Copy>(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.len());
        self.forward.iter().map(|&p| x[p as usize]).collect()
    }

    pub fn invert<T: Copy>(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.len());
        self.inverse.iter().map(|&k| x[k as usize]).collect()
    }
}

pub fn upsample(bits: &WatermarkBits, layout: &UpsampleLayout) -> Result<SignalMap> {
    if bits.len() != layout.bits {
        return Err(Error::LengthMismatch {
            expected: layout.bits,
            actual: bits.len(),
        });
    }
    let mut out = vec![0u8; layout.shape.len()];
    for (i, &b) in bits.as_slice().iter().enumerate() {
        out[layout.range(i)].fill(b);
    }
    Ok(SignalMap::from_raw(layout.shape, out))
}

/// Vote means: entry `i` is the average of the map over the positions bit
/// `i` owns.
pub fn downsample(s: &SignalMap, layout: &UpsampleLayout) -> Result<Vec<f64>> {
    if s.shape() != layout.shape {
        return Err(Error::shape_mismatch(layout.shape, s.shape()));
    }
    let bits = s.bits();
    Ok((0..layout.bits)
        .map(|i| {
            let r = layout.range(i);
            let len = r.len() as f64;
            bits[r].iter().map(|&b| b as f64).sum::<f64>() / len
        })
        .collect())
}

pub fn shuffle(s: &SignalMap, key: &ShuffleKey) -> SignalMap {
    let perm = Permutation::from_key(key, s.shape().len());
    shuffle_with(s, &perm)
}

pub fn unshuffle(s: &SignalMap, key: &ShuffleKey) -> SignalMap {
    let perm = Permutation::from_key(key, s.shape().len());
    unshuffle_with(s, &perm)
}

pub fn shuffle_with(s: &SignalMap, perm: &Permutation) -> SignalMap {
    SignalMap::from_raw(s.shape(), perm.apply(s.bits()))
}

pub fn unshuffle_with(s: &SignalMap, perm: &Permutation) -> SignalMap {
    SignalMap::from_raw(s.shape(), perm.invert(s.bits()))
}

/// `|z| · (2s − 1)`: keeps magnitudes, imposes signs.
pub fn inject_spatial(z: &LatentTensor, s: &SignalMap) -> Result<LatentTensor> {
    if z.shape() != s.shape() {
        return Err(Error::shape_mismatch(z.shape(), s.shape()));
    }
    let data = z
        .data()
        .iter()
        .zip(s.bits())
        .map(|(&v, &b)| if b == 1 { v.abs() } else { -v.abs() })
        .collect();
    Ok(LatentTensor::from_raw(z.shape(), data))
}

/// Layout plus cached permutation for one key: everything needed to move
/// between bits and signal maps. Immutable, so safe to share across threads.
#[derive(Debug, Clone)]
pub struct SpatialCodec {
    layout: UpsampleLayout,
    perm: Permutation,
}

impl SpatialCodec {
    pub fn new(layout: UpsampleLayout, key: &ShuffleKey) -> Self {
        SpatialCodec {
            layout,
            perm: Permutation::from_key(key, layout.shape.len()),
        }
    }

    pub fn layout(&self) -> &UpsampleLayout {
        &self.layout
    }

    pub fn permutation(&self) -> &Permutation {
        &self.perm
    }

    /// `Shuffle(Up-Sample(ω))`.
    pub fn encode(&self, bits: &WatermarkBits) -> Result<SignalMap> {
        Ok(shuffle_with(&upsample(bits, &self.layout)?, &self.perm))
    }

    /// `Down-Sample(Shuffle⁻¹(s̃))`.
    pub fn decode(&self, s: &SignalMap) -> Result<Vec<f64>> {
        if s.shape() != self.layout.shape {
            return Err(Error::shape_mismatch(self.layout.shape, s.shape()));
        }
        downsample(&unshuffle_with(s, &self.perm), &self.layout)
    }

    /// Sign map of the latent and the vote means it decodes to.
    pub fn extract_bits(&self, z: &LatentTensor) -> Result<(Vec<f64>, SignalMap)> {
        let s = sign_map(z);
        Ok((self.decode(&s)?, s))
    }
}

/// `r_s = −‖ω̃ − ω‖²`.
pub fn score_spatial(estimate: &[f64], bits: &WatermarkBits) -> Result<f64> {
    if estimate.len() != bits.len() {
        return Err(Error::LengthMismatch {
            expected: bits.len(),
            actual: estimate.len(),
        });
    }
    Ok(-estimate
        .iter()
        .zip(bits.as_slice())
        .map(|(e, &b)| (e - b as f64).powi(2))
        .sum::<f64>())
}
