//! Secret watermark key material and its JSON key file.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Shape;
use crate::spatial::{ShuffleKey, UpsampleLayout, WatermarkBits};

pub const KEY_VERSION: u32 = 1;
pub const DEFAULT_BITS: usize = 256;
pub const DEFAULT_RING_RADIUS: u32 = 4;

/// Everything needed to embed and detect one model's watermark.
#[derive(Clone, PartialEq, Eq)]
pub struct WatermarkKey {
    pub bits: WatermarkBits,
    pub shuffle: ShuffleKey,
    pub shape: Shape,
    pub ring_radius: u32,
    pub freq_seed: u64,
}

impl std::fmt::Debug for WatermarkKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WatermarkKey")
            .field("l", &self.bits.len())
            .field("shape", &self.shape)
            .field("ring_radius", &self.ring_radius)
            .finish_non_exhaustive()
    }
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    version: u32,
    l: usize,
    latent_shape: [usize; 3],
    cipher_key_hex: String,
    nonce_hex: String,
    watermark_bits_hex: String,
    ring_radius: u32,
    freq_seed: u64,
}

fn hex_array<const N: usize>(s: &str, what: &str) -> Result<[u8; N]> {
    let bytes = hex::decode(s).map_err(|e| Error::Key(format!("{what}: {e}")))?;
    bytes
        .try_into()
        .map_err(|b: Vec<u8>| Error::Key(format!("{what}: expected {N} bytes, got {}", b.len())))
}

impl WatermarkKey {
    /// Fresh key material, deterministic in `seed`.
    pub fn generate(l: usize, shape: Shape, ring_radius: u32, seed: u64) -> Result<Self> {
        UpsampleLayout::new(l, shape)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let bits = WatermarkBits::new((0..l).map(|_| rng.gen::<bool>() as u8).collect())?;
        let shuffle = ShuffleKey::new(rng.gen(), rng.gen());
        Ok(WatermarkKey {
            bits,
            shuffle,
            shape,
            ring_radius,
            freq_seed: rng.gen(),
        })
    }

    pub fn layout(&self) -> Result<UpsampleLayout> {
        UpsampleLayout::new(self.bits.len(), self.shape)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = KeyFile {
            version: KEY_VERSION,
            l: self.bits.len(),
            latent_shape: self.shape.dims(),
            cipher_key_hex: hex::encode(self.shuffle.cipher_key),
            nonce_hex: hex::encode(self.shuffle.nonce),
            watermark_bits_hex: self.bits.to_hex(),
            ring_radius: self.ring_radius,
            freq_seed: self.freq_seed,
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: KeyFile = serde_json::from_str(text)?;
        if file.version != KEY_VERSION {
            return Err(Error::Key(format!("unsupported key version {}", file.version)));
        }
        let shape = Shape::from_dims(&file.latent_shape)?;
        let key = WatermarkKey {
            bits: WatermarkBits::from_hex(&file.watermark_bits_hex, file.l)?,
            shuffle: ShuffleKey::new(
                hex_array(&file.cipher_key_hex, "cipher_key_hex")?,
                hex_array(&file.nonce_hex, "nonce_hex")?,
            ),
            shape,
            ring_radius: file.ring_radius,
            freq_seed: file.freq_seed,
        };
        key.layout()?;
        Ok(key)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_determinism() {
        let a = WatermarkKey::generate(DEFAULT_BITS, Shape::DEFAULT, DEFAULT_RING_RADIUS, 5).unwrap();
        let b = WatermarkKey::generate(DEFAULT_BITS, Shape::DEFAULT, DEFAULT_RING_RADIUS, 5).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_ne!(a, WatermarkKey::generate(256, Shape::DEFAULT, 4, 6).unwrap());
        let v: serde_json::Value = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        assert_eq!(v["l"], 256);
        assert_eq!(v["latent_shape"], serde_json::json!([4, 64, 64]));
        assert_eq!(v["ring_radius"], 4);
        assert_eq!(v["cipher_key_hex"].as_str().unwrap().len(), 64);
        assert_eq!(v["nonce_hex"].as_str().unwrap().len(), 24);
    }

    #[test]
    fn capacity_is_enforced() {
        assert!(matches!(
            WatermarkKey::generate(1 << 15, Shape::DEFAULT, 4, 0),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let k = WatermarkKey::generate(100, Shape::new(2, 8, 8).unwrap(), 2, 1).unwrap();
        assert_eq!(WatermarkKey::from_json(&k.to_json().unwrap()).unwrap(), k);
        let text = k.to_json().unwrap().replace("\"version\": 1", "\"version\": 7");
        assert!(WatermarkKey::from_json(&text).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&k.to_json().unwrap()).unwrap();
        v["nonce_hex"] = "00ff".into();
        assert!(WatermarkKey::from_json(&v.to_string()).is_err());
        v = serde_json::from_str(&k.to_json().unwrap()).unwrap();
        v["l"] = 1000.into();
        assert!(WatermarkKey::from_json(&v.to_string()).is_err());
        assert!(!format!("{k:?}").contains(&hex::encode(k.shuffle.cipher_key)));
    }
}
