//! End-to-end embedding and detection for one watermark key.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::freq::{build_ring_pattern, inject_freq, score_freq, FreqPattern};
use crate::fusion::FuserModel;
use crate::key::WatermarkKey;
use crate::latent::{sample_gaussian_with, sign_map, LatentTensor, Shape, SignalMap};
use crate::restorer::{PositiveSource, RestorerModel};
use crate::spatial::{inject_spatial, score_spatial, SpatialCodec, WatermarkBits};
use crate::stats::{matched_bits, ThresholdPolicy};

/// Codec state derived from a key: the cached permutation, the model
/// signal map `s` and the ring pattern built from it.
#[derive(Debug, Clone)]
pub struct Watermarker {
    key: WatermarkKey,
    codec: SpatialCodec,
    signal: SignalMap,
    pattern: FreqPattern,
}

impl Watermarker {
    pub fn new(key: &WatermarkKey) -> Result<Self> {
        let codec = SpatialCodec::new(key.layout()?, &key.shuffle);
        let signal = codec.encode(&key.bits)?;
        let pattern = build_ring_pattern(key.shape, &signal, key.freq_seed, key.ring_radius)?;
        Ok(Watermarker {
            key: key.clone(),
            codec,
            signal,
            pattern,
        })
    }

    pub fn key(&self) -> &WatermarkKey {
        &self.key
    }

    pub fn bits(&self) -> &WatermarkBits {
        &self.key.bits
    }

    pub fn shape(&self) -> Shape {
        self.key.shape
    }

    pub fn codec(&self) -> &SpatialCodec {
        &self.codec
    }

    pub fn signal(&self) -> &SignalMap {
        &self.signal
    }

    pub fn pattern(&self) -> &FreqPattern {
        &self.pattern
    }

    fn check(&self, z: &LatentTensor) -> Result<()> {
        if z.shape() != self.key.shape {
            return Err(Error::shape_mismatch(self.key.shape, z.shape()));
        }
        Ok(())
    }

    /// Spatial then frequency injection of the key's watermark.
    pub fn embed(&self, z: &LatentTensor) -> Result<LatentTensor> {
        self.check(z)?;
        inject_freq(&inject_spatial(z, &self.signal)?, &self.pattern)
    }

    /// Dual injection carrying `bits` (e.g. a per-user watermark) in the
    /// spatial domain; the ring pattern stays the key's.
    pub fn embed_bits(&self, z: &LatentTensor, bits: &WatermarkBits) -> Result<LatentTensor> {
        self.check(z)?;
        inject_freq(&inject_spatial(z, &self.codec.encode(bits)?)?, &self.pattern)
    }

    pub fn embed_spatial_only(&self, z: &LatentTensor) -> Result<LatentTensor> {
        self.check(z)?;
        inject_spatial(z, &self.signal)
    }

    pub fn embed_freq_only(&self, z: &LatentTensor) -> Result<LatentTensor> {
        self.check(z)?;
        inject_freq(z, &self.pattern)
    }

    /// Vote means read from a latent, optionally through a restorer.
    pub fn read_bits(&self, z: &LatentTensor, gnr: Option<&RestorerModel>) -> Result<Vec<f64>> {
        self.check(z)?;
        let mut s = sign_map(z);
        if let Some(gnr) = gnr {
            s = gnr.restore(&s)?;
        }
        self.codec.decode(&s)
    }

    pub fn detect(
        &self,
        z: &LatentTensor,
        gnr: Option<&RestorerModel>,
        fuser: Option<&FuserModel>,
        policy: &ThresholdPolicy,
    ) -> Result<DetectionResult> {
        let estimate = self.read_bits(z, gnr)?;
        self.finish(z, estimate, fuser, policy)
    }

    pub(crate) fn finish(
        &self,
        z: &LatentTensor,
        estimate: Vec<f64>,
        fuser: Option<&FuserModel>,
        policy: &ThresholdPolicy,
    ) -> Result<DetectionResult> {
        if policy.l != self.key.bits.len() {
            return Err(Error::LengthMismatch {
                expected: self.key.bits.len(),
                actual: policy.l,
            });
        }
        let r_s = score_spatial(&estimate, &self.key.bits)?;
        let r_f = score_freq(z, &self.pattern)?;
        let fused = fuser.map(|f| f.score(r_s, r_f)).transpose()?;
        let matches = matched_bits(&estimate, &self.key.bits)?;
        let bit_decision = policy.accepts(matches);
        Ok(DetectionResult {
            r_s,
            r_f,
            fused,
            bits_hex: WatermarkBits::new(crate::stats::decide(&estimate))?.to_hex(),
            bit_accuracy: matches as f64 / estimate.len() as f64,
            matches,
            tau: policy.tau,
            bit_decision,
            decision: fused.map_or(bit_decision, |r| r >= 0.5),
            estimate,
        })
    }
}

/// Restorer training positives: sign maps of freshly embedded latents.
impl PositiveSource for Watermarker {
    fn shape(&self) -> Shape {
        self.key.shape
    }

    fn positive(&self, rng: &mut ChaCha20Rng) -> SignalMap {
        let z = sample_gaussian_with(self.key.shape, rng);
        sign_map(&self.embed(&z).expect("shape matches key"))
    }
}

impl Watermarker {
    /// A freshly embedded latent for `seed`.
    pub fn sample_watermarked(&self, seed: u64) -> Result<LatentTensor> {
        let z = sample_gaussian_with(self.key.shape, &mut ChaCha20Rng::seed_from_u64(seed));
        self.embed(&z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionResult {
    pub r_s: f64,
    pub r_f: f64,
    pub fused: Option<f64>,
    /// Hard-decided bits, MSB-first hex.
    pub bits_hex: String,
    pub bit_accuracy: f64,
    pub matches: usize,
    pub tau: usize,
    /// `matches > tau`.
    pub bit_decision: bool,
    /// Fused score ≥ 0.5 when a fuser is given, else `bit_decision`.
    pub decision: bool,
    #[serde(skip)]
    pub estimate: Vec<f64>,
}
