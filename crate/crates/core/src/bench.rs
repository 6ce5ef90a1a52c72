//! Latent-level benchmark: positives and negatives for each pipeline
//! variant under simulated distortions plus an inversion-noise surrogate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freq::score_freq;
use crate::fusion::{train_fuser, FuserModel, FuserTrainConfig};
use crate::latent::{sample_gaussian_with, LatentTensor};
use crate::pipeline::Watermarker;
use crate::restorer::RestorerModel;
use crate::spatial::score_spatial;
use crate::stats::{auc, choose_threshold, evaluate, matched_bits};
use crate::transform::{apply_transform, TransformKind, TransformSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Spatial,
    Freq,
    Dual,
    DualGnr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Spatial, Variant::Freq, Variant::Dual, Variant::DualGnr];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Spatial => "spatial",
            Variant::Freq => "freq",
            Variant::Dual => "dual",
            Variant::DualGnr => "dual+gnr",
        }
    }

    fn fused(self) -> bool {
        matches!(self, Variant::Dual | Variant::DualGnr)
    }
}

/// Stand-in for the error a real inversion would add: Gaussian noise on
/// every element, then independent sign flips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionNoiseModel {
    pub gaussian_sigma: f64,
    pub flip_rate: f64,
}

impl Default for InversionNoiseModel {
    fn default() -> Self {
        InversionNoiseModel {
            gaussian_sigma: 0.1,
            flip_rate: 0.05,
        }
    }
}

impl InversionNoiseModel {
    pub fn none() -> Self {
        InversionNoiseModel {
            gaussian_sigma: 0.0,
            flip_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma >= 0.0 && self.gaussian_sigma.is_finite()) || !(0.0..1.0).contains(&self.flip_rate) {
            return Err(Error::InvalidParameter(format!("inversion noise {self:?}")));
        }
        Ok(())
    }

    pub fn apply<R: Rng>(&self, z: &LatentTensor, rng: &mut R) -> LatentTensor {
        if self.gaussian_sigma == 0.0 && self.flip_rate == 0.0 {
            return z.clone();
        }
        let data = z
            .data()
            .iter()
            .map(|&v| {
                let n: f64 = StandardNormal.sample(rng);
                let v = v as f64 + self.gaussian_sigma * n;
                (if rng.gen::<f64>() < self.flip_rate { -v } else { v }) as f32
            })
            .collect();
        LatentTensor::from_raw(z.shape(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    pub name: String,
    pub transform: TransformKind,
}

impl Distortion {
    pub fn new(name: &str, transform: TransformKind) -> Self {
        Distortion {
            name: name.to_string(),
            transform,
        }
    }

    pub fn standard() -> Vec<Distortion> {
        vec![
            Distortion::new("clean", TransformKind::Identity),
            Distortion::new("rotate75", TransformKind::Rotate { angle: 75.0 }),
            Distortion::new("crop0.75", TransformKind::CropRescale { area_ratio: 0.75 }),
            Distortion::new("flip0.2", TransformKind::SignFlip { p: 0.2 }),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// Positives and, separately, negatives per (variant, distortion).
    pub n_samples: usize,
    pub distortions: Vec<Distortion>,
    pub noise: InversionNoiseModel,
    pub variants: Vec<Variant>,
    pub seed: u64,
    pub target_fpr: f64,
    /// Positives and negatives simulated to fit each fuser.
    pub fuser_samples: usize,
    pub fuser: FuserTrainConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            n_samples: 100,
            distortions: Distortion::standard(),
            noise: InversionNoiseModel::default(),
            variants: Variant::ALL.to_vec(),
            seed: 0,
            target_fpr: 0.01,
            fuser_samples: 100,
            fuser: FuserTrainConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.variants.is_empty() || self.distortions.is_empty() {
            return Err(Error::InvalidParameter("benchmark needs samples, variants and distortions".into()));
        }
        if self.variants.iter().any(|v| v.fused()) && self.fuser_samples == 0 {
            return Err(Error::InvalidParameter("fused variants need fuser training samples".into()));
        }
        self.distortions.iter().try_for_each(|d| d.transform.validate())?;
        self.noise.validate()
    }
}

/// SplitMix64 finalizer over a running state; derives independent
/// per-sample seeds from the master seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        state ^= p;
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleScores {
    pub r_s: f64,
    pub r_f: f64,
    pub matches: usize,
    pub bit_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Embedding {
    None,
    Spatial,
    Freq,
    Dual,
}

fn embedding_for(variant: Variant, positive: bool) -> Embedding {
    match (positive, variant) {
        (false, _) => Embedding::None,
        (true, Variant::Spatial) => Embedding::Spatial,
        (true, Variant::Freq) => Embedding::Freq,
        (true, _) => Embedding::Dual,
    }
}

/// Simulates one latent end to end and scores it.
#[allow(clippy::too_many_arguments)]
fn simulate(
    wm: &Watermarker,
    embedding: Embedding,
    transform: &TransformKind,
    noise: &InversionNoiseModel,
    gnr: Option<&RestorerModel>,
    seed: u64,
) -> Result<SampleScores> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let z = sample_gaussian_with(wm.shape(), &mut rng);
    let z = match embedding {
        Embedding::None => z,
        Embedding::Spatial => wm.embed_spatial_only(&z)?,
        Embedding::Freq => wm.embed_freq_only(&z)?,
        Embedding::Dual => wm.embed(&z)?,
    };
    let t = TransformSpec::seeded(transform.clone(), rng.gen());
    let observed = noise.apply(&apply_transform(&z, &t)?, &mut rng);
    let estimate = wm.read_bits(&observed, gnr)?;
    let matches = matched_bits(&estimate, wm.bits())?;
    Ok(SampleScores {
        r_s: score_spatial(&estimate, wm.bits())?,
        r_f: score_freq(&observed, wm.pattern())?,
        matches,
        bit_accuracy: matches as f64 / estimate.len() as f64,
    })
}

const POSITIVE: u64 = 1;
const NEGATIVE: u64 = 2;
const FUSER_POSITIVE: u64 = 3;
const FUSER_NEGATIVE: u64 = 4;

/// Score pairs for fitting a fuser: `n` positives and `n` negatives,
/// cycling through `distortions`, on seeds disjoint from the benchmark's.
pub fn fuser_training_scores(
    wm: &Watermarker,
    gnr: Option<&RestorerModel>,
    distortions: &[Distortion],
    noise: &InversionNoiseModel,
    n: usize,
    seed: u64,
) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>)> {
    if distortions.is_empty() {
        return Err(Error::InvalidParameter("no distortions".into()));
    }
    let run = |positive: bool| -> Result<Vec<(f64, f64)>> {
        let class = if positive { FUSER_POSITIVE } else { FUSER_NEGATIVE };
        let embedding = if positive { Embedding::Dual } else { Embedding::None };
        (0..n)
            .into_par_iter()
            .map(|i| {
                let d = &distortions[i % distortions.len()];
                let s = simulate(wm, embedding, &d.transform, noise, gnr, derive_seed(&[seed, class, i as u64]))?;
                Ok((s.r_s, s.r_f))
            })
            .collect()
    };
    Ok((run(true)?, run(false)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub variant: String,
    pub distortion: String,
    pub n: usize,
    pub tpr_at_fpr: f64,
    pub auc: f64,
    pub bit_accuracy: f64,
    pub neg_bit_accuracy: f64,
    /// TPR and empirical FPR of the bit-count test `matches > tau`.
    pub tpr_at_tau: f64,
    pub fpr_at_tau: f64,
    pub auc_spatial: f64,
    pub auc_freq: f64,
    pub noise_sigma: f64,
    pub noise_flip_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub tau: usize,
    pub analytic_fpr: f64,
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkReport {
    pub fn row(&self, variant: Variant, distortion: &str) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.variant == variant.name() && r.distortion == distortion)
    }

    pub fn average_tpr(&self, variant: Variant) -> f64 {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.variant == variant.name()).collect();
        rows.iter().map(|r| r.tpr_at_fpr).sum::<f64>() / rows.len().max(1) as f64
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::InvalidParameter(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Human-readable table. Contains no timestamp, so identical configs
    /// give identical text.
    pub fn summary(&self) -> String {
        let c = &self.config;
        let mut out = format!(
            "inversion noise: gaussian_sigma={} flip_rate={}\nsamples: {} positives / {} negatives per cell, seed {}\nbit threshold: tau={} (analytic FPR {:.3e} at target {})\n\n",
            c.noise.gaussian_sigma, c.noise.flip_rate, c.n_samples, c.n_samples, c.seed, self.tau, self.analytic_fpr, c.target_fpr
        );
        out += &format!(
            "{:<10} {:<12} {:>8} {:>7} {:>8} {:>8} {:>8} {:>8}\n",
            "variant", "distortion", "TPR@FPR", "AUC", "bitacc", "neg_acc", "TPR@tau", "FPR@tau"
        );
        for r in &self.rows {
            out += &format!(
                "{:<10} {:<12} {:>8.3} {:>7.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
                r.variant, r.distortion, r.tpr_at_fpr, r.auc, r.bit_accuracy, r.neg_bit_accuracy, r.tpr_at_tau, r.fpr_at_tau
            );
        }
        out += "\naverage TPR@FPR:";
        for v in Variant::ALL.iter().filter(|v| c.variants.contains(v)) {
            out += &format!(" {}={:.3}", v.name(), self.average_tpr(*v));
        }
        out + "\n"
    }
}

/// Models used by the benchmark. Missing fusers are fitted on simulated
/// data; a missing restorer is an error when `dual+gnr` is requested.
#[derive(Debug, Clone, Default)]
pub struct BenchmarkModels {
    pub gnr: Option<RestorerModel>,
    pub fuser_dual: Option<FuserModel>,
    pub fuser_dual_gnr: Option<FuserModel>,
}

pub fn run_benchmark(config: &BenchmarkConfig, wm: &Watermarker, models: &BenchmarkModels) -> Result<BenchmarkReport> {
    config.validate()?;
    let policy = choose_threshold(wm.bits().len(), config.target_fpr, 1)?;
    let mut rows = Vec::new();
    for &variant in &config.variants {
        let gnr = match variant {
            Variant::DualGnr => Some(
                models
                    .gnr
                    .as_ref()
                    .ok_or_else(|| Error::InvalidParameter("dual+gnr needs a restorer model".into()))?,
            ),
            _ => None,
        };
        let fuser = match variant {
            Variant::Dual | Variant::DualGnr => {
                let given = if variant == Variant::Dual { &models.fuser_dual } else { &models.fuser_dual_gnr };
                Some(match given {
                    Some(f) => f.clone(),
                    None => {
                        let (pos, neg) = fuser_training_scores(
                            wm,
                            gnr,
                            &config.distortions,
                            &config.noise,
                            config.fuser_samples,
                            derive_seed(&[config.seed, variant as u64]),
                        )?;
                        train_fuser(&config.fuser, &pos, &neg)?
                    }
                })
            }
            _ => None,
        };
        for (di, d) in config.distortions.iter().enumerate() {
            let run = |positive: bool| -> Result<Vec<SampleScores>> {
                let class = if positive { POSITIVE } else { NEGATIVE };
                (0..config.n_samples)
                    .into_par_iter()
                    .map(|i| {
                        let seed = derive_seed(&[config.seed, class, di as u64, i as u64]);
                        simulate(wm, embedding_for(variant, positive), &d.transform, &config.noise, gnr, seed)
                    })
                    .collect()
            };
            let (pos, neg) = (run(true)?, run(false)?);
            let decision_score = |s: &SampleScores| -> Result<f64> {
                Ok(match variant {
                    Variant::Spatial => s.r_s,
                    Variant::Freq => s.r_f,
                    _ => fuser.as_ref().expect("fused variant").score(s.r_s, s.r_f)?,
                })
            };
            let ps = pos.iter().map(decision_score).collect::<Result<Vec<_>>>()?;
            let ns = neg.iter().map(decision_score).collect::<Result<Vec<_>>>()?;
            let eval = evaluate(&ps, &ns, config.target_fpr)?;
            let col = |v: &[SampleScores], f: fn(&SampleScores) -> f64| v.iter().map(f).collect::<Vec<_>>();
            let frac = |v: &[SampleScores]| v.iter().filter(|s| policy.accepts(s.matches)).count() as f64 / v.len() as f64;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            rows.push(BenchmarkRow {
                variant: variant.name().to_string(),
                distortion: d.name.clone(),
                n: config.n_samples,
                tpr_at_fpr: eval.tpr_at_fpr,
                auc: eval.auc,
                bit_accuracy: mean(&col(&pos, |s| s.bit_accuracy)),
                neg_bit_accuracy: mean(&col(&neg, |s| s.bit_accuracy)),
                tpr_at_tau: frac(&pos),
                fpr_at_tau: frac(&neg),
                auc_spatial: auc(&col(&pos, |s| s.r_s), &col(&neg, |s| s.r_s)),
                auc_freq: auc(&col(&pos, |s| s.r_f), &col(&neg, |s| s.r_f)),
                noise_sigma: config.noise.gaussian_sigma,
                noise_flip_rate: config.noise.flip_rate,
            });
        }
    }
    Ok(BenchmarkReport {
        config: config.clone(),
        tau: policy.tau,
        analytic_fpr: crate::stats::fpr_exact(policy.tau, wm.bits().len())?,
        rows,
    })
}
