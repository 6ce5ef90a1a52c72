//! Learned fusion of the spatial and frequency scores into one detection
//! score: standardize each score, then a `2 → H → 1` MLP with a tanh hidden
//! layer and a logistic output, trained with binary cross-entropy.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::format::{block_count_error, ModelContainer};
use crate::nn::{bce_with_logits, sigmoid, uniform_init, Optimizer, OptimizerKind};

pub const FUSER_MAGIC: [u8; 4] = *b"GMFU";

/// Parameters live in `f32` so a saved model reproduces scores exactly;
/// the arithmetic is `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct FuserModel {
    hidden: usize,
    /// `[mean_s, mean_f, std_s, std_f]`.
    norm: [f32; 4],
    /// `w1 [hidden][2]`, `b1 [hidden]`, `w2 [hidden]`, `b2 [1]`.
    params: Vec<Vec<f32>>,
}

impl FuserModel {
    /// All-zero weights with identity normalization; scores 0.5 everywhere.
    pub fn zeros(hidden: usize) -> Self {
        FuserModel {
            hidden,
            norm: [0.0, 0.0, 1.0, 1.0],
            params: vec![vec![0.0; 2 * hidden], vec![0.0; hidden], vec![0.0; hidden], vec![0.0]],
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn normalization(&self) -> [f32; 4] {
        self.norm
    }

    fn standardize(&self, rs: f64, rf: f64) -> [f64; 2] {
        [
            (rs - self.norm[0] as f64) / self.norm[2] as f64,
            (rf - self.norm[1] as f64) / self.norm[3] as f64,
        ]
    }

    fn logit_with(&self, p: &[Vec<f64>], x: [f64; 2]) -> (f64, Vec<f64>) {
        let a: Vec<f64> = (0..self.hidden)
            .map(|k| (p[0][2 * k] * x[0] + p[0][2 * k + 1] * x[1] + p[1][k]).tanh())
            .collect();
        let z = p[3][0] + a.iter().zip(&p[2]).map(|(a, w)| a * w).sum::<f64>();
        (z, a)
    }

    fn params_f64(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|b| b.iter().map(|&v| v as f64).collect()).collect()
    }

    /// Fused score in (0, 1).
    pub fn score(&self, rs: f64, rf: f64) -> Result<f64> {
        if !rs.is_finite() || !rf.is_finite() {
            return Err(Error::NonFinite);
        }
        let (z, _) = self.logit_with(&self.params_f64(), self.standardize(rs, rf));
        Ok(sigmoid(z))
    }

    /// Score and its gradient with respect to every parameter.
    pub fn score_and_gradient(&self, rs: f64, rf: f64) -> (f64, Vec<Vec<f64>>) {
        let x = self.standardize(rs, rf);
        let p = self.params_f64();
        let (z, a) = self.logit_with(&p, x);
        let y = sigmoid(z);
        (y, self.backward(&p, x, &a, y * (1.0 - y)))
    }

    /// Score with parameter `(block, index)` shifted by `delta`.
    pub fn score_perturbed(&self, rs: f64, rf: f64, block: usize, index: usize, delta: f64) -> f64 {
        let mut p = self.params_f64();
        p[block][index] += delta;
        sigmoid(self.logit_with(&p, self.standardize(rs, rf)).0)
    }

    fn backward(&self, p: &[Vec<f64>], x: [f64; 2], a: &[f64], dz: f64) -> Vec<Vec<f64>> {
        let mut g: Vec<Vec<f64>> = p.iter().map(|b| vec![0.0; b.len()]).collect();
        g[3][0] = dz;
        for k in 0..self.hidden {
            g[2][k] = dz * a[k];
            let dpre = dz * p[2][k] * (1.0 - a[k] * a[k]);
            g[1][k] = dpre;
            g[0][2 * k] = dpre * x[0];
            g[0][2 * k + 1] = dpre * x[1];
        }
        g
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blocks: Vec<(u32, Vec<f32>)> =
            self.params.iter().enumerate().map(|(i, b)| (i as u32, b.clone())).collect();
        blocks.push((4, self.norm.to_vec()));
        ModelContainer { header: vec![self.hidden as u32], blocks }.encode(FUSER_MAGIC)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let c = ModelContainer::decode(buf, FUSER_MAGIC, 1)?;
        let mut m = FuserModel::zeros(c.header[0] as usize);
        if c.blocks.len() != 5 {
            return Err(block_count_error(5, c.blocks.len()));
        }
        for (k, (id, values)) in c.blocks.into_iter().enumerate() {
            let want = if k < 4 { m.params[k].len() } else { 4 };
            if id as usize != k || values.len() != want {
                return Err(FormatError::Malformed(format!("fuser block {k}: id {id}, {} values", values.len())).into());
            }
            if k < 4 {
                m.params[k] = values;
            } else {
                m.norm.copy_from_slice(&values);
            }
        }
        if m.norm[2] <= 0.0 || m.norm[3] <= 0.0 {
            return Err(FormatError::Malformed("non-positive normalization scale".into()).into());
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FuserTrainConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for FuserTrainConfig {
    fn default() -> Self {
        FuserTrainConfig {
            hidden: 16,
            learning_rate: 1e-3,
            batch_size: 200,
            steps: 1000,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fits a fuser on `(r_s, r_f)` pairs from watermarked (`pos`) and clean
/// (`neg`) samples.
pub fn train_fuser(config: &FuserTrainConfig, pos: &[(f64, f64)], neg: &[(f64, f64)]) -> Result<FuserModel> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidParameter("fuser training needs both classes".into()));
    }
    if config.hidden == 0 || config.batch_size == 0 || config.steps == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidParameter("fuser config values must be positive".into()));
    }
    let data: Vec<([f64; 2], f64)> = pos
        .iter()
        .map(|&(a, b)| ([a, b], 1.0))
        .chain(neg.iter().map(|&(a, b)| ([a, b], 0.0)))
        .collect();
    if data.iter().any(|(x, _)| !x[0].is_finite() || !x[1].is_finite()) {
        return Err(Error::NonFinite);
    }
    let (ms, ss) = moments(data.iter().map(|(x, _)| x[0]));
    let (mf, sf) = moments(data.iter().map(|(x, _)| x[1]));
    let mut model = FuserModel::zeros(config.hidden);
    model.norm = [ms as f32, mf as f32, ss as f32, sf as f32];
    for (name, s, m) in [("spatial", ss, ms), ("frequency", sf, mf)] {
        if !(s as f32 > 0.0) || s <= 1e-12 * m.abs().max(1.0) {
            return Err(Error::DegenerateData(format!("{name} score has zero variance")));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    model.params = vec![
        uniform_init(2 * config.hidden, 2, &mut rng),
        uniform_init(config.hidden, 2, &mut rng),
        uniform_init(config.hidden, config.hidden, &mut rng),
        uniform_init(1, config.hidden, &mut rng),
    ];
    let inputs: Vec<([f64; 2], f64)> = data.iter().map(|&(x, t)| (model.standardize(x[0], x[1]), t)).collect();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &model.params);
    for step in 0..config.steps {
        let p = model.params_f64();
        let mut grads: Vec<Vec<f64>> = p.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            let (x, t) = inputs[rng.gen_range(0..inputs.len())];
            let (z, a) = model.logit_with(&p, x);
            loss += bce_with_logits(z, t);
            let g = model.backward(&p, x, &a, (sigmoid(z) - t) / config.batch_size as f64);
            for (acc, gb) in grads.iter_mut().zip(&g) {
                acc.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let g32: Vec<Vec<f32>> = grads.iter().map(|b| b.iter().map(|&v| v as f32).collect()).collect();
        opt.step(&mut model.params, &g32);
    }
    Ok(model)
}

/// Fraction of samples on the correct side of the 0.5 cut.
pub fn training_accuracy(model: &FuserModel, pos: &[(f64, f64)], neg: &[(f64, f64)]) -> Result<f64> {
    let mut correct = 0usize;
    for &(a, b) in pos {
        correct += (model.score(a, b)? >= 0.5) as usize;
    }
    for &(a, b) in neg {
        correct += (model.score(a, b)? < 0.5) as usize;
    }
    Ok(correct as f64 / (pos.len() + neg.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn cluster(center: (f64, f64), sd: f64, n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, sd).unwrap();
        (0..n).map(|_| (center.0 + d.sample(&mut rng), center.1 + d.sample(&mut rng))).collect()
    }

    #[test]
    fn zero_model_scores_half() {
        let m = FuserModel::zeros(16);
        assert_eq!(m.score(3.0, -7.0).unwrap(), 0.5);
        assert!(m.score(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn separable_clusters_are_learned() {
        let pos = cluster((1.0, 1.0), 0.2, 100, 1);
        let neg = cluster((-1.0, -1.0), 0.2, 100, 2);
        let m = train_fuser(&FuserTrainConfig::default(), &pos, &neg).unwrap();
        assert_eq!(training_accuracy(&m, &pos, &neg).unwrap(), 1.0);
        assert!(m.score(1.0, 1.0).unwrap() > m.score(-1.0, -1.0).unwrap());
    }

    #[test]
    fn identical_classes_stay_near_chance() {
        let pos = cluster((0.0, 0.0), 1.0, 100, 3);
        let neg = cluster((0.0, 0.0), 1.0, 100, 4);
        let m = train_fuser(&FuserTrainConfig::default(), &pos, &neg).unwrap();
        let acc = training_accuracy(&m, &pos, &neg).unwrap();
        assert!((0.4..=0.6).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn rejects_bad_training_data() {
        let pos = cluster((1.0, 1.0), 0.2, 10, 1);
        assert!(train_fuser(&FuserTrainConfig::default(), &pos, &[]).is_err());
        let flat: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 5.0)).collect();
        assert!(matches!(
            train_fuser(&FuserTrainConfig::default(), &flat, &flat),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let pos = cluster((1.0, 2.0), 0.5, 50, 5);
        let neg = cluster((-1.0, 0.0), 0.5, 50, 6);
        let cfg = FuserTrainConfig { steps: 50, ..Default::default() };
        let m = train_fuser(&cfg, &pos, &neg).unwrap();
        let eps = 1e-3;
        for (rs, rf) in [(0.3, 1.1), (-2.0, 0.4)] {
            let (_, g) = m.score_and_gradient(rs, rf);
            for block in 0..4 {
                for index in 0..g[block].len() {
                    let fd = (m.score_perturbed(rs, rf, block, index, eps)
                        - m.score_perturbed(rs, rf, block, index, -eps))
                        / (2.0 * eps);
                    let a = g[block][index];
                    let denom = a.abs().max(fd.abs());
                    if denom > 1e-8 {
                        assert!((a - fd).abs() / denom < 1e-3, "block {block}[{index}]: {a} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn standardization_makes_training_scale_free() {
        let pos = cluster((1.0, 0.5), 0.6, 100, 7);
        let neg = cluster((-0.5, -1.0), 0.6, 100, 8);
        let (a, b, c, d) = (250.0, -3.0, 0.01, 40.0);
        let rescale = |v: &[(f64, f64)]| v.iter().map(|&(x, y)| (a * x + b, c * y + d)).collect::<Vec<_>>();
        let cfg = FuserTrainConfig::default();
        let m1 = train_fuser(&cfg, &pos, &neg).unwrap();
        let m2 = train_fuser(&cfg, &rescale(&pos), &rescale(&neg)).unwrap();
        let probe = cluster((0.0, 0.0), 1.5, 200, 9);
        let mut agree = 0;
        for &(x, y) in &probe {
            let d1 = m1.score(x, y).unwrap() >= 0.5;
            let d2 = m2.score(a * x + b, c * y + d).unwrap() >= 0.5;
            agree += (d1 == d2) as usize;
        }
        // Only points within float rounding of the boundary may disagree.
        assert!(agree >= 198, "{agree}/200");
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let pos = cluster((1.0, 1.0), 0.3, 30, 10);
        let neg = cluster((-1.0, -1.0), 0.3, 30, 11);
        let m = train_fuser(&FuserTrainConfig { steps: 100, ..Default::default() }, &pos, &neg).unwrap();
        let bytes = m.to_bytes();
        let back = FuserModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for _ in 0..100 {
            let (x, y) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            assert!((back.score(x, y).unwrap() - m.score(x, y).unwrap()).abs() <= 1e-9);
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            FuserModel::from_bytes(&bad),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        let mut bad = bytes;
        bad[4] = 2;
        assert!(matches!(
            FuserModel::from_bytes(&bad),
            Err(Error::Format(FormatError::UnsupportedVersion { .. }))
        ));
    }
}
