//! Gaussian noise restorer (GNR): a small encoder-decoder that maps a
//! geometrically distorted watermarked signal map back to the original,
//! while passing unwatermarked maps through unchanged.
//!
//! The encoder is three stride-2 3×3 convolutions (`base`, `2·base`,
//! `4·base` features) followed by a dense bottleneck of `8·base` units. The
//! decoder expands the bottleneck back to a full-resolution logit map and
//! adds a 1×1 convolution of the input, so the identity is one weight away.
//! A logistic head puts every output in (0, 1).

use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{block_count_error, ModelContainer};
use crate::latent::{random_signal_with, Shape, SignalMap};
use crate::nn::{
    bce_with_logits, relu_backward, relu_inplace, sigmoid, uniform_init, Conv2d, Linear, Optimizer,
    OptimizerKind, Scalar,
};
use crate::transform::{apply_transform, TransformKind, TransformSpec};

pub const GNR_MAGIC: [u8; 4] = *b"GMNR";
const BLOCKS: usize = 12;
/// Samples per gradient chunk; fixed so results do not depend on the
/// number of worker threads.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Arch {
    enc: [Conv2d; 3],
    fc: Linear,
    dec: Linear,
    skip: Conv2d,
}

impl Arch {
    fn new(base: usize, shape: Shape) -> Self {
        let mut enc = [Conv2d { in_channels: 0, out_channels: 0, kernel: 3, stride: 2, pad: 1, in_h: 0, in_w: 0 }; 3];
        let (mut cin, mut h, mut w) = (shape.channels, shape.width, shape.height);
        for (level, conv) in enc.iter_mut().enumerate() {
            *conv = Conv2d { in_channels: cin, out_channels: base << level, kernel: 3, stride: 2, pad: 1, in_h: h, in_w: w };
            cin = conv.out_channels;
            (h, w) = (conv.out_h(), conv.out_w());
        }
        let hidden = 8 * base;
        Arch {
            enc,
            fc: Linear { inputs: cin * h * w, outputs: hidden },
            dec: Linear { inputs: hidden, outputs: shape.len() },
            skip: Conv2d {
                in_channels: shape.channels,
                out_channels: shape.channels,
                kernel: 1,
                stride: 1,
                pad: 0,
                in_h: shape.width,
                in_w: shape.height,
            },
        }
    }

    /// (weight, bias) lengths and fan-in per block pair, in block order.
    fn layout(&self) -> [(usize, usize, usize); BLOCKS / 2] {
        let conv = |c: &Conv2d| (c.weight_len(), c.out_channels, c.in_channels * c.kernel * c.kernel);
        let lin = |l: &Linear| (l.weight_len(), l.outputs, l.inputs);
        [conv(&self.enc[0]), conv(&self.enc[1]), conv(&self.enc[2]), lin(&self.fc), lin(&self.dec), conv(&self.skip)]
    }
}

struct Cache<T> {
    cols: [Vec<Vec<T>>; 3],
    acts: [Vec<Vec<T>>; 3],
    hidden: Vec<Vec<T>>,
    inputs: Vec<Vec<T>>,
}

fn forward_batch<T: Scalar>(arch: &Arch, p: &[Vec<T>], inputs: Vec<Vec<T>>) -> (Vec<Vec<T>>, Cache<T>) {
    let mut cols: [Vec<Vec<T>>; 3] = Default::default();
    let mut acts: [Vec<Vec<T>>; 3] = Default::default();
    for x in &inputs {
        let mut cur = x.clone();
        for l in 0..3 {
            let (mut out, col) = arch.enc[l].forward(&p[2 * l], &p[2 * l + 1], &cur);
            relu_inplace(&mut out);
            cols[l].push(col);
            cur = out.clone();
            acts[l].push(out);
        }
    }
    let mut hidden = arch.fc.forward(&p[6], &p[7], &acts[2]);
    hidden.iter_mut().for_each(|h| relu_inplace(h));
    let mut logits = arch.dec.forward(&p[8], &p[9], &hidden);
    for (x, y) in inputs.iter().zip(logits.iter_mut()) {
        let (skip, _) = arch.skip.forward(&p[10], &p[11], x);
        y.iter_mut().zip(&skip).for_each(|(a, &b)| *a += b);
    }
    (logits, Cache { cols, acts, hidden, inputs })
}

fn pair_mut<T>(g: &mut [Vec<T>], weight: usize) -> (&mut [T], &mut [T]) {
    let (a, b) = g[weight..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

fn backward_batch<T: Scalar>(arch: &Arch, p: &[Vec<T>], cache: &Cache<T>, dlogits: &[Vec<T>]) -> Vec<Vec<T>> {
    let mut g: Vec<Vec<T>> = p.iter().map(|b| vec![T::zero(); b.len()]).collect();
    for (x, d) in cache.inputs.iter().zip(dlogits) {
        // A 1×1 convolution's patch matrix is the input itself.
        let (gw, gb) = pair_mut(&mut g, 10);
        arch.skip.backward(&p[10], x, d, gw, gb, false);
    }
    let (gw, gb) = pair_mut(&mut g, 8);
    let mut dh = arch
        .dec
        .backward(&p[8], &cache.hidden, dlogits, gw, gb, true)
        .expect("input gradient requested");
    for (h, d) in cache.hidden.iter().zip(dh.iter_mut()) {
        relu_backward(h, d);
    }
    let (gw, gb) = pair_mut(&mut g, 6);
    let mut da = arch
        .fc
        .backward(&p[6], &cache.acts[2], &dh, gw, gb, true)
        .expect("input gradient requested");
    for (n, d) in da.iter_mut().enumerate() {
        let mut cur = std::mem::take(d);
        for l in (0..3).rev() {
            relu_backward(&cache.acts[l][n], &mut cur);
            let (gw, gb) = pair_mut(&mut g, 2 * l);
            match arch.enc[l].backward(&p[2 * l], &cache.cols[l][n], &cur, gw, gb, l > 0) {
                Some(next) => cur = next,
                None => break,
            }
        }
    }
    g
}

fn encode_input<T: Scalar>(s: &[f32]) -> Vec<T> {
    s.iter().map(|&v| T::of(2.0 * v as f64 - 1.0)).collect()
}

/// Learned restorer for `c×w×h` signal maps.
#[derive(Debug, Clone, PartialEq)]
pub struct RestorerModel {
    base: usize,
    shape: Shape,
    arch: Arch,
    params: Vec<Vec<f32>>,
}

impl RestorerModel {
    /// Randomly initialized model.
    pub fn new(base: usize, shape: Shape, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(base, shape)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for (k, (wlen, blen, fan_in)) in model.arch.layout().into_iter().enumerate() {
            model.params[2 * k] = uniform_init(wlen, fan_in, &mut rng);
            model.params[2 * k + 1] = uniform_init(blen, fan_in, &mut rng);
        }
        Ok(model)
    }

    /// Model with every parameter zero; it outputs 0.5 everywhere.
    pub fn zeros(base: usize, shape: Shape) -> Result<Self> {
        if base == 0 {
            return Err(Error::InvalidParameter("base feature count must be ≥ 1".into()));
        }
        let arch = Arch::new(base, shape);
        let params = arch
            .layout()
            .iter()
            .flat_map(|&(w, b, _)| [vec![0.0; w], vec![0.0; b]])
            .collect();
        Ok(RestorerModel { base, shape, arch, params })
    }

    pub fn base_features(&self) -> usize {
        self.base
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn parameters(&self) -> &[Vec<f32>] {
        &self.params
    }

    fn check(&self, s: &SignalMap) -> Result<()> {
        if s.shape() != self.shape {
            return Err(Error::shape_mismatch(self.shape, s.shape()));
        }
        Ok(())
    }

    /// Output probabilities for a batch of maps.
    pub fn forward_batch(&self, maps: &[SignalMap]) -> Result<Vec<Vec<f32>>> {
        maps.iter().try_for_each(|s| self.check(s))?;
        Ok(maps
            .par_chunks(CHUNK)
            .flat_map_iter(|chunk| {
                let inputs = chunk.iter().map(|s| encode_input(&s.to_f32())).collect();
                forward_batch::<f32>(&self.arch, &self.params, inputs).0
            })
            .map(|logits| logits.into_iter().map(sigmoid).collect())
            .collect())
    }

    pub fn forward(&self, s: &SignalMap) -> Result<Vec<f32>> {
        Ok(self.forward_batch(std::slice::from_ref(s))?.remove(0))
    }

    /// Thresholds the output at 0.5; ties go to 1.
    pub fn restore(&self, s: &SignalMap) -> Result<SignalMap> {
        Ok(self.restore_batch(std::slice::from_ref(s))?.remove(0))
    }

    pub fn restore_batch(&self, maps: &[SignalMap]) -> Result<Vec<SignalMap>> {
        let probs = self.forward_batch(maps)?;
        Ok(probs
            .into_iter()
            .map(|p| SignalMap::from_raw(self.shape, p.iter().map(|&v| (v >= 0.5) as u8).collect()))
            .collect())
    }

    /// Sum of all outputs and its gradient, evaluated in double precision.
    /// Used to validate the backward pass by finite differences.
    pub fn output_sum_and_gradient(&self, s: &SignalMap) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check(s)?;
        let p: Vec<Vec<f64>> = self.params.iter().map(|b| b.iter().map(|&v| v as f64).collect()).collect();
        Ok(sum_and_gradient(&self.arch, &p, &s.to_f32()))
    }

    /// Sum of all outputs with parameter `(block, index)` shifted by `delta`,
    /// in double precision.
    pub fn output_sum_perturbed(&self, s: &SignalMap, block: usize, index: usize, delta: f64) -> Result<f64> {
        self.check(s)?;
        let mut p: Vec<Vec<f64>> = self.params.iter().map(|b| b.iter().map(|&v| v as f64).collect()).collect();
        p[block][index] += delta;
        let (logits, _) = forward_batch(&self.arch, &p, vec![encode_input(&s.to_f32())]);
        Ok(logits[0].iter().map(|&l| sigmoid(l)).sum())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = vec![
            self.base as u32,
            self.shape.channels as u32,
            self.shape.width as u32,
            self.shape.height as u32,
        ];
        let blocks = self.params.iter().enumerate().map(|(i, b)| (i as u32, b.clone())).collect();
        ModelContainer { header, blocks }.encode(GNR_MAGIC)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let container = ModelContainer::decode(buf, GNR_MAGIC, 4)?;
        let h = &container.header;
        let shape = Shape::new(h[1] as usize, h[2] as usize, h[3] as usize)?;
        let mut model = Self::zeros(h[0] as usize, shape)?;
        if container.blocks.len() != BLOCKS {
            return Err(block_count_error(BLOCKS, container.blocks.len()));
        }
        for (k, (id, values)) in container.blocks.into_iter().enumerate() {
            if id as usize != k {
                return Err(crate::error::FormatError::Malformed(format!("block {k} has id {id}")).into());
            }
            if values.len() != model.params[k].len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} parameters in block {k} for base {} on {shape}", model.params[k].len(), model.base),
                    actual: values.len().to_string(),
                });
            }
            model.params[k] = values;
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads a model and checks it was built for `shape`.
    pub fn load_for(path: impl AsRef<Path>, shape: Shape) -> Result<Self> {
        let model = Self::load(path)?;
        if model.shape != shape {
            return Err(Error::shape_mismatch(shape, model.shape));
        }
        Ok(model)
    }
}

fn sum_and_gradient(arch: &Arch, p: &[Vec<f64>], s: &[f32]) -> (f64, Vec<Vec<f64>>) {
    let (logits, cache) = forward_batch(arch, p, vec![encode_input(s)]);
    let probs: Vec<f64> = logits[0].iter().map(|&l| sigmoid(l)).collect();
    let dl: Vec<f64> = probs.iter().map(|&q| q * (1.0 - q)).collect();
    (probs.iter().sum(), backward_batch(arch, p, &cache, &[dl]))
}

/// Distortions sampled for every training example: a rotation, then a
/// crop-and-rescale, then independent sign flips at a rate drawn from
/// `[0, max_flip]`. A `None` range disables that stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformFamily {
    pub rotation: Option<(f64, f64)>,
    pub crop: Option<(f64, f64)>,
    pub max_flip: f64,
}

impl Default for TransformFamily {
    fn default() -> Self {
        TransformFamily {
            rotation: Some((-180.0, 180.0)),
            crop: Some((0.7, 1.0)),
            max_flip: 0.35,
        }
    }
}

impl TransformFamily {
    pub fn identity() -> Self {
        TransformFamily { rotation: None, crop: None, max_flip: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("transform family: bad {what} range")));
        if let Some((lo, hi)) = self.rotation {
            if !(-180.0..=180.0).contains(&lo) || !(lo..=180.0).contains(&hi) {
                return bad("rotation");
            }
        }
        if let Some((lo, hi)) = self.crop {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad("crop");
            }
        }
        if !(0.0..=1.0).contains(&self.max_flip) {
            return bad("flip");
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> TransformSpec {
        let mut parts = Vec::new();
        if let Some((lo, hi)) = self.rotation {
            parts.push(TransformKind::Rotate { angle: uniform(rng, lo, hi) });
        }
        if let Some((lo, hi)) = self.crop {
            parts.push(TransformKind::CropRescale { area_ratio: uniform(rng, lo, hi) });
        }
        if self.max_flip > 0.0 {
            parts.push(TransformKind::SignFlip { p: uniform(rng, 0.0, self.max_flip) });
        }
        TransformSpec::seeded(TransformKind::Compose(parts), rng.gen())
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnrTrainConfig {
    pub base_features: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub family: TransformFamily,
    pub seed: u64,
}

impl Default for GnrTrainConfig {
    fn default() -> Self {
        GnrTrainConfig {
            base_features: 16,
            learning_rate: 1e-3,
            batch_size: 32,
            steps: 2000,
            optimizer: OptimizerKind::Adam,
            family: TransformFamily::default(),
            seed: 0,
        }
    }
}

impl GnrTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_features == 0 || self.batch_size < 2 || self.steps == 0 {
            return Err(Error::InvalidParameter("need base ≥ 1, batch ≥ 2, steps ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {}", self.learning_rate)));
        }
        self.family.validate()
    }
}

/// Supplies watermarked training targets `s^{s,f}_T`.
pub trait PositiveSource: Sync {
    fn shape(&self) -> Shape;
    fn positive(&self, rng: &mut ChaCha20Rng) -> SignalMap;
}

/// A single fixed watermarked map.
impl PositiveSource for SignalMap {
    fn shape(&self) -> Shape {
        SignalMap::shape(self)
    }

    fn positive(&self, _rng: &mut ChaCha20Rng) -> SignalMap {
        self.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean binary cross-entropy per step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the first (`tail = false`) or last tenth of training.
    pub fn decile_mean(&self, tail: bool) -> f64 {
        let k = (self.losses.len() / 10).max(1);
        let part = if tail { &self.losses[self.losses.len() - k..] } else { &self.losses[..k] };
        part.iter().sum::<f64>() / part.len() as f64
    }

    /// Exponential moving average of the loss (decay 0.99) after `step`
    /// steps (1-based).
    pub fn ema_at(&self, step: usize) -> f64 {
        let mut ema = self.losses[0];
        for &l in &self.losses[1..step.min(self.losses.len())] {
            ema = 0.99 * ema + 0.01 * l;
        }
        ema
    }
}

/// Trains a restorer. Even batch slots hold positives (distorted
/// watermarked map → original), odd slots negatives (distorted fresh random
/// map → itself), each with its own sampled distortion.
pub fn train(config: &GnrTrainConfig, source: &dyn PositiveSource) -> Result<(RestorerModel, TrainReport)> {
    config.validate()?;
    let shape = source.shape();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut model = RestorerModel::new(config.base_features, shape, rng.gen())?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &model.params);
    info!(
        "training restorer: base {}, {} parameters, {} steps of {}",
        config.base_features,
        model.parameter_count(),
        config.steps,
        config.batch_size
    );
    let mut losses = Vec::with_capacity(config.steps);
    let scale = 1.0 / (config.batch_size * shape.len()) as f64;
    for step in 0..config.steps {
        let mut pairs = Vec::with_capacity(config.batch_size);
        for k in 0..config.batch_size {
            let t = config.family.sample(&mut rng);
            let pair = if k % 2 == 0 {
                let target = source.positive(&mut rng);
                (apply_transform(&target, &t)?, target)
            } else {
                let input = apply_transform(&random_signal_with(shape, &mut rng), &t)?;
                (input.clone(), input)
            };
            pairs.push(pair);
        }
        let parts: Vec<(f64, Vec<Vec<f32>>)> = pairs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let inputs = chunk.iter().map(|(x, _)| encode_input(&x.to_f32())).collect();
                let (logits, cache) = forward_batch::<f32>(&model.arch, &model.params, inputs);
                let mut loss = 0.0;
                let dl: Vec<Vec<f32>> = logits
                    .iter()
                    .zip(chunk)
                    .map(|(l, (_, t))| {
                        l.iter()
                            .zip(t.bits())
                            .map(|(&z, &b)| {
                                loss += bce_with_logits(z as f64, b as f64);
                                ((sigmoid(z as f64) - b as f64) * scale) as f32
                            })
                            .collect()
                    })
                    .collect();
                (loss, backward_batch(&model.arch, &model.params, &cache, &dl))
            })
            .collect();
        let mut loss = 0.0;
        let mut grads: Option<Vec<Vec<f32>>> = None;
        for (l, g) in parts {
            loss += l;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| crate::nn::axpy(1.0, b, a)),
            }
        }
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.step(&mut model.params, &grads.expect("non-empty batch"));
        if model.params.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        losses.push(loss);
        if step % 100 == 0 || step + 1 == config.steps {
            debug!("restorer step {step}: loss {loss:.4}");
        }
    }
    Ok((model, TrainReport { losses }))
}
