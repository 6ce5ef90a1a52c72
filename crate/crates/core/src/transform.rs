//! Latent-level geometric and sign transforms.
//!
//! Geometric transforms are expressed as a gather plan (one optional source
//! index per destination cell) built once per plane and applied to every
//! channel. Cells with no source are filled with fresh noise of the same
//! law as an unwatermarked element: a fair coin for signal maps, a standard
//! normal draw for latents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentTensor, Shape, SignalMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    /// Counter-clockwise rotation about the grid center, in degrees.
    Rotate { angle: f64 },
    /// Random axis-aligned window of the given relative area, rescaled back.
    CropRescale { area_ratio: f64 },
    /// Independent per-element sign flips.
    SignFlip { p: f64 },
    /// Left-to-right composition.
    Compose(Vec<TransformKind>),
}

impl TransformKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            TransformKind::Identity => Ok(()),
            TransformKind::Rotate { angle } => {
                if angle.is_finite() && (-180.0..=180.0).contains(angle) {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "rotation angle {angle} outside [-180, 180]"
                    )))
                }
            }
            TransformKind::CropRescale { area_ratio } => {
                if *area_ratio > 0.0 && *area_ratio <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "crop area ratio {area_ratio} outside (0, 1]"
                    )))
                }
            }
            TransformKind::SignFlip { p } => {
                if (0.0..=1.0).contains(p) {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "flip probability {p} outside [0, 1]"
                    )))
                }
            }
            TransformKind::Compose(parts) => parts.iter().try_for_each(TransformKind::validate),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Rotate { .. } => "rotate",
            TransformKind::CropRescale { .. } => "crop_rescale",
            TransformKind::SignFlip { .. } => "sign_flip",
            TransformKind::Compose(_) => "compose",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
}

impl TransformSpec {
    pub fn new(kind: TransformKind) -> Self {
        TransformSpec { kind, rng_seed: None }
    }

    pub fn seeded(kind: TransformKind, seed: u64) -> Self {
        TransformSpec {
            kind,
            rng_seed: Some(seed),
        }
    }

    pub fn identity() -> Self {
        Self::new(TransformKind::Identity)
    }

    pub fn rotate(angle: f64) -> Self {
        Self::new(TransformKind::Rotate { angle })
    }

    pub fn crop_rescale(area_ratio: f64) -> Self {
        Self::new(TransformKind::CropRescale { area_ratio })
    }

    pub fn sign_flip(p: f64) -> Self {
        Self::new(TransformKind::SignFlip { p })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = Some(seed);
        self
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.rng_seed.unwrap_or(0))
    }
}

/// Containers the transforms operate on.
pub trait Grid: Sized {
    fn grid_shape(&self) -> Shape;
    /// Builds a new grid whose cell `k` of every channel plane takes the
    /// value of plane cell `plan[k]`, or fresh noise where the plan is empty.
    fn gather(&self, plan: &[Option<usize>], rng: &mut ChaCha8Rng) -> Self;
    fn flip(&self, p: f64, rng: &mut ChaCha8Rng) -> Self;
}

impl Grid for SignalMap {
    fn grid_shape(&self) -> Shape {
        self.shape()
    }

    fn gather(&self, plan: &[Option<usize>], rng: &mut ChaCha8Rng) -> Self {
        let shape = self.shape();
        let plane = shape.plane();
        let src = self.bits();
        let mut bits = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            let base = c * plane;
            bits.extend(plan.iter().map(|p| match p {
                Some(k) => src[base + k],
                None => rng.gen::<bool>() as u8,
            }));
        }
        SignalMap::from_raw(shape, bits)
    }

    fn flip(&self, p: f64, rng: &mut ChaCha8Rng) -> Self {
        let bits = self
            .bits()
            .iter()
            .map(|&b| if rng.gen::<f64>() < p { 1 - b } else { b })
            .collect();
        SignalMap::from_raw(self.shape(), bits)
    }
}

impl Grid for LatentTensor {
    fn grid_shape(&self) -> Shape {
        self.shape()
    }

    fn gather(&self, plan: &[Option<usize>], rng: &mut ChaCha8Rng) -> Self {
        let shape = self.shape();
        let plane = shape.plane();
        let src = self.data();
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            let base = c * plane;
            data.extend(plan.iter().map(|p| match p {
                Some(k) => src[base + k],
                None => {
                    let v: f64 = StandardNormal.sample(rng);
                    v as f32
                }
            }));
        }
        LatentTensor::from_raw(shape, data)
    }

    fn flip(&self, p: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = self
            .data()
            .iter()
            .map(|&v| if rng.gen::<f64>() < p { -v } else { v })
            .collect();
        LatentTensor::from_raw(self.shape(), data)
    }
}

/// Applies `t` to a latent or signal map. Deterministic for a fixed seed.
pub fn apply_transform<G: Grid + Clone>(x: &G, t: &TransformSpec) -> Result<G> {
    t.kind.validate()?;
    let mut rng = t.rng();
    Ok(apply_kind(x, &t.kind, &mut rng))
}

fn apply_kind<G: Grid + Clone>(x: &G, kind: &TransformKind, rng: &mut ChaCha8Rng) -> G {
    let shape = x.grid_shape();
    match kind {
        TransformKind::Identity => x.clone(),
        TransformKind::Rotate { angle } => x.gather(&rotation_plan(shape, *angle), rng),
        TransformKind::CropRescale { area_ratio } => {
            let window = CropWindow::draw(shape, *area_ratio, rng);
            x.gather(&window.crop_plan(shape), rng)
        }
        TransformKind::SignFlip { p } => x.flip(*p, rng),
        TransformKind::Compose(parts) => parts
            .iter()
            .fold(x.clone(), |acc, part| apply_kind(&acc, part, rng)),
    }
}

/// Undoes the geometric part of `t` given its parameters: rotation by the
/// opposite angle, or pasting a crop back into its window.
pub fn inverse_transform_estimate<G: Grid + Clone>(x: &G, t: &TransformSpec) -> Result<G> {
    t.kind.validate()?;
    let shape = x.grid_shape();
    let mut rng = t.rng();
    match &t.kind {
        TransformKind::Identity => Ok(x.clone()),
        TransformKind::Rotate { angle } => Ok(x.gather(&rotation_plan(shape, -angle), &mut rng)),
        TransformKind::CropRescale { area_ratio } => {
            // Same seed, same window as the forward transform.
            let window = CropWindow::draw(shape, *area_ratio, &mut rng);
            Ok(x.gather(&window.paste_plan(shape), &mut rng))
        }
        other => Err(Error::NotInvertible(other.name())),
    }
}

fn exact_trig(angle: f64) -> (f64, f64) {
    let r = angle.rem_euclid(360.0);
    match r {
        r if r == 0.0 => (1.0, 0.0),
        r if r == 90.0 => (0.0, 1.0),
        r if r == 180.0 => (-1.0, 0.0),
        r if r == 270.0 => (0.0, -1.0),
        _ => {
            let rad = angle.to_radians();
            (rad.cos(), rad.sin())
        }
    }
}

/// Pull mapping for a rotation about `(w/2, h/2)`: every destination cell
/// center is rotated back onto the source grid and rounded down.
fn rotation_plan(shape: Shape, angle: f64) -> Vec<Option<usize>> {
    let (w, h) = (shape.width, shape.height);
    let (cos, sin) = exact_trig(angle);
    let (ci, cj) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut plan = Vec::with_capacity(w * h);
    for i in 0..w {
        let di = i as f64 + 0.5 - ci;
        for j in 0..h {
            let dj = j as f64 + 0.5 - cj;
            let sj = (cos * dj - sin * di + cj).floor();
            let si = (sin * dj + cos * di + ci).floor();
            let inside = si >= 0.0 && sj >= 0.0 && si < w as f64 && sj < h as f64;
            plan.push(inside.then(|| si as usize * h + sj as usize));
        }
    }
    plan
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CropWindow {
    top: usize,
    left: usize,
    rows: usize,
    cols: usize,
}

impl CropWindow {
    fn draw(shape: Shape, area_ratio: f64, rng: &mut ChaCha8Rng) -> Self {
        let side = area_ratio.sqrt();
        let extent = |n: usize| ((side * n as f64).round() as usize).clamp(1, n);
        let (rows, cols) = (extent(shape.width), extent(shape.height));
        let top = rng.gen_range(0..=shape.width - rows);
        let left = rng.gen_range(0..=shape.height - cols);
        CropWindow {
            top,
            left,
            rows,
            cols,
        }
    }

    /// Nearest-neighbor upscale of the window to the full plane.
    fn crop_plan(&self, shape: Shape) -> Vec<Option<usize>> {
        let (w, h) = (shape.width, shape.height);
        let mut plan = Vec::with_capacity(w * h);
        for i in 0..w {
            let si = self.top + (2 * i + 1) * self.rows / (2 * w);
            for j in 0..h {
                let sj = self.left + (2 * j + 1) * self.cols / (2 * h);
                plan.push(Some(si * h + sj));
            }
        }
        plan
    }

    /// Nearest-neighbor downscale of the full plane back into the window.
    fn paste_plan(&self, shape: Shape) -> Vec<Option<usize>> {
        let (w, h) = (shape.width, shape.height);
        let mut plan = Vec::with_capacity(w * h);
        for i in 0..w {
            let inside_i = i >= self.top && i < self.top + self.rows;
            for j in 0..h {
                let inside_j = j >= self.left && j < self.left + self.cols;
                plan.push((inside_i && inside_j).then(|| {
                    let si = (2 * (i - self.top) + 1) * w / (2 * self.rows);
                    let sj = (2 * (j - self.left) + 1) * h / (2 * self.cols);
                    si * h + sj
                }));
            }
        }
        plan
    }
}
