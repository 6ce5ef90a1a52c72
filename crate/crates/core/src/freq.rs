//! Zero-bit frequency watermark: a ring pattern written into the masked
//! low-frequency bins of each channel's centered spectrum.
//!
//! Transform convention: unnormalized forward DFT, `1/(w·h)` on the inverse,
//! zero frequency shifted to `(⌊w/2⌋, ⌊h/2⌋)`.

use std::cell::RefCell;
use std::collections::BTreeMap;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::latent::{sample_gaussian, LatentTensor, Shape, SignalMap};
use crate::spatial::inject_spatial;

/// Complex `c × w × h` array in centered layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    shape: Shape,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(shape: Shape, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                actual: data.len(),
            });
        }
        Ok(Spectrum { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, channel: usize, i: usize, j: usize) -> Complex64 {
        self.data[self.shape.index(channel, i, j)]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place 2D DFT of one `w × h` plane (rows of length `h`).
fn fft2_plane(plane: &mut [Complex64], w: usize, h: usize, inverse: bool) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let (row_fft, col_fft) = if inverse {
            (planner.plan_fft_inverse(h), planner.plan_fft_inverse(w))
        } else {
            (planner.plan_fft_forward(h), planner.plan_fft_forward(w))
        };
        row_fft.process(plane);
        let mut column = vec![Complex64::default(); w];
        for j in 0..h {
            for i in 0..w {
                column[i] = plane[i * h + j];
            }
            col_fft.process(&mut column);
            for i in 0..w {
                plane[i * h + j] = column[i];
            }
        }
    });
}

/// Raw index that lands at centered position `k` along an axis of length `n`.
#[inline]
fn unshifted(k: usize, n: usize) -> usize {
    (k + n - n / 2) % n
}

pub fn dft2_centered(z: &LatentTensor) -> Spectrum {
    let shape = z.shape();
    let (w, h) = (shape.width, shape.height);
    let mut data = vec![Complex64::default(); shape.len()];
    let mut plane = vec![Complex64::default(); shape.plane()];
    for c in 0..shape.channels {
        let src = &z.data()[c * shape.plane()..(c + 1) * shape.plane()];
        for (dst, &v) in plane.iter_mut().zip(src) {
            *dst = Complex64::new(v as f64, 0.0);
        }
        fft2_plane(&mut plane, w, h, false);
        let out = &mut data[c * shape.plane()..(c + 1) * shape.plane()];
        for i in 0..w {
            let ri = unshifted(i, w);
            for j in 0..h {
                out[i * h + j] = plane[ri * h + unshifted(j, h)];
            }
        }
    }
    Spectrum { shape, data }
}

/// Inverse of [`dft2_centered`]. Returns the real part together with the
/// largest discarded imaginary magnitude.
pub fn idft2_centered(spectrum: &Spectrum) -> (LatentTensor, f64) {
    let shape = spectrum.shape;
    let (w, h) = (shape.width, shape.height);
    let scale = 1.0 / shape.plane() as f64;
    let mut data = Vec::with_capacity(shape.len());
    let mut plane = vec![Complex64::default(); shape.plane()];
    let mut residue = 0.0f64;
    for c in 0..shape.channels {
        let src = &spectrum.data[c * shape.plane()..(c + 1) * shape.plane()];
        for i in 0..w {
            let ri = unshifted(i, w);
            for j in 0..h {
                plane[ri * h + unshifted(j, h)] = src[i * h + j];
            }
        }
        fft2_plane(&mut plane, w, h, true);
        for v in &plane {
            residue = residue.max((v.im * scale).abs());
            data.push((v.re * scale) as f32);
        }
    }
    (LatentTensor::from_raw(shape, data), residue)
}

/// `⌊i − n/2⌋` with `n/2` taken exactly.
#[inline]
fn centered_offset(i: usize, n: usize) -> i64 {
    (2 * i as i64 - n as i64).div_euclid(2)
}

/// Squared ring radius `r²_{i,j} = ⌊i − w/2⌋² + ⌊j − h/2⌋²`.
pub fn ring_radius_sq(i: usize, j: usize, w: usize, h: usize) -> i64 {
    let di = centered_offset(i, w);
    let dj = centered_offset(j, h);
    di * di + dj * dj
}

/// Circular mask: set where `r² < radius²`.
pub fn circular_mask(shape: Shape, radius: u32) -> Vec<bool> {
    let limit = (radius as i64).pow(2);
    let mut plane = Vec::with_capacity(shape.plane());
    for i in 0..shape.width {
        for j in 0..shape.height {
            plane.push(ring_radius_sq(i, j, shape.width, shape.height) < limit);
        }
    }
    plane.repeat(shape.channels)
}

/// Ring pattern ω^f and its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqPattern {
    pattern: Spectrum,
    mask: Vec<bool>,
    ring_radius: u32,
    freq_seed: u64,
}

impl FreqPattern {
    pub fn pattern(&self) -> &Spectrum {
        &self.pattern
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn ring_radius(&self) -> u32 {
        self.ring_radius
    }

    pub fn freq_seed(&self) -> u64 {
        self.freq_seed
    }

    pub fn shape(&self) -> Shape {
        self.pattern.shape
    }

    pub fn masked_bins(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Averages the spectrum of `|ε|·(2s−1)` over every class of equal `r²`,
/// channel by channel.
pub fn build_ring_pattern(shape: Shape, s: &SignalMap, freq_seed: u64, ring_radius: u32) -> Result<FreqPattern> {
    if s.shape() != shape {
        return Err(Error::shape_mismatch(shape, s.shape()));
    }
    let eps = sample_gaussian(shape, freq_seed)?;
    let carrier = inject_spatial(&eps, s)?;
    Ok(ring_pattern_from_carrier(&carrier, freq_seed, ring_radius))
}

pub(crate) fn ring_pattern_from_carrier(carrier: &LatentTensor, freq_seed: u64, ring_radius: u32) -> FreqPattern {
    let shape = carrier.shape();
    let (w, h) = (shape.width, shape.height);
    let spectrum = dft2_centered(carrier);
    let radii: Vec<i64> = (0..w)
        .flat_map(|i| (0..h).map(move |j| ring_radius_sq(i, j, w, h)))
        .collect();
    let mut data = vec![Complex64::default(); shape.len()];
    for c in 0..shape.channels {
        let plane = &spectrum.data[c * shape.plane()..(c + 1) * shape.plane()];
        let mut classes: BTreeMap<i64, (Complex64, usize)> = BTreeMap::new();
        for (k, &r2) in radii.iter().enumerate() {
            let entry = classes.entry(r2).or_default();
            entry.0 += plane[k];
            entry.1 += 1;
        }
        let means: BTreeMap<i64, Complex64> = classes
            .into_iter()
            .map(|(r2, (sum, n))| (r2, sum / n as f64))
            .collect();
        let out = &mut data[c * shape.plane()..(c + 1) * shape.plane()];
        for (k, r2) in radii.iter().enumerate() {
            out[k] = means[r2];
        }
    }
    FreqPattern {
        pattern: Spectrum { shape, data },
        mask: circular_mask(shape, ring_radius),
        ring_radius,
        freq_seed,
    }
}

/// Above this, the imaginary part dropped by the inverse transform is worth
/// a warning.
pub const IMAG_RESIDUE_WARN: f64 = 1e-3;

/// `F⁻¹(ẑ·(1−M) + ω^f·M)`, real part.
pub fn inject_freq(z: &LatentTensor, fp: &FreqPattern) -> Result<LatentTensor> {
    let (out, residue) = inject_freq_with_residue(z, fp)?;
    if residue > IMAG_RESIDUE_WARN {
        log::warn!("frequency injection discarded imaginary residue {residue:.3e}");
    }
    Ok(out)
}

pub fn inject_freq_with_residue(z: &LatentTensor, fp: &FreqPattern) -> Result<(LatentTensor, f64)> {
    if z.shape() != fp.shape() {
        return Err(Error::shape_mismatch(fp.shape(), z.shape()));
    }
    Ok(idft2_centered(&masked_replace(&dft2_centered(z), fp)))
}

pub(crate) fn masked_replace(spectrum: &Spectrum, fp: &FreqPattern) -> Spectrum {
    let data = spectrum
        .data
        .iter()
        .zip(&fp.pattern.data)
        .zip(&fp.mask)
        .map(|((&x, &p), &m)| if m { p } else { x })
        .collect();
    Spectrum {
        shape: spectrum.shape,
        data,
    }
}

/// `r_f = −‖(F(z̃) − ω^f)·M‖²` over complex magnitudes.
pub fn score_freq(z: &LatentTensor, fp: &FreqPattern) -> Result<f64> {
    if z.shape() != fp.shape() {
        return Err(Error::shape_mismatch(fp.shape(), z.shape()));
    }
    let spectrum = dft2_centered(z);
    Ok(score_spectrum(&spectrum, fp))
}

pub(crate) fn score_spectrum(spectrum: &Spectrum, fp: &FreqPattern) -> f64 {
    -spectrum
        .data
        .iter()
        .zip(&fp.pattern.data)
        .zip(&fp.mask)
        .filter(|(_, &m)| m)
        .map(|((x, p), _)| (x - p).norm_sqr())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{random_signal_with, sign_map};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Direct O(n²) centered DFT of one plane.
    fn direct_dft(values: &[f64], w: usize, h: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); w * h];
        for ci in 0..w {
            for cj in 0..h {
                let (u, v) = (unshifted(ci, w), unshifted(cj, h));
                let mut acc = Complex64::default();
                for i in 0..w {
                    for j in 0..h {
                        let phase = -2.0 * PI * ((u * i) as f64 / w as f64 + (v * j) as f64 / h as f64);
                        acc += values[i * h + j] * Complex64::from_polar(1.0, phase);
                    }
                }
                out[ci * h + cj] = acc;
            }
        }
        out
    }

    #[test]
    fn round_trip_within_tolerance() {
        let z = sample_gaussian(Shape::DEFAULT, 1).unwrap();
        let (back, residue) = idft2_centered(&dft2_centered(&z));
        assert!(back.max_abs_diff(&z) < 1e-5);
        assert!(residue < 1e-9);
    }

    #[test]
    fn constant_map_concentrates_in_center_bin() {
        let shape = Shape::new(2, 8, 8).unwrap();
        let z = LatentTensor::new(shape, vec![1.5; shape.len()]).unwrap();
        let spec = dft2_centered(&z);
        for c in 0..2 {
            for i in 0..8 {
                for j in 0..8 {
                    let expected = if (i, j) == (4, 4) { 1.5 * 64.0 } else { 0.0 };
                    assert!((spec.get(c, i, j) - Complex64::new(expected, 0.0)).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let shape = Shape::new(1, 4, 4).unwrap();
        let mut values = vec![0.0f32; 16];
        values[0] = 1.0;
        let z = LatentTensor::new(shape, values.clone()).unwrap();
        let spec = dft2_centered(&z);
        let oracle = direct_dft(&values.iter().map(|&v| v as f64).collect::<Vec<_>>(), 4, 4);
        for (a, b) in spec.data().iter().zip(&oracle) {
            assert!((a.norm() - 1.0).abs() < 1e-12);
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_dft_on_odd_sizes() {
        let shape = Shape::new(1, 5, 3).unwrap();
        let z = sample_gaussian(shape, 9).unwrap();
        let values: Vec<f64> = z.data().iter().map(|&v| v as f64).collect();
        let oracle = direct_dft(&values, 5, 3);
        for (a, b) in dft2_centered(&z).data().iter().zip(&oracle) {
            assert!((a - b).norm() < 1e-9);
        }
        let (back, _) = idft2_centered(&dft2_centered(&z));
        assert!(back.max_abs_diff(&z) < 1e-6);
    }

    #[test]
    fn parseval_with_unnormalized_forward() {
        let z = sample_gaussian(Shape::DEFAULT, 2).unwrap();
        let spatial: f64 = z.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let spectral = dft2_centered(&z).energy() / Shape::DEFAULT.plane() as f64;
        assert!(((spatial - spectral) / spatial).abs() < 1e-4);
    }

    #[test]
    fn mask_of_radius_four_has_45_bins() {
        // Lattice points with dx² + dy² < 16: 7 + 2·7 + 2·7 + 2·5 = 45.
        let oracle = (-4i64..=4)
            .flat_map(|a| (-4i64..=4).map(move |b| a * a + b * b))
            .filter(|&r2| r2 < 16)
            .count();
        assert_eq!(oracle, 45);
        let mask = circular_mask(Shape::new(1, 64, 64).unwrap(), 4);
        assert_eq!(mask.iter().filter(|&&m| m).count(), oracle);
        let full = circular_mask(Shape::DEFAULT, 4);
        assert_eq!(full.iter().filter(|&&m| m).count(), 4 * 45);
    }

    #[test]
    fn radius_uses_exact_half() {
        assert_eq!(ring_radius_sq(0, 0, 5, 5), 18);
        assert_eq!(ring_radius_sq(2, 2, 5, 5), 2);
        assert_eq!(ring_radius_sq(3, 2, 5, 5), 1);
        assert_eq!(ring_radius_sq(32, 32, 64, 64), 0);
        assert_eq!(ring_radius_sq(0, 32, 64, 64), 1024);
    }

    fn pattern(seed: u64) -> (SignalMap, FreqPattern) {
        let s = random_signal_with(Shape::DEFAULT, &mut ChaCha8Rng::seed_from_u64(seed));
        let fp = build_ring_pattern(Shape::DEFAULT, &s, seed, 4).unwrap();
        (s, fp)
    }

    #[test]
    fn equal_radius_bins_carry_identical_values() {
        let (_, fp) = pattern(3);
        let shape = fp.shape();
        for c in 0..shape.channels {
            let mut by_class: BTreeMap<i64, Complex64> = BTreeMap::new();
            for i in 0..shape.width {
                for j in 0..shape.height {
                    let r2 = ring_radius_sq(i, j, shape.width, shape.height);
                    let v = fp.pattern().get(c, i, j);
                    let first = *by_class.entry(r2).or_insert(v);
                    assert_eq!(first, v);
                }
            }
        }
    }

    #[test]
    fn ring_pattern_matches_bruteforce_on_4x4() {
        let shape = Shape::new(1, 4, 4).unwrap();
        let eps = [0.3, -1.2, 0.7, 2.0, -0.1, 0.5, -0.8, 1.1, 0.9, -0.4, 0.2, -1.5, 1.3, 0.6, -0.9, 0.05];
        let s = [1u8, 0, 1, 1, 0, 0, 1, 0, 1, 1, 0, 1, 0, 1, 1, 0];
        let carrier: Vec<f64> = eps
            .iter()
            .zip(&s)
            .map(|(e, &b)| (e as &f64).abs() * if b == 1 { 1.0 } else { -1.0 })
            .collect();
        let dft = direct_dft(&carrier, 4, 4);
        // radius class of centered position (i, j): (i−2)² + (j−2)²
        let r2 = |k: usize| ((k / 4) as i64 - 2).pow(2) + ((k % 4) as i64 - 2).pow(2);
        let expected: Vec<Complex64> = (0..16)
            .map(|k| {
                let members: Vec<usize> = (0..16).filter(|&m| r2(m) == r2(k)).collect();
                members.iter().map(|&m| dft[m]).sum::<Complex64>() / members.len() as f64
            })
            .collect();

        let carrier = LatentTensor::new(shape, carrier.iter().map(|&v| v as f32).collect()).unwrap();
        let fp = ring_pattern_from_carrier(&carrier, 0, 2);
        for (a, b) in fp.pattern().data().iter().zip(&expected) {
            assert!((a - b).norm() < 1e-5, "{a} vs {b}");
        }
        // r² < 4 → centre, its 4 axis neighbours and the 4 diagonals
        assert_eq!(fp.masked_bins(), 9);
    }

    #[test]
    fn masks_at_the_extremes() {
        let (_, fp) = pattern(4);
        let z = inject_spatial(&sample_gaussian(Shape::DEFAULT, 4).unwrap(), &pattern(4).0).unwrap();

        let mut none = fp.clone();
        none.mask.iter_mut().for_each(|m| *m = false);
        assert!(inject_freq(&z, &none).unwrap().max_abs_diff(&z) < 1e-5);

        let mut all = fp.clone();
        all.mask.iter_mut().for_each(|m| *m = true);
        let (expected, _) = idft2_centered(all.pattern());
        let z2 = sample_gaussian(Shape::DEFAULT, 44).unwrap();
        assert!(inject_freq(&z, &all).unwrap().max_abs_diff(&expected) < 1e-6);
        assert!(inject_freq(&z2, &all).unwrap().max_abs_diff(&expected) < 1e-6);
    }

    #[test]
    fn injection_only_touches_masked_bins() {
        let (s, fp) = pattern(5);
        let z = inject_spatial(&sample_gaussian(Shape::DEFAULT, 5).unwrap(), &s).unwrap();
        let before = dft2_centered(&z);
        let replaced = masked_replace(&before, &fp);
        for (k, &m) in fp.mask().iter().enumerate() {
            if m {
                assert_eq!(replaced.data()[k], fp.pattern().data()[k]);
            } else {
                assert_eq!(replaced.data()[k], before.data()[k]);
            }
        }
        let after = dft2_centered(&inject_freq(&z, &fp).unwrap());
        for (k, &m) in fp.mask().iter().enumerate() {
            if !m {
                assert!((after.data()[k] - before.data()[k]).norm() < 1e-2);
            }
        }
    }

    #[test]
    fn frequency_injection_preserves_most_signs() {
        let mut worst = 0.0f64;
        for seed in 0..100 {
            let (s, fp) = pattern(1000 + seed);
            let z = inject_spatial(&sample_gaussian(Shape::DEFAULT, seed).unwrap(), &s).unwrap();
            let out = inject_freq(&z, &fp).unwrap();
            let flips = sign_map(&out).hamming(&s) as f64 / s.bits().len() as f64;
            worst = worst.max(flips);
        }
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn score_is_zero_on_the_pattern_and_ignores_unmasked_bins() {
        let (s, fp) = pattern(6);
        let z = inject_spatial(&sample_gaussian(Shape::DEFAULT, 6).unwrap(), &s).unwrap();
        let marked = inject_freq(&z, &fp).unwrap();
        let exact = score_spectrum(&masked_replace(&dft2_centered(&marked), &fp), &fp);
        assert_eq!(exact, 0.0);
        assert!(score_freq(&marked, &fp).unwrap().abs() < 1e-6);

        // Perturb only unmasked bins: score unchanged.
        let spec = dft2_centered(&marked);
        let shifted: Vec<Complex64> = spec
            .data()
            .iter()
            .zip(fp.mask())
            .map(|(&x, &m)| if m { x } else { x + Complex64::new(3.0, -1.0) })
            .collect();
        let shifted = Spectrum::new(spec.shape(), shifted).unwrap();
        assert_eq!(score_spectrum(&shifted, &fp), score_spectrum(&spec, &fp));
    }
}
