//! Minimal dense/convolutional building blocks with hand-written backward
//! passes, generic over `f32` (training) and `f64` (gradient checks).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;

pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    // Four partial sums let the compiler vectorize the reduction.
    let mut acc = [T::zero(); 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += x[4 * c + k] * y[4 * c + k];
        }
    }
    let mut tail = T::zero();
    for i in 4 * chunks..x.len() {
        tail += x[i] * y[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `target`, computed
/// without forming the probability.
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `grad` wherever the post-activation value is not positive.
pub fn relu_backward<T: Scalar>(activated: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Square-kernel 2-D convolution geometry (weights live elsewhere).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl Conv2d {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Source pixel for patch row `(ky, kx)` at output `(oy, ox)`.
    #[inline]
    fn source(&self, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.in_h && ix < self.in_w).then_some((iy, ix))
    }

    /// Patch matrix of shape `[in_channels·k·k][out_h·out_w]`.
    pub fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let (oh, ow, p) = (self.out_h(), self.out_w(), self.positions());
        let mut col = vec![T::zero(); self.patch_len() * p];
        for ci in 0..self.in_channels {
            let plane = &input[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (ci * self.kernel + ky) * self.kernel + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            if let Some((iy, ix)) = self.source(ky, kx, oy, ox) {
                                dst[oy * ow + ox] = plane[iy * self.in_w + ix];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Scalar>(&self, dcol: &[T], dinput: &mut [T]) {
        let (oh, ow, p) = (self.out_h(), self.out_w(), self.positions());
        for ci in 0..self.in_channels {
            let plane = &mut dinput[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (ci * self.kernel + ky) * self.kernel + kx;
                    let src = &dcol[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            if let Some((iy, ix)) = self.source(ky, kx, oy, ox) {
                                plane[iy * self.in_w + ix] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Returns the output and the patch matrix needed by `backward`.
    pub fn forward<T: Scalar>(&self, weight: &[T], bias: &[T], input: &[T]) -> (Vec<T>, Vec<T>) {
        let col = self.im2col(input);
        let p = self.positions();
        let k = self.patch_len();
        let mut out = vec![T::zero(); self.out_channels * p];
        for co in 0..self.out_channels {
            let dst = &mut out[co * p..(co + 1) * p];
            dst.iter_mut().for_each(|v| *v = bias[co]);
            for (r, &w) in weight[co * k..(co + 1) * k].iter().enumerate() {
                if w != T::zero() {
                    axpy(w, &col[r * p..(r + 1) * p], dst);
                }
            }
        }
        (out, col)
    }

    /// Accumulates parameter gradients and, when requested, returns the
    /// gradient with respect to the input.
    pub fn backward<T: Scalar>(
        &self,
        weight: &[T],
        col: &[T],
        dout: &[T],
        gweight: &mut [T],
        gbias: &mut [T],
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let p = self.positions();
        let k = self.patch_len();
        for co in 0..self.out_channels {
            let d = &dout[co * p..(co + 1) * p];
            gbias[co] += d.iter().copied().sum::<T>();
            for r in 0..k {
                gweight[co * k + r] += dot(d, &col[r * p..(r + 1) * p]);
            }
        }
        if !want_input_grad {
            return None;
        }
        let mut dcol = vec![T::zero(); k * p];
        for co in 0..self.out_channels {
            let d = &dout[co * p..(co + 1) * p];
            for r in 0..k {
                axpy(weight[co * k + r], d, &mut dcol[r * p..(r + 1) * p]);
            }
        }
        let mut dinput = vec![T::zero(); self.in_channels * self.in_h * self.in_w];
        self.col2im(&dcol, &mut dinput);
        Some(dinput)
    }
}

/// Fully connected layer geometry; weight is row-major `[outputs][inputs]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn weight_len(&self) -> usize {
        self.inputs * self.outputs
    }

    /// Batched forward; each weight row is read once per batch.
    pub fn forward<T: Scalar>(&self, weight: &[T], bias: &[T], xs: &[Vec<T>]) -> Vec<Vec<T>> {
        let mut ys = vec![vec![T::zero(); self.outputs]; xs.len()];
        for o in 0..self.outputs {
            let row = &weight[o * self.inputs..(o + 1) * self.inputs];
            for (x, y) in xs.iter().zip(ys.iter_mut()) {
                y[o] = bias[o] + dot(row, x);
            }
        }
        ys
    }

    pub fn backward<T: Scalar>(
        &self,
        weight: &[T],
        xs: &[Vec<T>],
        dys: &[Vec<T>],
        gweight: &mut [T],
        gbias: &mut [T],
        want_input_grad: bool,
    ) -> Option<Vec<Vec<T>>> {
        let mut dxs = want_input_grad.then(|| vec![vec![T::zero(); self.inputs]; xs.len()]);
        for o in 0..self.outputs {
            let row = &weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut gweight[o * self.inputs..(o + 1) * self.inputs];
            for (n, (x, dy)) in xs.iter().zip(dys).enumerate() {
                let d = dy[o];
                if d == T::zero() {
                    continue;
                }
                gbias[o] += d;
                axpy(d, x, grow);
                if let Some(dxs) = dxs.as_mut() {
                    axpy(d, row, &mut dxs[n]);
                }
            }
        }
        dxs
    }
}

/// `U(−1/√fan_in, 1/√fan_in)` initialization for a weight or bias block.
pub fn uniform_init<T: Scalar, R: Rng>(len: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| T::of(rng.gen_range(-bound..=bound))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over a list of parameter blocks.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, blocks: &[Vec<f32>]) -> Self {
        let zeros = || blocks.iter().map(|b| vec![0.0; b.len()]).collect();
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (zeros(), zeros()),
        };
        Optimizer { kind, lr, step: 0, m, v }
    }

    pub fn step(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>]) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = self.lr as f32;
                for (p, g) in params.iter_mut().zip(grads) {
                    axpy(-lr, g, p);
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - Self::BETA1.powi(t);
                let c2 = 1.0 - Self::BETA2.powi(t);
                let step = (self.lr * c2.sqrt() / c1) as f32;
                let (b1, b2, eps) = (Self::BETA1 as f32, Self::BETA2 as f32, (Self::EPS * c2.sqrt()) as f32);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        p[i] -= step * m[i] / (v[i].sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(c: &Conv2d, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; c.out_channels * c.out_h() * c.out_w()];
        for co in 0..c.out_channels {
            for oy in 0..c.out_h() {
                for ox in 0..c.out_w() {
                    let mut acc = b[co];
                    for ci in 0..c.in_channels {
                        for ky in 0..c.kernel {
                            for kx in 0..c.kernel {
                                let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < c.in_h && (ix as usize) < c.in_w {
                                    let wi = ((co * c.in_channels + ci) * c.kernel + ky) * c.kernel + kx;
                                    acc += w[wi] * x[(ci * c.in_h + iy as usize) * c.in_w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * c.out_h() + oy) * c.out_w() + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, h, w) in [(1, 5, 6), (2, 7, 8), (2, 8, 8)] {
            let c = Conv2d { in_channels: 3, out_channels: 2, kernel: 3, stride, pad: 1, in_h: h, in_w: w };
            let wt: Vec<f64> = uniform_init(c.weight_len(), 27, &mut rng);
            let b: Vec<f64> = uniform_init(2, 27, &mut rng);
            let x: Vec<f64> = uniform_init(3 * h * w, 1, &mut rng);
            let (out, _) = c.forward(&wt, &b, &x);
            let want = direct_conv(&c, &wt, &b, &x);
            for (a, e) in out.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dout, conv(x)> is linear in x and w, so its gradients are exact.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 2, pad: 1, in_h: 6, in_w: 5 };
        let wt: Vec<f64> = uniform_init(c.weight_len(), 18, &mut rng);
        let b = vec![0.0; 3];
        let x: Vec<f64> = uniform_init(60, 1, &mut rng);
        let dout: Vec<f64> = uniform_init(3 * c.out_h() * c.out_w(), 1, &mut rng);
        let (_, col) = c.forward(&wt, &b, &x);
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; 3];
        let dx = c.backward(&wt, &col, &dout, &mut gw, &mut gb, true).unwrap();
        let f = |wt: &[f64], x: &[f64]| dot(&c.forward(wt, &b, x).0, &dout);
        for i in [0, 7, 20, 33, 59] {
            let mut xp = x.clone();
            xp[i] += 1.0;
            assert!((f(&wt, &xp) - f(&wt, &x) - dx[i]).abs() < 1e-10);
        }
        for i in [0, 5, 17, 53] {
            let mut wp = wt.clone();
            wp[i] += 1.0;
            assert!((f(&wp, &x) - f(&wt, &x) - gw[i]).abs() < 1e-10);
        }
        assert!((gb[1] - dout[c.out_h() * c.out_w()..2 * c.out_h() * c.out_w()].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn linear_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Linear { inputs: 5, outputs: 3 };
        let w: Vec<f64> = uniform_init(15, 5, &mut rng);
        let b: Vec<f64> = uniform_init(3, 5, &mut rng);
        let xs: Vec<Vec<f64>> = (0..2).map(|_| uniform_init(5, 1, &mut rng)).collect();
        let dys: Vec<Vec<f64>> = (0..2).map(|_| uniform_init(3, 1, &mut rng)).collect();
        let ys = l.forward(&w, &b, &xs);
        assert!((ys[1][2] - (b[2] + dot(&w[10..15], &xs[1]))).abs() < 1e-15);
        let mut gw = vec![0.0; 15];
        let mut gb = vec![0.0; 3];
        let dxs = l.backward(&w, &xs, &dys, &mut gw, &mut gb, true).unwrap();
        assert!((gw[7] - (dys[0][1] * xs[0][2] + dys[1][1] * xs[1][2])).abs() < 1e-15);
        assert!((gb[0] - (dys[0][0] + dys[1][0])).abs() < 1e-15);
        let want: f64 = (0..3).map(|o| w[o * 5 + 4] * dys[1][o]).sum();
        assert!((dxs[1][4] - want).abs() < 1e-15);
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) == 1.0);
        assert!((bce_with_logits(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_with_logits(3.0, 0.0) - (1.0 + 3.0f64.exp()).ln()).abs() < 1e-12);
        assert!(bce_with_logits(-1000.0, 1.0).is_finite());
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut p = vec![vec![1.0f32, -1.0]];
        let g = vec![vec![0.5f32, -2.0]];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &p);
        opt.step(&mut p, &g);
        // The first Adam step has magnitude lr regardless of gradient scale.
        assert!((p[0][0] - 0.9).abs() < 1e-6 && (p[0][1] + 0.9).abs() < 1e-6);
        let mut q = vec![vec![1.0f32]];
        Optimizer::new(OptimizerKind::Sgd, 0.1, &q).step(&mut q, &[vec![2.0]]);
        assert!((q[0][0] - 0.8).abs() < 1e-7);
    }
}
