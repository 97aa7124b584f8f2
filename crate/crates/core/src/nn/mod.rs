//! Minimal differentiable layers with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference checks.

pub mod conv;
pub mod gru;
pub mod linear;
pub mod pool;

use std::fmt::Debug;
use std::iter::Sum;

use ndarray::{Array, Dimension};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::seed::Rng;

pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Send
    + Sync
    + Debug
    + Default
    + Sum
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    /// `y += a * x`.
    fn axpy(a: Self, x: &[Self], y: &mut [Self]) {
        kernels::axpy(a, x, y)
    }

    /// Inner product with eight-lane partial sums.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        kernels::dot(a, b)
    }

    /// `x <- elu(scale * x + shift)` over a slice.
    fn affine_elu(xs: &mut [Self], scale: Self, shift: Self) {
        for v in xs {
            *v = elu(*v * scale + shift);
        }
    }

    /// `(Σ a, Σ a * (b - shift))`, summed in short native-precision blocks
    /// whose totals are carried in f64.
    fn block_sums(a: &[Self], b: &[Self], shift: Self) -> (f64, f64) {
        kernels::block_sums(a, b, shift)
    }
}

impl Real for f32 {
    #[cfg(target_arch = "x86_64")]
    fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
        if kernels::has_avx2_fma() {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { kernels::axpy_avx2(a, x, y) }
        } else {
            kernels::axpy(a, x, y)
        }
    }

    #[cfg(target_arch = "x86_64")]
    fn dot(a: &[f32], b: &[f32]) -> f32 {
        if kernels::has_avx2_fma() {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { kernels::dot_avx2(a, b) }
        } else {
            kernels::dot(a, b)
        }
    }

    #[cfg(target_arch = "x86_64")]
    fn block_sums(a: &[f32], b: &[f32], shift: f32) -> (f64, f64) {
        if kernels::has_avx2_fma() {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { kernels::block_sums_avx2(a, b, shift) }
        } else {
            kernels::block_sums(a, b, shift)
        }
    }

    #[cfg(target_arch = "x86_64")]
    fn affine_elu(xs: &mut [f32], scale: f32, shift: f32) {
        if kernels::has_avx2_fma() {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { kernels::affine_elu_avx2(xs, scale, shift) }
        } else {
            for v in xs {
                *v = elu(*v * scale + shift);
            }
        }
    }
}

impl Real for f64 {}

mod kernels {
    use super::Real;

    pub(super) fn axpy<F: Real>(a: F, x: &[F], y: &mut [F]) {
        for (yv, xv) in y.iter_mut().zip(x) {
            *yv += a * *xv;
        }
    }

    pub(super) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
        let mut acc = [F::zero(); 8];
        let ca = a.chunks_exact(8);
        let cb = b.chunks_exact(8);
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for l in 0..8 {
                acc[l] += x[l] * y[l];
            }
        }
        let mut s = acc.iter().fold(F::zero(), |s, v| s + *v);
        for (x, y) in ra.iter().zip(rb) {
            s += *x * *y;
        }
        s
    }

    const BLOCK: usize = 256;

    #[inline(always)]
    pub(super) fn block_sums<F: Real>(a: &[F], b: &[F], shift: F) -> (f64, f64) {
        let (mut s1, mut s2) = (0f64, 0f64);
        for (ba, bb) in a.chunks(BLOCK).zip(b.chunks(BLOCK)) {
            let mut l1 = [F::zero(); 8];
            let mut l2 = [F::zero(); 8];
            let ca = ba.chunks_exact(8);
            let cb = bb.chunks_exact(8);
            let (ra, rb) = (ca.remainder(), cb.remainder());
            for (x, y) in ca.zip(cb) {
                for l in 0..8 {
                    l1[l] += x[l];
                    l2[l] += x[l] * (y[l] - shift);
                }
            }
            let mut t1 = l1.iter().fold(F::zero(), |s, v| s + *v);
            let mut t2 = l2.iter().fold(F::zero(), |s, v| s + *v);
            for (x, y) in ra.iter().zip(rb) {
                t1 += *x;
                t2 += *x * (*y - shift);
            }
            s1 += t1.to_f64().unwrap();
            s2 += t2.to_f64().unwrap();
        }
        (s1, s2)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn block_sums_avx2(a: &[f32], b: &[f32], shift: f32) -> (f64, f64) {
        block_sums(a, b, shift)
    }

    #[cfg(target_arch = "x86_64")]
    pub(super) fn has_avx2_fma() -> bool {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn axpy_avx2(a: f32, x: &[f32], y: &mut [f32]) {
        for (yv, xv) in y.iter_mut().zip(x) {
            *yv = a.mul_add(*xv, *yv);
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot_avx2(a: &[f32], b: &[f32]) -> f32 {
        let mut acc = [0f32; 16];
        let ca = a.chunks_exact(16);
        let cb = b.chunks_exact(16);
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for l in 0..16 {
                acc[l] = x[l].mul_add(y[l], acc[l]);
            }
        }
        let mut s = acc.iter().sum::<f32>();
        for (x, y) in ra.iter().zip(rb) {
            s = x.mul_add(*y, s);
        }
        s
    }

    /// Polynomial `exp` (about 1 ulp) that vectorises; valid for finite inputs.
    #[inline(always)]
    fn exp_poly(x: f32) -> f32 {
        let x = x.clamp(-87.0, 88.0);
        let fx = (x * std::f32::consts::LOG2_E + 0.5).floor();
        let r = x - fx * 0.693_359_4 + fx * 2.121_944_4e-4;
        let z = r * r;
        let p = 1.987_569_1e-4f32;
        let p = p.mul_add(r, 1.398_199_9e-3);
        let p = p.mul_add(r, 8.333_452e-3);
        let p = p.mul_add(r, 4.166_579_6e-2);
        let p = p.mul_add(r, 1.666_666_5e-1);
        let p = p.mul_add(r, 5.000_000_1e-1);
        let y = p.mul_add(z, r) + 1.0;
        y * f32::from_bits(((fx as i32 + 127) as u32) << 23)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn affine_elu_avx2(xs: &mut [f32], scale: f32, shift: f32) {
        for v in xs {
            let t = v.mul_add(scale, shift);
            let e = exp_poly(t.min(0.0)) - 1.0;
            *v = if t > 0.0 { t } else { e };
        }
    }

}

/// A trainable array and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F, D: Dimension> {
    pub value: Array<F, D>,
    pub grad: Array<F, D>,
}

impl<F: Real, D: Dimension> Param<F, D> {
    pub fn new(value: Array<F, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn view_mut(&mut self) -> ParamMut<'_, F> {
        ParamMut {
            shape: self.value.shape().to_vec(),
            value: self.value.as_slice_mut().expect("standard layout"),
            grad: self.grad.as_slice_mut().expect("standard layout"),
        }
    }
}

/// Flat mutable access to one parameter.
pub struct ParamMut<'a, F> {
    pub shape: Vec<usize>,
    pub value: &'a mut [F],
    pub grad: &'a mut [F],
}

/// Callback used to walk parameters in a fixed order.
pub type Visitor<'v, F> = dyn FnMut(&str, ParamMut<'_, F>) + 'v;

pub(crate) fn uniform_array<F: Real, D: Dimension>(
    shape: D,
    bound: f64,
    rng: &mut Rng,
) -> Array<F, D> {
    Array::from_shape_simple_fn(shape, || F::lit(rng.random_range(-bound..=bound)))
}

/// Square orthogonal matrix (QR of a Gaussian matrix, sign-corrected).
pub(crate) fn orthogonal(n: usize, rng: &mut Rng) -> nalgebra::DMatrix<f64> {
    let g = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

#[inline]
pub(crate) fn elu<F: Real>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        x.exp() - F::one()
    }
}

/// ELU derivative expressed through its output.
#[inline]
pub(crate) fn elu_grad_from_output<F: Real>(a: F) -> F {
    if a > F::zero() {
        F::one()
    } else {
        a + F::one()
    }
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut rng = seed::stream(1, "t");
        let q = orthogonal(6, &mut rng);
        let eye = &q.transpose() * &q;
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((eye[(i, j)] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn elu_and_its_gradient() {
        assert_eq!(elu(2.0f64), 2.0);
        assert!((elu(-1.0f64) - (-1.0f64).exp_m1()).abs() < 1e-15);
        let x = -0.7f64;
        assert!((elu_grad_from_output(elu(x)) - x.exp()).abs() < 1e-15);
    }
}
