//! Convolution (im2col + GEMM) fused with batch normalisation and ELU.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Ix1, Ix2, ShapeBuilder};

use super::{elu_grad_from_output, uniform_array, Param, Real, Visitor};
use crate::parallel;
use crate::seed::Rng;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Unrolls one `(c, h, w)` sample into `(c*k*k, h*w)` columns for a
/// stride-1 convolution with symmetric zero padding.
pub fn im2col<F: Real>(x: &[F], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [F]) {
    im2col_rows(x, c, h, w, k, pad, 0, h, cols);
}

/// [`im2col`] restricted to output rows `y0..y1`; `cols` is
/// `(c*k*k, (y1-y0)*w)`.
#[allow(clippy::too_many_arguments)]
fn im2col_rows<F: Real>(x: &[F], c: usize, h: usize, w: usize, k: usize, pad: usize, y0: usize, y1: usize, cols: &mut [F]) {
    let hw = h * w;
    let bw = (y1 - y0) * w;
    debug_assert_eq!(cols.len(), c * k * k * bw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * bw..(row + 1) * bw];
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(x0 as isize) as usize;
                for y in y0..y1 {
                    let iy = y as isize + dy;
                    let drow = &mut dst[(y - y0) * w..(y - y0 + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    drow[..x0].fill(F::zero());
                    drow[x1..].fill(F::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    drow[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a sample.
pub fn col2im<F: Real>(cols: &[F], c: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [F]) {
    col2im_rows(cols, c, h, w, k, pad, 0, h, x);
}

#[allow(clippy::too_many_arguments)]
fn col2im_rows<F: Real>(cols: &[F], c: usize, h: usize, w: usize, k: usize, pad: usize, y0: usize, y1: usize, x: &mut [F]) {
    let hw = h * w;
    let bw = (y1 - y0) * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * bw..(row + 1) * bw];
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(x0 as isize) as usize;
                for y in y0..y1 {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s0 = (x0 as isize + dx) as usize;
                    let so = (y - y0) * w;
                    for (d, s) in drow[s0..s0 + (x1 - x0)].iter_mut().zip(&src[so + x0..so + x1]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Column-buffer budget (elements) for one band of output rows.
const BAND_ELEMS: usize = 1 << 15;

fn band_rows(kk: usize, h: usize, w: usize) -> usize {
    (BAND_ELEMS / (kk * w).max(1)).clamp(1, h)
}

/// Input channels up to which the direct kernels beat im2col + GEMM.
const DIRECT_MAX_IN: usize = 4;

/// Valid `(out_x0, out_x1, in_offset)` column span for a tap shifted by `d`.
fn span(w: usize, d: isize) -> (usize, usize) {
    let x0 = (-d).max(0) as usize;
    let x1 = (w as isize - d).min(w as isize).max(x0 as isize) as usize;
    (x0, x1)
}

/// Direct stride-1 convolution of one sample into `out` (`(co, h, w)`).
#[allow(clippy::too_many_arguments)]
fn conv_direct<F: Real>(weight: &[F], x: &[F], c: usize, h: usize, w: usize, k: usize, co: usize, out: &mut [F]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    out.fill(F::zero());
    for o in 0..co {
        for y in 0..h {
            let orow = &mut out[o * hw + y * w..o * hw + (y + 1) * w];
            for ci in 0..c {
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = &x[ci * hw + iy as usize * w..ci * hw + (iy as usize + 1) * w];
                    for kx in 0..k {
                        let d = kx as isize - pad;
                        let (x0, x1) = span(w, d);
                        let wv = weight[o * c * k * k + (ci * k + ky) * k + kx];
                        let s0 = (x0 as isize + d) as usize;
                        F::axpy(wv, &irow[s0..s0 + (x1 - x0)], &mut orow[x0..x1]);
                    }
                }
            }
        }
    }
}

/// Weight gradient (accumulated into `dw`) and optional input gradient of
/// [`conv_direct`] for one sample.
#[allow(clippy::too_many_arguments)]
fn conv_direct_backward<F: Real>(
    weight: &[F],
    x: &[F],
    g: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    co: usize,
    dw: &mut [F],
    mut dx: Option<&mut [F]>,
) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for o in 0..co {
        for y in 0..h {
            let grow = &g[o * hw + y * w..o * hw + (y + 1) * w];
            for ci in 0..c {
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ib = ci * hw + iy as usize * w;
                    for kx in 0..k {
                        let d = kx as isize - pad;
                        let (x0, x1) = span(w, d);
                        let s0 = (x0 as isize + d) as usize;
                        let widx = o * c * k * k + (ci * k + ky) * k + kx;
                        let irow = &x[ib + s0..ib + s0 + (x1 - x0)];
                        dw[widx] += F::dot(&grow[x0..x1], irow);
                        if let Some(dx) = dx.as_deref_mut() {
                            F::axpy(weight[widx], &grow[x0..x1], &mut dx[ib + s0..ib + s0 + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }
}

/// Convolution without bias (batch norm follows), then batch norm, then ELU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnElu<F: Real> {
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    /// (out_ch, in_ch * k * k)
    pub weight: Param<F, Ix2>,
    pub gamma: Param<F, Ix1>,
    pub beta: Param<F, Ix1>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

/// What the backward pass needs besides the layer input and output.
#[derive(Debug)]
pub struct ConvCache<F> {
    z: Array4<F>,
    mean: Vec<F>,
    inv_std: Vec<F>,
}

impl<F: Real> ConvBnElu<F> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut Rng) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = (3.0 / fan_in as f64).sqrt();
        Self {
            kernel,
            in_ch,
            out_ch,
            weight: Param::new(uniform_array(Ix2(out_ch, fan_in), bound, rng)),
            gamma: Param::new(Array1::ones(out_ch)),
            beta: Param::new(Array1::zeros(out_ch)),
            running_mean: Array1::zeros(out_ch),
            running_var: Array1::ones(out_ch),
        }
    }

    fn direct(&self) -> bool {
        self.kernel > 1 && self.in_ch <= DIRECT_MAX_IN
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn conv(&self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (k, pad, hw) = (self.kernel, self.pad(), h * w);
        let kk = c * k * k;
        let rows = band_rows(kk, h, w);
        let xs = x.as_slice().expect("standard layout");
        let mut z = Array4::<F>::zeros((n, self.out_ch, h, w));
        let wv = self.weight.value.view();
        let out_ch = self.out_ch;
        let direct = self.direct();
        parallel::for_each_chunk_mut_init(
            z.as_slice_mut().unwrap(),
            out_ch * hw,
            || vec![F::zero(); if k == 1 || direct { 0 } else { kk * rows * w }],
            |cols, i, out| {
                let sample = &xs[i * c * hw..(i + 1) * c * hw];
                if direct {
                    conv_direct(wv.as_slice().unwrap(), sample, c, h, w, k, out_ch, out);
                    return;
                }
                if k == 1 {
                    let b = ArrayView2::from_shape((c, hw), sample).unwrap();
                    let mut o = ArrayViewMut2::from_shape((out_ch, hw), out).unwrap();
                    general_mat_mul(F::one(), &wv, &b, F::zero(), &mut o);
                    return;
                }
                let mut y0 = 0;
                while y0 < h {
                    let y1 = (y0 + rows).min(h);
                    let bw = (y1 - y0) * w;
                    let buf = &mut cols[..kk * bw];
                    im2col_rows(sample, c, h, w, k, pad, y0, y1, buf);
                    let b = ArrayView2::from_shape((kk, bw), &buf[..]).unwrap();
                    let span = (out_ch - 1) * hw + bw;
                    let mut o = ArrayViewMut2::from_shape((out_ch, bw).strides((hw, 1)), &mut out[y0 * w..y0 * w + span]).unwrap();
                    general_mat_mul(F::one(), &wv, &b, F::zero(), &mut o);
                    y0 = y1;
                }
            },
        );
        z
    }

    /// Per-channel mean and biased variance over batch and space.
    fn batch_stats(z: &Array4<F>) -> (Vec<f64>, Vec<f64>) {
        let (n, c, h, w) = z.dim();
        let hw = h * w;
        let zs = z.as_slice().unwrap();
        let stats = parallel::map_range(c, |ch| {
            let (mut sum, mut sq) = (0f64, 0f64);
            for i in 0..n {
                let plane = &zs[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                let (s1, s2) = F::block_sums(plane, plane, F::zero());
                sum += s1;
                sq += s2;
            }
            let m = (n * hw) as f64;
            let mean = sum / m;
            (mean, (sq / m - mean * mean).max(0.0))
        });
        stats.into_iter().unzip()
    }

    fn normalize_elu(&self, z: &Array4<F>, mean: &[F], inv_std: &[F]) -> Array4<F> {
        let (_, c, h, w) = z.dim();
        let hw = h * w;
        let mut a = z.clone();
        let gamma = self.gamma.value.as_slice().unwrap();
        let beta = self.beta.value.as_slice().unwrap();
        parallel::for_each_chunk_mut(a.as_slice_mut().unwrap(), c * hw, |_, s| {
            for ch in 0..c {
                let scale = gamma[ch] * inv_std[ch];
                let shift = beta[ch] - mean[ch] * scale;
                F::affine_elu(&mut s[ch * hw..(ch + 1) * hw], scale, shift);
            }
        });
        a
    }

    /// Training-mode forward: batch statistics, running-stat update.
    pub fn forward_train(&mut self, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let z = self.conv(x);
        let (n, _, h, w) = z.dim();
        let m = (n * h * w) as f64;
        let (mean64, var64) = Self::batch_stats(&z);
        let mean: Vec<F> = mean64.iter().map(|v| F::lit(*v)).collect();
        let inv_std: Vec<F> = var64.iter().map(|v| F::lit(1.0 / (v + BN_EPS).sqrt())).collect();
        let a = self.normalize_elu(&z, &mean, &inv_std);
        let mom = F::lit(BN_MOMENTUM);
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for ch in 0..self.out_ch {
            self.running_mean[ch] = mom * self.running_mean[ch] + (F::one() - mom) * mean[ch];
            self.running_var[ch] =
                mom * self.running_var[ch] + (F::one() - mom) * F::lit(var64[ch] * unbias);
        }
        (a, ConvCache { z, mean, inv_std })
    }

    /// Inference-mode forward with running statistics.
    pub fn forward_infer(&self, x: &Array4<F>) -> Array4<F> {
        let z = self.conv(x);
        let inv_std: Vec<F> = self
            .running_var
            .iter()
            .map(|v| F::one() / (*v + F::lit(BN_EPS)).sqrt())
            .collect();
        self.normalize_elu(&z, self.running_mean.as_slice().unwrap(), &inv_std)
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_dx` is set.
    pub fn backward(
        &mut self,
        x: &Array4<F>,
        a: &Array4<F>,
        cache: ConvCache<F>,
        da: Array4<F>,
        need_dx: bool,
    ) -> Option<Array4<F>> {
        let ConvCache { z, mean, inv_std } = cache;
        let (n, c, h, w) = z.dim();
        let hw = h * w;
        let m = F::lit((n * hw) as f64);

        // through ELU: dy = da * elu'(a)
        let mut dy = da;
        {
            let ys = dy.as_slice_mut().unwrap();
            let as_ = a.as_slice().unwrap();
            parallel::for_each_chunk_mut(ys, c * hw, |i, s| {
                let src = &as_[i * c * hw..(i + 1) * c * hw];
                for (d, av) in s.iter_mut().zip(src) {
                    *d = *d * elu_grad_from_output(*av);
                }
            });
        }

        // batch-norm reductions per channel
        let zs = z.as_slice().unwrap();
        let ys = dy.as_slice().unwrap();
        let sums = parallel::map_range(c, |ch| {
            let (mut s_dy, mut s_dzc) = (0f64, 0f64);
            for i in 0..n {
                let off = (i * c + ch) * hw;
                let (a, b) = F::block_sums(&ys[off..off + hw], &zs[off..off + hw], mean[ch]);
                s_dy += a;
                s_dzc += b;
            }
            (s_dy, s_dzc * inv_std[ch].to_f64().unwrap())
        });
        for (ch, (s_dy, s_dyx)) in sums.iter().enumerate() {
            self.beta.grad[ch] = self.beta.grad[ch] + F::lit(*s_dy);
            self.gamma.grad[ch] = self.gamma.grad[ch] + F::lit(*s_dyx);
        }

        // dz = gamma * inv_std / m * (m * dy - sum(dy) - xhat * sum(dy * xhat))
        let gamma = self.gamma.value.as_slice().unwrap().to_vec();
        let mut dz = dy;
        parallel::for_each_chunk_mut(dz.as_slice_mut().unwrap(), c * hw, |i, s| {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let k = gamma[ch] * inv_std[ch] / m;
                let s_dy = F::lit(sums[ch].0);
                let s_dyx = F::lit(sums[ch].1);
                for (d, zv) in s[ch * hw..(ch + 1) * hw].iter_mut().zip(&zs[off..off + hw]) {
                    let xh = (*zv - mean[ch]) * inv_std[ch];
                    *d = k * (m * *d - s_dy - xh * s_dyx);
                }
            }
        });

        self.conv_backward(x, &dz, need_dx)
    }

    fn conv_backward(&mut self, x: &Array4<F>, dz: &Array4<F>, need_dx: bool) -> Option<Array4<F>> {
        let (n, c, h, w) = x.dim();
        let (k, pad, hw) = (self.kernel, self.pad(), h * w);
        let kk = c * k * k;
        let xs = x.as_slice().unwrap();
        let dzs = dz.as_slice().unwrap();
        let out_ch = self.out_ch;
        let wv = self.weight.value.view();

        let rows = band_rows(kk, h, w);
        let direct = self.direct();
        let buf_len = if direct { 0 } else { kk * rows * w };
        let partials = parallel::map_range_init(
            n,
            || (vec![F::zero(); buf_len], vec![F::zero(); buf_len]),
            |(cols, dcols), i| {
                let sample = &xs[i * c * hw..(i + 1) * c * hw];
                let gall = &dzs[i * out_ch * hw..(i + 1) * out_ch * hw];
                let mut dw = Array2::<F>::zeros((out_ch, kk));
                if direct {
                    let mut dxs = need_dx.then(|| vec![F::zero(); c * hw]);
                    conv_direct_backward(
                        wv.as_slice().unwrap(),
                        sample,
                        gall,
                        c,
                        h,
                        w,
                        k,
                        out_ch,
                        dw.as_slice_mut().unwrap(),
                        dxs.as_deref_mut(),
                    );
                    return (dw, dxs);
                }
                if k == 1 {
                    let b = ArrayView2::from_shape((c, hw), sample).unwrap();
                    let g = ArrayView2::from_shape((out_ch, hw), gall).unwrap();
                    general_mat_mul(F::one(), &g, &b.t(), F::zero(), &mut dw);
                    let dx = need_dx.then(|| {
                        let mut d = Array2::<F>::zeros((c, hw));
                        general_mat_mul(F::one(), &wv.t(), &g, F::zero(), &mut d);
                        d.into_raw_vec_and_offset().0
                    });
                    return (dw, dx);
                }
                let mut dxs = if need_dx { Some(vec![F::zero(); c * hw]) } else { None };
                let mut y0 = 0;
                while y0 < h {
                    let y1 = (y0 + rows).min(h);
                    let bw = (y1 - y0) * w;
                    let buf = &mut cols[..kk * bw];
                    im2col_rows(sample, c, h, w, k, pad, y0, y1, buf);
                    let b = ArrayView2::from_shape((kk, bw), &buf[..]).unwrap();
                    let span = (out_ch - 1) * hw + bw;
                    let g = ArrayView2::from_shape((out_ch, bw).strides((hw, 1)), &gall[y0 * w..y0 * w + span]).unwrap();
                    general_mat_mul(F::one(), &g, &b.t(), F::one(), &mut dw);
                    if let Some(dxs) = dxs.as_mut() {
                        let dbuf = &mut dcols[..kk * bw];
                        let mut d = ArrayViewMut2::from_shape((kk, bw), dbuf).unwrap();
                        general_mat_mul(F::one(), &wv.t(), &g, F::zero(), &mut d);
                        col2im_rows(&dcols[..kk * bw], c, h, w, k, pad, y0, y1, dxs);
                    }
                    y0 = y1;
                }
                (dw, dxs)
            },
        );

        let mut dx_all = if need_dx { Some(Vec::with_capacity(n * c * hw)) } else { None };
        for (dw, dx) in partials {
            self.weight.grad += &dw;
            if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                all.extend_from_slice(&dx);
            }
        }
        dx_all.map(|v| Array4::from_shape_vec((n, c, h, w), v).unwrap())
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, F>) {
        f(&format!("{prefix}.weight"), self.weight.view_mut());
        f(&format!("{prefix}.gamma"), self.gamma.view_mut());
        f(&format!("{prefix}.beta"), self.beta.view_mut());
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.gamma.zero_grad();
        self.beta.zero_grad();
    }
}
