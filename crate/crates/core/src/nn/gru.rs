//! Unidirectional gated recurrent unit with zero initial state.
//!
//! Gate layout follows the usual (reset, update, new) stacking:
//! `r = σ(W_ir x + b_ir + W_hr h + b_hr)`,
//! `z = σ(W_iz x + b_iz + W_hz h + b_hz)`,
//! `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`,
//! `h' = (1 - z) ⊙ n + z ⊙ h`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Ix1, Ix2};

use super::{orthogonal, sigmoid, uniform_array, Param, Real, Visitor};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Gru<F: Real> {
    pub hidden: usize,
    /// (3H, input)
    pub w_ih: Param<F, Ix2>,
    /// (3H, H)
    pub w_hh: Param<F, Ix2>,
    pub b_ih: Param<F, Ix1>,
    pub b_hh: Param<F, Ix1>,
}

/// Per-step activations of one sequence.
#[derive(Debug)]
pub struct GruCache<F> {
    x: Array2<F>,
    h_prev: Array2<F>,
    r: Array2<F>,
    z: Array2<F>,
    n: Array2<F>,
    gh_n: Array2<F>,
}

impl<F: Real> Gru<F> {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = (3.0 / input as f64).sqrt();
        let mut w_hh = Array2::<F>::zeros((3 * hidden, hidden));
        for g in 0..3 {
            let q = orthogonal(hidden, rng);
            for i in 0..hidden {
                for j in 0..hidden {
                    w_hh[[g * hidden + i, j]] = F::lit(q[(i, j)]);
                }
            }
        }
        Self {
            hidden,
            w_ih: Param::new(uniform_array(Ix2(3 * hidden, input), bound, rng)),
            w_hh: Param::new(w_hh),
            b_ih: Param::new(Array1::zeros(3 * hidden)),
            b_hh: Param::new(Array1::zeros(3 * hidden)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.value.ncols()
    }

    /// One step from state `h` on the pre-computed input projection `gi`.
    fn step(&self, gi: ArrayView1<'_, F>, h: &Array1<F>) -> (Array1<F>, [Array1<F>; 4]) {
        let hs = self.hidden;
        let gh = self.w_hh.value.dot(h) + &self.b_hh.value;
        let r = (&gi.slice(s![..hs]) + &gh.slice(s![..hs])).mapv(sigmoid);
        let z = (&gi.slice(s![hs..2 * hs]) + &gh.slice(s![hs..2 * hs])).mapv(sigmoid);
        let gh_n = gh.slice(s![2 * hs..]).to_owned();
        let n = (&gi.slice(s![2 * hs..]) + &(&r * &gh_n)).mapv(|v| v.tanh());
        let h_new = (&z.mapv(|v| F::one() - v) * &n) + &(&z * h);
        (h_new, [r, z, n, gh_n])
    }

    fn input_projection(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        x.dot(&self.w_ih.value.t()) + &self.b_ih.value
    }

    /// Runs the sequence and returns the final hidden state.
    pub fn forward_infer(&self, x: ArrayView2<'_, F>) -> Array1<F> {
        let gi = self.input_projection(x);
        let mut h = Array1::zeros(self.hidden);
        for t in 0..x.nrows() {
            h = self.step(gi.row(t), &h).0;
        }
        h
    }

    pub fn forward_train(&self, x: ArrayView2<'_, F>) -> (Array1<F>, GruCache<F>) {
        let len = x.nrows();
        let hs = self.hidden;
        let gi = self.input_projection(x);
        let mut cache = GruCache {
            x: x.to_owned(),
            h_prev: Array2::zeros((len, hs)),
            r: Array2::zeros((len, hs)),
            z: Array2::zeros((len, hs)),
            n: Array2::zeros((len, hs)),
            gh_n: Array2::zeros((len, hs)),
        };
        let mut h = Array1::zeros(hs);
        for t in 0..len {
            cache.h_prev.row_mut(t).assign(&h);
            let (h_new, [r, z, n, gh_n]) = self.step(gi.row(t), &h);
            cache.r.row_mut(t).assign(&r);
            cache.z.row_mut(t).assign(&z);
            cache.n.row_mut(t).assign(&n);
            cache.gh_n.row_mut(t).assign(&gh_n);
            h = h_new;
        }
        (h, cache)
    }

    /// Back-propagates through time from the gradient of the final state.
    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(&mut self, cache: &GruCache<F>, dh_last: &Array1<F>) -> Array2<F> {
        let len = cache.x.nrows();
        let hs = self.hidden;
        let mut dgi_all = Array2::<F>::zeros((len, 3 * hs));
        let mut dgh_all = Array2::<F>::zeros((len, 3 * hs));
        let mut dh = dh_last.clone();
        let one = F::one();
        for t in (0..len).rev() {
            let r = cache.r.row(t);
            let z = cache.z.row(t);
            let n = cache.n.row(t);
            let gh_n = cache.gh_n.row(t);
            let h_prev = cache.h_prev.row(t);
            let mut dgi = dgi_all.row_mut(t);
            for j in 0..hs {
                let d = dh[j];
                let dn_pre = d * (one - z[j]) * (one - n[j] * n[j]);
                let dz_pre = d * (h_prev[j] - n[j]) * z[j] * (one - z[j]);
                let dr_pre = dn_pre * gh_n[j] * r[j] * (one - r[j]);
                dgi[j] = dr_pre;
                dgi[hs + j] = dz_pre;
                dgi[2 * hs + j] = dn_pre;
                dgh_all[[t, j]] = dr_pre;
                dgh_all[[t, hs + j]] = dz_pre;
                dgh_all[[t, 2 * hs + j]] = dn_pre * r[j];
            }
            let dgh = dgh_all.row(t);
            let mut dh_prev = &dh * &z;
            dh_prev += &self.w_hh.value.t().dot(&dgh);
            dh = dh_prev;
        }
        self.w_hh.grad += &dgh_all.t().dot(&cache.h_prev);
        self.b_hh.grad += &dgh_all.sum_axis(Axis(0));
        self.w_ih.grad += &dgi_all.t().dot(&cache.x);
        self.b_ih.grad += &dgi_all.sum_axis(Axis(0));
        dgi_all.dot(&self.w_ih.value)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, F>) {
        f(&format!("{prefix}.w_ih"), self.w_ih.view_mut());
        f(&format!("{prefix}.w_hh"), self.w_hh.view_mut());
        f(&format!("{prefix}.b_ih"), self.b_ih.view_mut());
        f(&format!("{prefix}.b_hh"), self.b_hh.view_mut());
    }

    pub fn zero_grad(&mut self) {
        self.w_ih.zero_grad();
        self.w_hh.zero_grad();
        self.b_ih.zero_grad();
        self.b_hh.zero_grad();
    }
}
