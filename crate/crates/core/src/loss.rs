//! Cosine-distance triplet (hinge) loss over in-batch negatives.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{argument, Result};
use crate::nn::Real;

/// `1 - cos(u, v)`; a zero vector is at distance 1 from everything.
pub fn cosine_distance<F: Real>(u: ArrayView1<'_, F>, v: ArrayView1<'_, F>) -> F {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == F::zero() || nv == F::zero() {
        log::warn!("cosine distance with a zero-norm vector; using d = 1");
        return F::one();
    }
    let c = u.dot(&v) / (nu * nv);
    F::one() - c.max(-F::one()).min(F::one())
}

/// Negative indices for anchor `i`: the next `k` rows, cyclically.
pub fn negatives(i: usize, batch: usize, k: usize) -> impl Iterator<Item = usize> {
    (1..=k).map(move |o| (i + o) % batch)
}

fn check(x: &Array2<impl Real>, y: &Array2<impl Real>, alpha: f64, k: usize) -> Result<()> {
    let b = x.nrows();
    if x.dim() != y.dim() {
        return Err(argument("anchor and candidate batches differ in shape"));
    }
    if b < 2 {
        return Err(argument("batch must hold at least two pairs"));
    }
    if k == 0 || k >= b {
        return Err(argument(format!("K must be in 1..={}, got {k}", b - 1)));
    }
    if !(alpha > 0.0) {
        return Err(argument("margin must be positive"));
    }
    Ok(())
}

fn unit_rows<F: Real>(x: &Array2<F>) -> (Array2<F>, Array1<F>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|n| *n == F::zero()) {
        log::warn!("zero-norm embedding in batch; its distances are fixed at 1");
    }
    let mut u = x.clone();
    for (mut row, n) in u.rows_mut().into_iter().zip(norms.iter()) {
        if *n > F::zero() {
            row.mapv_inplace(|v| v / *n);
        } else {
            row.fill(F::zero());
        }
    }
    (u, norms)
}

/// Backpropagates through row normalisation.
fn unit_backward<F: Real>(u: &Array2<F>, norms: &Array1<F>, du: &Array2<F>) -> Array2<F> {
    let mut dx = du.clone();
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let n = norms[i];
        if n == F::zero() {
            row.fill(F::zero());
            continue;
        }
        let ui = u.row(i);
        let proj = ui.dot(&du.row(i));
        row.zip_mut_with(&ui, |g, uv| *g = (*g - *uv * proj) / n);
    }
    dx
}

/// One-direction loss with anchors from `x` and negatives from `y`,
/// together with its gradients with respect to `x` and `y`.
pub fn triplet_loss_grad<F: Real>(
    x: &Array2<F>,
    y: &Array2<F>,
    alpha: f64,
    k: usize,
) -> Result<(F, Array2<F>, Array2<F>)> {
    check(x, y, alpha, k)?;
    let b = x.nrows();
    let a = F::lit(alpha);
    let (ux, nx) = unit_rows(x);
    let (uy, ny) = unit_rows(y);
    let sim = ux.dot(&uy.t());
    let mut dsim = Array2::<F>::zeros((b, b));
    let mut loss = F::zero();
    for i in 0..b {
        for j in negatives(i, b, k) {
            let h = a - sim[[i, i]] + sim[[i, j]];
            if h > F::zero() {
                loss += h;
                dsim[[i, i]] -= F::one();
                dsim[[i, j]] += F::one();
            }
        }
    }
    let dux = dsim.dot(&uy);
    let duy = dsim.t().dot(&ux);
    Ok((loss, unit_backward(&ux, &nx, &dux), unit_backward(&uy, &ny, &duy)))
}

/// Σ_i Σ_k max(0, α + d(x_i, y_i) − d(x_i, y_k)) over `K` in-batch negatives.
pub fn triplet_loss<F: Real>(x: &Array2<F>, y: &Array2<F>, alpha: f64, k: usize) -> Result<F> {
    triplet_loss_grad(x, y, alpha, k).map(|(l, _, _)| l)
}

/// Training objective: the loss summed over both retrieval directions.
pub fn symmetric_loss_grad<F: Real>(
    sheet: &Array2<F>,
    audio: &Array2<F>,
    alpha: f64,
    k: usize,
) -> Result<(F, Array2<F>, Array2<F>)> {
    let (l1, ds1, da1) = triplet_loss_grad(sheet, audio, alpha, k)?;
    let (l2, da2, ds2) = triplet_loss_grad(audio, sheet, alpha, k)?;
    Ok((l1 + l2, ds1 + ds2, da1 + da2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn oracle(x: &Array2<f64>, y: &Array2<f64>, alpha: f64, k: usize) -> f64 {
        let b = x.nrows();
        let mut total = 0.0;
        for i in 0..b {
            let pos = cosine_distance(x.row(i), y.row(i));
            for o in 1..=k {
                let j = (i + o) % b;
                let neg = cosine_distance(x.row(i), y.row(j));
                total += (alpha + pos - neg).max(0.0);
            }
        }
        total
    }

    #[test]
    fn distance_examples() {
        let v = array![0.3, -2.0, 1.0];
        assert!(cosine_distance::<f64>(v.view(), v.view()).abs() < 1e-12);
        assert_eq!(cosine_distance::<f64>(array![1.0, 0.0].view(), array![0.0, 1.0].view()), 1.0);
        let w = -&v;
        assert!((cosine_distance::<f64>(v.view(), w.view()) - 2.0).abs() < 1e-12);
        assert_eq!(cosine_distance::<f64>(v.view(), array![0.0, 0.0, 0.0].view()), 1.0);
    }

    #[test]
    fn satisfied_margin_gives_zero() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(triplet_loss::<f64>(&x, &x, 0.5, 1).unwrap(), 0.0);
    }

    #[test]
    fn constant_distances_sum_over_anchors() {
        // Two anchors, each with d(pos)=0.6 and d(neg)=0.4 by construction.
        let t = |d: f64| (1.0_f64 - d).acos();
        let x = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let pos = t(0.6);
        let neg = t(0.4);
        // y0 at angle `pos` from x0 and `neg` from x1, y1 likewise mirrored.
        let (c0, c1) = (pos.cos(), neg.cos());
        let y = array![
            [c0, (1.0 - c0 * c0 - c1 * c1).sqrt(), c1],
            [c1, (1.0 - c0 * c0 - c1 * c1).sqrt(), c0]
        ];
        let l = triplet_loss::<f64>(&x, &y, 0.2, 1).unwrap();
        assert!((l - 0.8).abs() < 1e-12, "{l}");
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = seed::stream(17, "loss");
        for _ in 0..100 {
            let b = rng.random_range(2..=16);
            let d = rng.random_range(2..=64);
            let k = rng.random_range(1..b);
            let x = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
            let y = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
            let v = triplet_loss::<f64>(&x, &y, 0.7, k).unwrap();
            assert!((v - oracle(&x, &y, 0.7, k)).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seed::stream(2, "loss-grad");
        let x = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let (_, gs, ga) = symmetric_loss_grad::<f64>(&x, &y, 1.5, 3).unwrap();
        let f = |x: &Array2<f64>, y: &Array2<f64>| symmetric_loss_grad(x, y, 1.5, 3).unwrap().0;
        let h = 1e-6;
        for idx in ndarray::indices((4, 3)) {
            let (i, j) = idx;
            let mut p = x.clone();
            let mut m = x.clone();
            p[[i, j]] += h;
            m[[i, j]] -= h;
            assert!(((f(&p, &y) - f(&m, &y)) / (2.0 * h) - gs[[i, j]]).abs() < 1e-6);
            let mut p = y.clone();
            let mut m = y.clone();
            p[[i, j]] += h;
            m[[i, j]] -= h;
            assert!(((f(&x, &p) - f(&x, &m)) / (2.0 * h) - ga[[i, j]]).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_invalid_arguments() {
        let x = Array2::<f64>::ones((3, 2));
        assert!(triplet_loss(&x, &x, 0.7, 3).is_err());
        assert!(triplet_loss(&x, &x, 0.7, 0).is_err());
        assert!(triplet_loss(&x, &x, 0.0, 1).is_err());
        assert!(triplet_loss(&x.slice(ndarray::s![..1, ..]).to_owned(), &x.slice(ndarray::s![..1, ..]).to_owned(), 0.7, 1).is_err());
    }

    proptest! {
        #[test]
        fn non_negative_and_scale_invariant(
            vals in proptest::collection::vec(-1.0f64..1.0, 24),
            scale in 0.01f64..100.0,
            row in 0usize..4,
        ) {
            let x = Array2::from_shape_vec((4, 3), vals[..12].to_vec()).unwrap();
            let y = Array2::from_shape_vec((4, 3), vals[12..].to_vec()).unwrap();
            let l = triplet_loss(&x, &y, 0.7, 3).unwrap();
            prop_assert!(l >= 0.0);
            let mut xs = x.clone();
            xs.row_mut(row).mapv_inplace(|v| v * scale);
            let ls = triplet_loss(&xs, &y, 0.7, 3).unwrap();
            prop_assert!((l - ls).abs() < 1e-9);
        }

        #[test]
        fn zero_iff_margins_hold(vals in proptest::collection::vec(-1.0f64..1.0, 24), alpha in 0.05f64..1.0) {
            let x = Array2::from_shape_vec((4, 3), vals[..12].to_vec()).unwrap();
            let y = Array2::from_shape_vec((4, 3), vals[12..].to_vec()).unwrap();
            let l = triplet_loss(&x, &y, alpha, 3).unwrap();
            let all_hold = (0..4).all(|i| negatives(i, 4, 3).all(|j| {
                cosine_distance(x.row(i), y.row(j)) >= cosine_distance(x.row(i), y.row(i)) + alpha
            }));
            prop_assert_eq!(l == 0.0, all_hold);
        }
    }
}
