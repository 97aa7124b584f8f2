//! Regularised canonical correlation analysis between sheet (x) and
//! audio (y) embeddings.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::geometry::Modality;

/// Learned linear maps into the shared canonical space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcaProjection {
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    /// `(dx, k)` row-major.
    pub proj_x: Vec<f64>,
    /// `(dy, k)` row-major.
    pub proj_y: Vec<f64>,
    pub dim: usize,
    /// Canonical correlations, descending, in `[0, 1]`.
    pub correlations: Vec<f64>,
}

impl CcaProjection {
    pub fn input_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Sheet => self.mean_x.len(),
            Modality::Audio => self.mean_y.len(),
        }
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn centered(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = a.nrows() as f64;
    let mean: Vec<f64> = (0..a.ncols()).map(|j| a.column(j).sum() / n).collect();
    let c = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] - mean[j]);
    (c, mean)
}

fn inv_sqrt(c: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(c);
    let d = eig.eigenvalues.map(|v| 1.0 / v.max(1e-12).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Fits CCA on paired rows of `x` and `y`. `reg` is added to the diagonal
/// of both covariance matrices. The number of components is
/// `min(dx, dy)`.
pub fn fit_cca(x: &Array2<f64>, y: &Array2<f64>, reg: f64) -> Result<CcaProjection> {
    let n = x.nrows();
    if n != y.nrows() {
        return Err(argument("x and y must have the same number of rows"));
    }
    if n <= x.ncols().max(y.ncols()) {
        return Err(Error::Rank(format!(
            "CCA needs more pairs than dimensions ({n} pairs, {} and {} dims)",
            x.ncols(),
            y.ncols()
        )));
    }
    if reg < 0.0 || !reg.is_finite() {
        return Err(argument("regulariser must be non-negative"));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(argument("CCA input contains non-finite values"));
    }
    let (xc, mean_x) = centered(&to_dmatrix(x));
    let (yc, mean_y) = centered(&to_dmatrix(y));
    let dx = xc.ncols();
    let dy = yc.ncols();
    let denom = (n - 1) as f64;
    let cxx = xc.transpose() * &xc / denom + DMatrix::identity(dx, dx) * reg;
    let cyy = yc.transpose() * &yc / denom + DMatrix::identity(dy, dy) * reg;
    let cxy = xc.transpose() * &yc / denom;
    let wx = inv_sqrt(cxx);
    let wy = inv_sqrt(cyy);
    let t = &wx * cxy * &wy;
    let svd = t.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let k = dx.min(dy);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    order.truncate(k);
    let px = &wx * DMatrix::from_fn(dx, k, |i, j| u[(i, order[j])]);
    let py = &wy * DMatrix::from_fn(dy, k, |i, j| vt[(order[j], i)]);
    let correlations = order
        .iter()
        .map(|&j| svd.singular_values[j].clamp(0.0, 1.0))
        .collect();
    let row_major = |m: &DMatrix<f64>| -> Vec<f64> {
        (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)])
            .collect()
    };
    Ok(CcaProjection {
        mean_x,
        mean_y,
        proj_x: row_major(&px),
        proj_y: row_major(&py),
        dim: k,
        correlations,
    })
}

/// Projects rows of one modality into the canonical space.
pub fn apply_cca(z: &Array2<f64>, modality: Modality, p: &CcaProjection) -> Result<Array2<f64>> {
    let (mean, proj) = match modality {
        Modality::Sheet => (&p.mean_x, &p.proj_x),
        Modality::Audio => (&p.mean_y, &p.proj_y),
    };
    let d = mean.len();
    if z.ncols() != d {
        return Err(argument(format!(
            "CCA expects {d}-dimensional {modality} input, got {}",
            z.ncols()
        )));
    }
    let w = Array2::from_shape_vec((d, p.dim), proj.clone())
        .map_err(|_| argument("corrupt CCA projection"))?;
    let mut centered = z.clone();
    for mut row in centered.rows_mut() {
        for (v, m) in row.iter_mut().zip(mean) {
            *v -= m;
        }
    }
    Ok(centered.dot(&w))
}
