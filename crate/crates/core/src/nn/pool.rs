//! 2x2 max pooling with floor semantics (odd trailing rows/columns dropped).

use ndarray::Array4;

use super::Real;
use crate::parallel;

/// Returns the pooled tensor and, per output cell, the flat input index of
/// its maximum (first maximum on ties).
pub fn max_pool2<F: Real>(x: &Array4<F>) -> (Array4<F>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.as_slice().expect("standard layout");
    let planes = parallel::map_range(n * c, |p| {
        let base = p * h * w;
        let mut vals = Vec::with_capacity(oh * ow);
        let mut idx = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * y + dy) * w + 2 * xx + dx;
                    if xs[j] > xs[best] {
                        best = j;
                    }
                }
                vals.push(xs[best]);
                idx.push(best as u32);
            }
        }
        (vals, idx)
    });
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for (v, i) in planes {
        out.extend(v);
        arg.extend(i);
    }
    (Array4::from_shape_vec((n, c, oh, ow), out).unwrap(), arg)
}

/// Routes output gradients back to the recorded maxima.
pub fn max_pool2_backward<F: Real>(
    dy: &Array4<F>,
    argmax: &[u32],
    input_shape: (usize, usize, usize, usize),
) -> Array4<F> {
    let mut dx = Array4::<F>::zeros(input_shape);
    let dxs = dx.as_slice_mut().unwrap();
    for (g, &i) in dy.iter().zip(argmax) {
        dxs[i as usize] = dxs[i as usize] + *g;
    }
    dx
}
