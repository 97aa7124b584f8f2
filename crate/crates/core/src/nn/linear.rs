use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis, Ix1, Ix2};

use super::{uniform_array, Param, Real, Visitor};
use crate::seed::Rng;

/// Affine map `y = x W^T + b` on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F: Real> {
    /// (out, in)
    pub weight: Param<F, Ix2>,
    pub bias: Param<F, Ix1>,
}

impl<F: Real> Linear<F> {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = (3.0 / input as f64).sqrt();
        Self {
            weight: Param::new(uniform_array(Ix2(output, input), bound, rng)),
            bias: Param::new(Array1::zeros(output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = Array2::zeros((x.nrows(), self.output_dim()));
        general_mat_mul(F::one(), x, &self.weight.value.t(), F::zero(), &mut y);
        y += &self.bias.value;
        y
    }

    /// Accumulates gradients; returns dL/dx.
    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        general_mat_mul(F::one(), &dy.t(), x, F::one(), &mut self.weight.grad);
        self.bias.grad += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.value)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, F>) {
        f(&format!("{prefix}.weight"), self.weight.view_mut());
        f(&format!("{prefix}.bias"), self.bias.view_mut());
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::array;

    #[test]
    fn affine_identity() {
        let mut rng = seed::stream(0, "l");
        let mut l = Linear::<f64>::new(3, 2, &mut rng);
        l.bias.value = array![0.5, -1.0];
        let a = array![[1.0, 2.0, 3.0]];
        let b = array![[-0.5, 0.25, 4.0]];
        let sum = l.forward(&(&a + &b));
        let parts = l.forward(&a) + l.forward(&b) - &l.bias.value;
        for (x, y) in sum.iter().zip(parts.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        l.bias.value.fill(0.0);
        assert!(l.forward(&Array2::zeros((1, 3))).iter().all(|v| *v == 0.0));
    }
}
