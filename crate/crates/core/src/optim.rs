//! Adam with a mutable learning rate.

use crate::nn::{ParamMut, Real};

#[derive(Debug, Clone)]
struct Slot<F> {
    name: String,
    m: Vec<F>,
    v: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    slots: Vec<Slot<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Starts a new update; call [`Adam::update`] for every parameter in a
    /// fixed order afterwards.
    pub fn begin_step(&mut self) -> AdamStep<'_, F> {
        self.step += 1;
        let t = self.step;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        AdamStep {
            lr_t: F::lit(self.lr * c2.sqrt() / c1),
            b1: F::lit(self.beta1),
            b2: F::lit(self.beta2),
            eps: F::lit(self.eps * c2.sqrt()),
            slots: &mut self.slots,
            index: 0,
        }
    }
}

pub struct AdamStep<'a, F> {
    lr_t: F,
    b1: F,
    b2: F,
    eps: F,
    slots: &'a mut Vec<Slot<F>>,
    index: usize,
}

impl<F: Real> AdamStep<'_, F> {
    pub fn update(&mut self, name: &str, p: ParamMut<'_, F>) {
        if self.index == self.slots.len() {
            self.slots.push(Slot {
                name: name.to_string(),
                m: vec![F::zero(); p.value.len()],
                v: vec![F::zero(); p.value.len()],
            });
        }
        let slot = &mut self.slots[self.index];
        assert!(
            slot.name == name && slot.m.len() == p.value.len(),
            "optimizer parameter order changed at {name}"
        );
        self.index += 1;
        let one = F::one();
        for (((w, g), m), v) in p
            .value
            .iter_mut()
            .zip(p.grad.iter())
            .zip(slot.m.iter_mut())
            .zip(slot.v.iter_mut())
        {
            *m = self.b1 * *m + (one - self.b1) * *g;
            *v = self.b2 * *v + (one - self.b2) * *g * *g;
            *w -= self.lr_t * *m / (v.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::new(array![1.0f64, -2.0]);
        p.grad = array![0.5, -3.0];
        let mut opt = Adam::new(0.1);
        let mut s = opt.begin_step();
        s.update("w", p.view_mut());
        assert!((p.value[0] - 0.9).abs() < 1e-6);
        assert!((p.value[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Param::new(array![3.0f64]);
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            p.grad = &p.value * 2.0;
            let mut s = opt.begin_step();
            s.update("w", p.view_mut());
        }
        assert!(p.value[0].abs() < 1e-2);
    }
}
