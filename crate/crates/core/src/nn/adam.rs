use super::{Module, Param};
use crate::Real;

/// Adam without weight decay. Moments are allocated lazily per parameter in
/// visit order and reset when a parameter changes size.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.first.clear();
        self.second.clear();
    }

    /// Applies one update to every parameter of `module` and clears its
    /// gradients.
    pub fn update(&mut self, module: &mut dyn Module<T>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = T::lit(lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let (b1, b2, eps) = (T::lit(self.beta1), T::lit(self.beta2), T::lit(self.eps));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let mut index = 0;
        let first = &mut self.first;
        let second = &mut self.second;
        module.visit_params_mut(&mut |p: &mut Param<T>| {
            if first.len() <= index {
                first.push(Vec::new());
                second.push(Vec::new());
            }
            let (m, v) = (&mut first[index], &mut second[index]);
            if m.len() != p.len() {
                *m = vec![T::zero(); p.len()];
                *v = vec![T::zero(); p.len()];
            }
            for (((x, g), m), v) in p.value.iter_mut().zip(p.grad.iter_mut()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * *g;
                *v = b2 * *v + one_b2 * *g * *g;
                *x -= step_size * *m / ((*v).sqrt() * inv_bc2_sqrt + eps);
                *g = T::zero();
            }
            index += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad(Param<f64>);

    impl Module<f64> for Quad {
        fn visit_params(&self, f: &mut dyn FnMut(&Param<f64>)) {
            f(&self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut q = Quad(Param::new("x", vec![2], vec![1.0, -1.0]));
        q.0.grad = vec![3.0, -0.5];
        let mut opt = Adam::new(0.9, 0.99, 1e-12);
        opt.update(&mut q, 0.1);
        assert!((q.0.value[0] - 0.9).abs() < 1e-9);
        assert!((q.0.value[1] + 0.9).abs() < 1e-9);
        assert_eq!(q.0.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut q = Quad(Param::new("x", vec![1], vec![5.0]));
        let mut opt = Adam::new(0.9, 0.99, 1e-8);
        for _ in 0..2000 {
            q.0.grad[0] = 2.0 * (q.0.value[0] - 2.0);
            opt.update(&mut q, 0.05);
        }
        assert!((q.0.value[0] - 2.0).abs() < 1e-3);
    }
}
