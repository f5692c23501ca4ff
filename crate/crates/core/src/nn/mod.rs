//! Minimal trainable building blocks with hand-written backward passes:
//! parameters, Adam, 2D (transposed) convolutions, channel normalization
//! and dense layers.

mod adam;
mod conv;
mod linear;
mod norm;

pub use adam::Adam;
pub use conv::{col2im, im2col, Conv2d, ConvTranspose2d};
pub use linear::{Linear, Mlp, MlpTape};
pub use norm::{Norm2d, NormTape};

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

use crate::Real;

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape");
        let grad = vec![T::zero(); value.len()];
        Self { name: name.into(), shape, value, grad }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![T::zero(); n])
    }

    pub fn uniform(name: impl Into<String>, shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
        Self::new(name, shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
    }
}

/// Anything owning parameters. Visit order must be stable: optimizers and
/// checkpoints rely on it.
pub trait Module<T: Real> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    fn params_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |p| ok &= p.is_finite());
        ok
    }

    fn grads_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |p| ok &= p.grad.iter().all(|g| g.is_finite()));
        ok
    }
}

/// `c = alpha * a . b + beta * c`
#[inline]
pub fn gemm<T: Real>(alpha: T, a: ArrayView2<'_, T>, b: ArrayView2<'_, T>, beta: T, c: &mut ArrayViewMut2<'_, T>) {
    general_mat_mul(alpha, &a, &b, beta, c);
}

#[inline]
pub fn leaky_relu<T: Real>(x: T, slope: T) -> T {
    if x > T::zero() { x } else { x * slope }
}
