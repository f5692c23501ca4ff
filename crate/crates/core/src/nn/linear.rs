use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{gemm, Module, Param};
use crate::Real;

/// Dense layer `y = x W^T + b` over row-major batches.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    /// `out x in`
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Param::uniform(format!("{name}.weight"), vec![fan_out, fan_in], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), vec![fan_out], bound, rng),
            fan_in,
            fan_out,
        }
    }

    fn w(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.fan_out, self.fan_in), &self.weight.value).expect("weight")
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let n = x.nrows();
        let mut y = Array2::from_shape_fn((n, self.fan_out), |(_, j)| self.bias.value[j]);
        gemm(T::one(), x, self.w().t(), T::one(), &mut y.view_mut());
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>, need_dx: bool) -> Option<Array2<T>> {
        let db: Array1<T> = dy.sum_axis(Axis(0));
        for (g, d) in self.bias.grad.iter_mut().zip(db.iter()) {
            *g += *d;
        }
        {
            let mut gw = ndarray::ArrayViewMut2::from_shape((self.fan_out, self.fan_in), &mut self.weight.grad[..])
                .expect("grad");
            gemm(T::one(), dy.t(), x, T::one(), &mut gw);
        }
        if !need_dx {
            return None;
        }
        let mut dx = Array2::zeros((x.nrows(), self.fan_in));
        gemm(T::one(), dy, self.w(), T::zero(), &mut dx.view_mut());
        Some(dx)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// ReLU multilayer perceptron with a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

/// Activations saved by [`Mlp::forward`]: the input of every layer.
#[derive(Clone, Debug)]
pub struct MlpTape<T> {
    pub inputs: Vec<Array2<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn new(name: &str, sizes: &[usize], rng: &mut impl Rng) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, s)| Linear::new(&format!("{name}.{i}"), s[0], s[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, x: Array2<T>) -> (Array2<T>, MlpTape<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(h.view());
            if i + 1 < self.layers.len() {
                y.mapv_inplace(|v| v.max(T::zero()));
            }
            inputs.push(h);
            h = y;
        }
        (h, MlpTape { inputs })
    }

    pub fn backward(&mut self, tape: &MlpTape<T>, dy: Array2<T>, need_dx: bool) -> Option<Array2<T>> {
        let mut d = dy;
        let n = self.layers.len();
        for i in (0..n).rev() {
            let want_dx = need_dx || i > 0;
            let dx = self.layers[i].backward(tape.inputs[i].view(), d.view(), want_dx);
            match dx {
                Some(mut dx) if i > 0 => {
                    // ReLU of the previous layer: its output is this layer's input
                    dx.zip_mut_with(&tape.inputs[i], |g, &a| {
                        if a <= T::zero() {
                            *g = T::zero();
                        }
                    });
                    d = dx;
                }
                other => return other,
            }
        }
        None
    }
}

impl<T: Real> Module<T> for Mlp<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.iter().for_each(|l| l.visit_params(f));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_params_mut(f));
    }
}
