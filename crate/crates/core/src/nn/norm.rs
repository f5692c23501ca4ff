use ndarray::{Array1, Array3, Axis};

use super::{Module, Param};
use crate::Real;

const EPS: f64 = 1e-5;

/// Per-channel normalization over the spatial positions of one `C x H x W`
/// input, followed by a learned scale and shift. Statistics always come
/// from the current input, so inference matches training.
#[derive(Clone, Debug)]
pub struct Norm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

/// What [`Norm2d::backward`] needs from the forward pass.
#[derive(Clone, Debug)]
pub struct NormTape<T> {
    pub normalized: Array3<T>,
    pub inv_std: Array1<T>,
}

impl<T: Real> Norm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
        }
    }

    pub fn forward(&self, x: &Array3<T>) -> (Array3<T>, NormTape<T>) {
        let (c, h, w) = x.dim();
        let n = T::lit((h * w) as f64);
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(c);
        let mut y = Array3::zeros((c, h, w));
        for ch in 0..c {
            let mut xc = normalized.index_axis_mut(Axis(0), ch);
            let mean = xc.sum() / n;
            let var = xc.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = T::one() / (var + T::lit(EPS)).sqrt();
            xc.mapv_inplace(|v| (v - mean) * is);
            inv_std[ch] = is;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            y.index_axis_mut(Axis(0), ch).zip_mut_with(&xc, |o, &v| *o = g * v + b);
        }
        (y, NormTape { normalized, inv_std })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, tape: &NormTape<T>, dy: &Array3<T>) -> Array3<T> {
        let (c, h, w) = dy.dim();
        let n = T::lit((h * w) as f64);
        let mut dx = Array3::zeros((c, h, w));
        for ch in 0..c {
            let xh = tape.normalized.index_axis(Axis(0), ch);
            let g = dy.index_axis(Axis(0), ch);
            let sum_g = g.sum();
            let sum_gx = ndarray::Zip::from(&g).and(&xh).fold(T::zero(), |acc, &a, &b| acc + a * b);
            self.beta.grad[ch] += sum_g;
            self.gamma.grad[ch] += sum_gx;
            let k = self.gamma.value[ch] * tape.inv_std[ch] / n;
            ndarray::Zip::from(dx.index_axis_mut(Axis(0), ch)).and(&g).and(&xh).for_each(|d, &gy, &x| {
                *d = k * (n * gy - sum_g - x * sum_gx);
            });
        }
        dx
    }
}

impl<T: Real> Module<T> for Norm2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array3::from_shape_fn((3, 5, 4), |_| rng.gen_range(-3.0..7.0));
        let (y, _) = Norm2d::<f64>::new("n", 3).forward(&x);
        for ch in y.outer_iter() {
            assert!(ch.mean().unwrap().abs() < 1e-12);
            assert!((ch.mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let proj = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let mut norm = Norm2d::<f64>::new("n", 2);
        norm.gamma.value = vec![1.3, -0.7];
        norm.beta.value = vec![0.2, 0.1];
        let (_, tape) = norm.forward(&x);
        let dx = norm.backward(&tape, &proj);
        let loss = |n: &Norm2d<f64>, x: &Array3<f64>| (&n.forward(x).0 * &proj).sum();
        let mut xv = x.iter().copied().collect::<Vec<_>>();
        crate::nn::gradcheck::check(&mut xv, dx.as_slice().unwrap(), |v| {
            loss(&norm, &Array3::from_shape_vec((2, 3, 3), v.to_vec()).unwrap())
        }, 1e-6, 1e-5);
        let mut gv = norm.gamma.value.clone();
        crate::nn::gradcheck::check(&mut gv, &norm.gamma.grad, |v| {
            let mut n = norm.clone();
            n.gamma.value = v.to_vec();
            loss(&n, &x)
        }, 1e-6, 1e-5);
        let mut bv = norm.beta.value.clone();
        crate::nn::gradcheck::check(&mut bv, &norm.beta.grad, |v| {
            let mut n = norm.clone();
            n.beta.value = v.to_vec();
            loss(&n, &x)
        }, 1e-6, 1e-5);
    }
}
