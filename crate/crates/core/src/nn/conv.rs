use ndarray::{Array3, ArrayView2, ArrayViewMut2};
use rand::Rng;

use super::{gemm, Module, Param};
use crate::Real;

#[inline]
fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds `x` (`c x h x w`) into a `(c*k*k) x (ho*wo)` patch matrix.
pub fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Vec<T> {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let mut cols = vec![T::zero(); c * k * k * ho * wo];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds patch columns back into a
/// `c x h x w` buffer.
pub fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Vec<T> {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}

fn view2<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view")
}

fn view2_mut<T>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view")
}

/// Strided 2D convolution over a single `c x h x w` feature map.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    /// `cout x cin x k x k`
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Self {
            weight: Param::uniform(format!("{name}.weight"), vec![cout, cin, k, k], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), vec![cout], bound, rng),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (conv_out(h, self.k, self.stride, self.pad), conv_out(w, self.k, self.stride, self.pad))
    }

    /// Returns the output and the patch matrix needed by [`Self::backward`].
    pub fn forward(&self, x: &Array3<T>) -> (Array3<T>, Vec<T>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let (ho, wo) = self.output_size(h, w);
        let kk = self.cin * self.k * self.k;
        let cols = im2col(x.as_slice().expect("contiguous"), c, h, w, self.k, self.stride, self.pad);
        let mut out = vec![T::zero(); self.cout * ho * wo];
        for (o, chunk) in out.chunks_mut(ho * wo).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias.value[o]);
        }
        gemm(
            T::one(),
            view2(&self.weight.value, self.cout, kk),
            view2(&cols, kk, ho * wo),
            T::one(),
            &mut view2_mut(&mut out, self.cout, ho * wo),
        );
        (Array3::from_shape_vec((self.cout, ho, wo), out).expect("conv out"), cols)
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `input_size` is given.
    pub fn backward(&mut self, cols: &[T], dy: &Array3<T>, input_size: Option<(usize, usize)>) -> Option<Array3<T>> {
        let (co, ho, wo) = dy.dim();
        assert_eq!(co, self.cout);
        let kk = self.cin * self.k * self.k;
        let dy_s = dy.as_slice().expect("contiguous");
        for (o, chunk) in dy_s.chunks(ho * wo).enumerate() {
            self.bias.grad[o] += chunk.iter().copied().sum();
        }
        gemm(
            T::one(),
            view2(dy_s, co, ho * wo),
            view2(cols, kk, ho * wo).t(),
            T::one(),
            &mut view2_mut(&mut self.weight.grad, co, kk),
        );
        let (h, w) = input_size?;
        let mut dcols = vec![T::zero(); kk * ho * wo];
        gemm(
            T::one(),
            view2(&self.weight.value, co, kk).t(),
            view2(dy_s, co, ho * wo),
            T::zero(),
            &mut view2_mut(&mut dcols, kk, ho * wo),
        );
        let dx = col2im(&dcols, self.cin, h, w, self.k, self.stride, self.pad);
        Some(Array3::from_shape_vec((self.cin, h, w), dx).expect("conv dx"))
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Transposed convolution (fractionally strided), the adjoint of
/// [`Conv2d`] with the same geometry.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    /// `cin x cout x k x k`
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let taps = (k * k / (stride * stride)).max(1);
        let bound = 1.0 / ((cin * taps) as f64).sqrt();
        Self {
            weight: Param::uniform(format!("{name}.weight"), vec![cin, cout, k, k], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), vec![cout], bound, rng),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n - 1) * self.stride + self.k - 2 * self.pad;
        (f(h), f(w))
    }

    pub fn forward(&self, x: &Array3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv-transpose input channels");
        let (ho, wo) = self.output_size(h, w);
        let kk = self.cout * self.k * self.k;
        let mut cols = vec![T::zero(); kk * h * w];
        gemm(
            T::one(),
            view2(&self.weight.value, self.cin, kk).t(),
            view2(x.as_slice().expect("contiguous"), c, h * w),
            T::zero(),
            &mut view2_mut(&mut cols, kk, h * w),
        );
        let mut out = col2im(&cols, self.cout, ho, wo, self.k, self.stride, self.pad);
        for (o, chunk) in out.chunks_mut(ho * wo).enumerate() {
            let b = self.bias.value[o];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Array3::from_shape_vec((self.cout, ho, wo), out).expect("convT out")
    }

    pub fn backward(&mut self, x: &Array3<T>, dy: &Array3<T>, need_dx: bool) -> Option<Array3<T>> {
        let (c, h, w) = x.dim();
        let (co, ho, wo) = dy.dim();
        assert_eq!(co, self.cout);
        let kk = self.cout * self.k * self.k;
        let dy_s = dy.as_slice().expect("contiguous");
        for (o, chunk) in dy_s.chunks(ho * wo).enumerate() {
            self.bias.grad[o] += chunk.iter().copied().sum();
        }
        let dcols = im2col(dy_s, co, ho, wo, self.k, self.stride, self.pad);
        gemm(
            T::one(),
            view2(x.as_slice().expect("contiguous"), c, h * w),
            view2(&dcols, kk, h * w).t(),
            T::one(),
            &mut view2_mut(&mut self.weight.grad, c, kk),
        );
        if !need_dx {
            return None;
        }
        let mut dx = vec![T::zero(); c * h * w];
        gemm(
            T::one(),
            view2(&self.weight.value, c, kk),
            view2(&dcols, kk, h * w),
            T::zero(),
            &mut view2_mut(&mut dx, c, h * w),
        );
        Some(Array3::from_shape_vec((c, h, w), dx).expect("convT dx"))
    }
}

impl<T: Real> Module<T> for ConvTranspose2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct-loop convolution used as an oracle for the GEMM path.
    fn naive_conv(conv: &Conv2d<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let (ho, wo) = conv.output_size(h, w);
        let k = conv.k;
        Array3::from_shape_fn((conv.cout, ho, wo), |(o, oy, ox)| {
            let mut acc = conv.bias.value[o];
            for c in 0..conv.cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight.value[((o * conv.cin + c) * k + ky) * k + kx]
                                * x[[c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn rand_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new("c", 3, 5, 4, 2, 1, &mut rng);
        let x = rand_map(3, 8, 6, &mut rng);
        let (y, _) = conv.forward(&x);
        let want = naive_conv(&conv, &x);
        assert_eq!(y.dim(), (5, 4, 3));
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        // <conv(x), y> == <x, convT(y)> with shared weights and zero bias
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::<f64>::new("c", 3, 4, 4, 2, 1, &mut rng);
        conv.bias.value.iter_mut().for_each(|b| *b = 0.0);
        let mut convt = ConvTranspose2d::<f64>::new("t", 4, 3, 4, 2, 1, &mut rng);
        convt.weight.value = conv.weight.value.clone();
        convt.bias.value.iter_mut().for_each(|b| *b = 0.0);
        let x = rand_map(3, 8, 8, &mut rng);
        let y = rand_map(4, 4, 4, &mut rng);
        let lhs: f64 = (conv.forward(&x).0 * &y).sum();
        let rhs: f64 = (&x * &convt.forward(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        assert_eq!(convt.output_size(4, 4), (8, 8));
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, 1, &mut rng);
        let x = rand_map(2, 5, 6, &mut rng);
        let (y, cols) = conv.forward(&x);
        let probe = rand_map(y.dim().0, y.dim().1, y.dim().2, &mut rng);
        let dx = conv.backward(&cols, &probe, Some((5, 6))).unwrap();

        let grad = conv.weight.grad.clone();
        let mut w = conv.weight.value.clone();
        let base = conv.clone();
        gradcheck::check(&mut w, &grad, |w| {
            let mut c = base.clone();
            c.weight.value = w.to_vec();
            (c.forward(&x).0 * &probe).sum()
        }, 1e-5, 1e-6);

        let mut xs = x.as_slice().unwrap().to_vec();
        gradcheck::check(&mut xs, dx.as_slice().unwrap(), |xs| {
            let xa = Array3::from_shape_vec((2, 5, 6), xs.to_vec()).unwrap();
            (base.forward(&xa).0 * &probe).sum()
        }, 1e-5, 1e-6);
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut convt = ConvTranspose2d::<f64>::new("t", 3, 2, 4, 2, 1, &mut rng);
        let x = rand_map(3, 3, 4, &mut rng);
        let y = convt.forward(&x);
        let probe = rand_map(y.dim().0, y.dim().1, y.dim().2, &mut rng);
        let dx = convt.backward(&x, &probe, true).unwrap();
        let base = convt.clone();

        let mut b = convt.bias.value.clone();
        gradcheck::check(&mut b, &convt.bias.grad.clone(), |b| {
            let mut c = base.clone();
            c.bias.value = b.to_vec();
            (c.forward(&x) * &probe).sum()
        }, 1e-5, 1e-6);
        let mut w = convt.weight.value.clone();
        gradcheck::check(&mut w, &convt.weight.grad.clone(), |w| {
            let mut c = base.clone();
            c.weight.value = w.to_vec();
            (c.forward(&x) * &probe).sum()
        }, 1e-5, 1e-6);
        let mut xs = x.as_slice().unwrap().to_vec();
        gradcheck::check(&mut xs, dx.as_slice().unwrap(), |xs| {
            let xa = Array3::from_shape_vec((3, 3, 4), xs.to_vec()).unwrap();
            (base.forward(&xa) * &probe).sum()
        }, 1e-5, 1e-6);
    }
}
