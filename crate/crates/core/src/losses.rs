//! Training objectives: reconstruction, foreground regularizers, the
//! mask-bootstrap schedule, background depth alignment, and the weighted
//! total. Each term has a value function and, where it is trained through,
//! a gradient function with respect to its first argument.

use ndarray::{Array2, Array3, ArrayView, ArrayView2, Dimension};
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Steepness of the smooth L0 surrogate `2 sigmoid(k a) - 1`.
pub const L0_STEEPNESS: f64 = 5.0;

/// Disparity is `1 / max(depth, DEPTH_EPS)`.
pub const DEPTH_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub recons: f64,
    pub alpha_l1: f64,
    pub alpha_l0: f64,
    pub alpha_warp: f64,
    pub flow: f64,
    pub mask_initial: f64,
    pub mask_reduced: f64,
    pub mask_threshold: f64,
    pub depth: f64,
    pub distort: f64,
    pub tv_density: f64,
    pub tv_appearance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::shared()
    }
}

impl LossWeights {
    /// The configuration shared by most videos.
    pub fn shared() -> Self {
        Self {
            recons: 1.0,
            alpha_l1: 0.01,
            alpha_l0: 0.005,
            alpha_warp: 0.01,
            flow: 1.0,
            mask_initial: 50.0,
            mask_reduced: 5.0,
            mask_threshold: 0.02,
            depth: 0.0,
            distort: 0.0,
            tv_density: 0.01,
            tv_appearance: 0.01,
        }
    }

    /// Preset for the DAVIS-style videos: depth supervision on.
    pub fn davis() -> Self {
        Self { depth: 1.0, ..Self::shared() }
    }

    /// Preset for rotation-dominant captures prone to floaters.
    pub fn depth_and_distortion() -> Self {
        Self { depth: 0.1, distort: 0.01, ..Self::shared() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.recons,
            self.alpha_l1,
            self.alpha_l0,
            self.alpha_warp,
            self.flow,
            self.mask_initial,
            self.mask_reduced,
            self.mask_threshold,
            self.depth,
            self.distort,
            self.tv_density,
            self.tv_appearance,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

fn mean_sq<T: Real, D: Dimension>(a: &ArrayView<'_, T, D>, b: &ArrayView<'_, T, D>) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y).f64().powi(2)).sum::<f64>() / n
}

/// Mean squared error over pixels and channels.
pub fn recon_loss<T: Real>(pred: ArrayView2<'_, T>, target: ArrayView2<'_, T>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::InvalidInput(format!("recon shapes {:?} vs {:?}", pred.dim(), target.dim())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyBatch("no pixels for reconstruction loss".into()));
    }
    Ok(mean_sq(&pred, &target))
}

pub fn recon_grad<T: Real>(pred: ArrayView2<'_, T>, target: ArrayView2<'_, T>) -> Array2<T> {
    let k = T::lit(2.0 / pred.len().max(1) as f64);
    let mut g = &pred - &target;
    g.mapv_inplace(|v| v * k);
    g
}

/// Mean alpha (the L1 part of the alpha regularizer).
pub fn alpha_l1<T: Real, D: Dimension>(alphas: ArrayView<'_, T, D>) -> f64 {
    alphas.iter().map(|a| a.f64()).sum::<f64>() / alphas.len().max(1) as f64
}

#[inline]
fn smooth_l0(a: f64) -> f64 {
    2.0 / (1.0 + (-L0_STEEPNESS * a).exp()) - 1.0
}

/// Mean of the smooth L0 surrogate.
pub fn alpha_l0<T: Real, D: Dimension>(alphas: ArrayView<'_, T, D>) -> f64 {
    alphas.iter().map(|a| smooth_l0(a.f64())).sum::<f64>() / alphas.len().max(1) as f64
}

/// Weighted alpha regularizer with the shared weights.
pub fn alpha_reg<T: Real, D: Dimension>(alphas: ArrayView<'_, T, D>) -> f64 {
    let w = LossWeights::shared();
    w.alpha_l1 * alpha_l1(alphas.view()) + w.alpha_l0 * alpha_l0(alphas)
}

/// Gradient of `w1 * alpha_l1 + w0 * alpha_l0`, elementwise.
pub fn alpha_reg_grad<T: Real>(alpha: T, count: usize, w1: f64, w0: f64) -> T {
    let a = alpha.f64();
    let s = 1.0 / (1.0 + (-L0_STEEPNESS * a).exp());
    T::lit((w1 + w0 * 2.0 * L0_STEEPNESS * s * (1.0 - s)) / count.max(1) as f64)
}

/// Bilinear sample of `img` (`H x W`) at `(x, y)`; `None` outside the
/// pixel-center hull.
#[inline]
pub fn bilinear<T: Real>(img: &ArrayView2<'_, T>, x: f64, y: f64) -> Option<T> {
    let (h, w) = img.dim();
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (T::lit(x - x0 as f64), T::lit(y - y0 as f64));
    let one = T::one();
    Some(
        (one - fy) * ((one - fx) * img[[y0, x0]] + fx * img[[y0, x1]])
            + fy * ((one - fx) * img[[y1, x0]] + fx * img[[y1, x1]]),
    )
}

/// `alpha_next` pulled back to frame `t` along the forward flow (`H x W x 2`,
/// `(u, v)` in pixels), with the in-bounds mask.
pub fn backward_warp<T: Real>(alpha_next: ArrayView2<'_, T>, flow: &ndarray::ArrayView3<'_, T>) -> (Array2<T>, Array2<bool>) {
    let (h, w) = alpha_next.dim();
    let mut out = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let sx = x as f64 + flow[[y, x, 0]].f64();
            let sy = y as f64 + flow[[y, x, 1]].f64();
            if let Some(v) = bilinear(&alpha_next, sx, sy) {
                out[[y, x]] = v;
                valid[[y, x]] = true;
            }
        }
    }
    (out, valid)
}

/// Mean squared difference between `alpha_t` and the backward-warped
/// `alpha_next` over in-bounds samples. Returns the value and the gradient
/// with respect to `alpha_t`; `alpha_next` is treated as a constant.
pub fn alpha_warp_loss<T: Real>(
    alpha_t: ArrayView2<'_, T>,
    alpha_next: ArrayView2<'_, T>,
    flow: ndarray::ArrayView3<'_, T>,
) -> Result<(f64, Array2<T>)> {
    let (h, w) = alpha_t.dim();
    if alpha_next.dim() != (h, w) || flow.dim() != (h, w, 2) {
        return Err(Error::InvalidInput("alpha warp shapes disagree".into()));
    }
    let (warped, valid) = backward_warp(alpha_next, &flow);
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::EmptyBatch("every warped sample is out of bounds".into()));
    }
    let mut grad = Array2::zeros((h, w));
    let mut total = 0.0;
    let k = T::lit(2.0 / n as f64);
    for y in 0..h {
        for x in 0..w {
            if valid[[y, x]] {
                let d = alpha_t[[y, x]] - warped[[y, x]];
                total += d.f64().powi(2);
                grad[[y, x]] = k * d;
            }
        }
    }
    Ok((total / n as f64, grad))
}

/// Squared flow error averaged over masked pixels and both components.
/// `composed` and `target` are `P x 2`, `mask` is `P`.
pub fn flow_loss<T: Real>(composed: ArrayView2<'_, T>, target: ArrayView2<'_, T>, mask: &[T]) -> f64 {
    let n = mask.iter().filter(|&&m| m > T::zero()).count();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (p, &m) in mask.iter().enumerate() {
        if m > T::zero() {
            for c in 0..2 {
                total += (composed[[p, c]] - target[[p, c]]).f64().powi(2);
            }
        }
    }
    total / (2 * n) as f64
}

pub fn flow_grad<T: Real>(composed: ArrayView2<'_, T>, target: ArrayView2<'_, T>, mask: &[T]) -> Array2<T> {
    let n = mask.iter().filter(|&&m| m > T::zero()).count();
    let mut g = Array2::zeros(composed.dim());
    if n == 0 {
        return g;
    }
    let k = T::lit(2.0 / (2 * n) as f64);
    for (p, &m) in mask.iter().enumerate() {
        if m > T::zero() {
            for c in 0..2 {
                g[[p, c]] = k * (composed[[p, c]] - target[[p, c]]);
            }
        }
    }
    g
}

/// Mean squared difference between alphas and masks, any matching shape.
pub fn mask_loss<T: Real, D: Dimension>(alphas: ArrayView<'_, T, D>, masks: ArrayView<'_, T, D>) -> Result<f64> {
    if alphas.shape() != masks.shape() {
        return Err(Error::InvalidInput(format!("mask loss shapes {:?} vs {:?}", alphas.shape(), masks.shape())));
    }
    Ok(mean_sq(&alphas, &masks))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPhase {
    Full,
    Reduced,
    Off,
}

/// Weight schedule for the mask-bootstrap loss: full weight until the
/// unweighted loss first drops below the threshold at step `s`, then the
/// reduced weight for another `s` steps, then zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskLossScheduler {
    pub phase: MaskPhase,
    pub trigger_step: Option<usize>,
    pub threshold: f64,
    pub full: f64,
    pub reduced: f64,
}

impl MaskLossScheduler {
    pub fn new(weights: &LossWeights) -> Self {
        Self {
            phase: MaskPhase::Full,
            trigger_step: None,
            threshold: weights.mask_threshold,
            full: weights.mask_initial,
            reduced: weights.mask_reduced,
        }
    }

    /// Weight for `step`, given that step's unweighted mask loss.
    pub fn step(&mut self, unweighted: f64, step: usize) -> f64 {
        if self.phase == MaskPhase::Full && unweighted < self.threshold {
            self.phase = MaskPhase::Reduced;
            self.trigger_step = Some(step);
        }
        if let (MaskPhase::Reduced, Some(s)) = (self.phase, self.trigger_step) {
            if step >= 2 * s {
                self.phase = MaskPhase::Off;
            }
        }
        self.weight()
    }

    pub fn weight(&self) -> f64 {
        match self.phase {
            MaskPhase::Full => self.full,
            MaskPhase::Reduced => self.reduced,
            MaskPhase::Off => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthLoss<T> {
    pub value: f64,
    /// Set when fewer than two valid pixels or the fit is singular.
    pub degenerate: bool,
    pub scale: f64,
    pub shift: f64,
    /// Gradient with respect to the rendered depth.
    pub grad: Vec<T>,
}

/// Scale- and shift-invariant disparity loss: the rendered depth is turned
/// into disparity, affinely fitted to the monocular disparity by least
/// squares over valid pixels, and the mean squared residual returned.
pub fn depth_loss<T: Real>(rendered_depth: &[T], mono_disparity: &[T], valid: &[bool]) -> DepthLoss<T> {
    let n_all = rendered_depth.len();
    let mut out = DepthLoss { value: 0.0, degenerate: true, scale: 0.0, shift: 0.0, grad: vec![T::zero(); n_all] };
    let idx: Vec<usize> = (0..n_all).filter(|&i| valid[i]).collect();
    let n = idx.len();
    if n < 2 {
        return out;
    }
    let disp = |i: usize| 1.0 / rendered_depth[i].f64().max(DEPTH_EPS);
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &i in &idx {
        let (x, y) = (disp(i), mono_disparity[i].f64());
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let nf = n as f64;
    let det = nf * sxx - sx * sx;
    if !(det > 1e-12 * nf * sxx.max(f64::MIN_POSITIVE)) {
        return out;
    }
    let s = (nf * sxy - sx * sy) / det;
    let b = (sy - s * sx) / nf;
    let mut total = 0.0;
    for &i in &idx {
        let x = disp(i);
        let r = s * x + b - mono_disparity[i].f64();
        total += r * r;
        // the fit is optimal, so only the explicit dependence remains
        let d = rendered_depth[i].f64();
        let dx_ddepth = if d > DEPTH_EPS { -1.0 / (d * d) } else { 0.0 };
        out.grad[i] = T::lit(2.0 * s * r / nf * dx_ddepth);
    }
    out.value = total / nf;
    out.degenerate = false;
    out.scale = s;
    out.shift = b;
    out
}

/// Unweighted loss terms of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub recons: f64,
    pub alpha_l1: f64,
    pub alpha_l0: f64,
    pub alpha_warp: f64,
    pub flow: f64,
    pub mask: f64,
    pub depth: f64,
    pub distort: f64,
    pub tv_density: f64,
    pub tv_appearance: f64,
}

impl LossParts {
    fn named(&self) -> [(&'static str, f64); 10] {
        [
            ("recons", self.recons),
            ("alpha_l1", self.alpha_l1),
            ("alpha_l0", self.alpha_l0),
            ("alpha_warp", self.alpha_warp),
            ("flow", self.flow),
            ("mask", self.mask),
            ("depth", self.depth),
            ("distort", self.distort),
            ("tv_density", self.tv_density),
            ("tv_appearance", self.tv_appearance),
        ]
    }
}

/// Per-step record written to the JSON-lines log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub total: f64,
    pub mask_weight: f64,
    pub parts: LossParts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(default)]
    pub depth_degenerate: bool,
}

/// The weight applied to each named part; the mask term uses the
/// scheduler's current weight.
pub fn weight_of(weights: &LossWeights, mask_weight: f64, name: &str) -> f64 {
    match name {
        "recons" => weights.recons,
        "alpha_l1" => weights.alpha_l1,
        "alpha_l0" => weights.alpha_l0,
        "alpha_warp" => weights.alpha_warp,
        "flow" => weights.flow,
        "mask" => mask_weight,
        "depth" => weights.depth,
        "distort" => weights.distort,
        "tv_density" => weights.tv_density,
        "tv_appearance" => weights.tv_appearance,
        _ => 0.0,
    }
}

/// Weighted sum of the parts. Any non-finite part or total is reported as
/// divergence at `step`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, mask_weight: f64, step: usize) -> Result<LossReport> {
    let mut total = 0.0;
    for (name, value) in parts.named() {
        if !value.is_finite() {
            return Err(Error::DivergedLoss { step, detail: format!("{name} = {value}") });
        }
        let w = weight_of(weights, mask_weight, name);
        if w != 0.0 {
            total += w * value;
        }
    }
    if !total.is_finite() {
        return Err(Error::DivergedLoss { step, detail: format!("total = {total}") });
    }
    Ok(LossReport { step, total, mask_weight, parts: parts.clone(), psnr: None, depth_degenerate: false })
}

/// Union of `N x H x W` masks as one `H x W` map.
pub fn union_mask<T: Real>(masks: &Array3<T>) -> Array2<T> {
    let (_, h, w) = masks.dim();
    let mut out = Array2::zeros((h, w));
    for m in masks.outer_iter() {
        out.zip_mut_with(&m, |o: &mut T, &v| *o = o.max(v));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recon_examples() {
        let a = array![[0.2, 0.3, 0.4], [0.5, 0.6, 0.7]];
        assert_eq!(recon_loss(a.view(), a.view()).unwrap(), 0.0);
        let b = &a + 0.1;
        assert!((recon_loss(b.view(), a.view()).unwrap() - 0.01).abs() < 1e-12);
        let p = array![[0.0], [0.0]];
        let t = array![[1.0], [0.0]];
        assert_eq!(recon_loss(p.view(), t.view()).unwrap(), 0.5);
        let e = Array2::<f64>::zeros((0, 3));
        assert!(matches!(recon_loss(e.view(), e.view()), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn recon_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Array2::from_shape_fn((4, 3), |_| rng.gen::<f64>());
        let t = Array2::from_shape_fn((4, 3), |_| rng.gen::<f64>());
        let g = recon_grad(p.view(), t.view());
        let mut v = p.as_slice().unwrap().to_vec();
        crate::nn::gradcheck::check(&mut v, g.as_slice().unwrap(), |v| {
            recon_loss(Array2::from_shape_vec((4, 3), v.to_vec()).unwrap().view(), t.view()).unwrap()
        }, 1e-6, 1e-6);
    }

    #[test]
    fn alpha_reg_examples() {
        let zero = Array1::<f64>::zeros(5);
        assert_eq!(alpha_reg(zero.view()), 0.0);
        let one = Array1::<f64>::ones(5);
        let phi1 = 2.0 / (1.0 + (-5.0f64).exp()) - 1.0;
        assert!((alpha_reg(one.view()) - (0.01 + 0.005 * phi1)).abs() < 1e-15);
        let half = Array1::from_elem(5, 0.5);
        let v = alpha_reg(half.view());
        assert!(v > 0.0 && v < alpha_reg(one.view()));
    }

    #[test]
    fn alpha_reg_gradient() {
        let a: Vec<f64> = vec![0.0, 0.1, 0.5, 0.93];
        let g: Vec<f64> = a.iter().map(|&x| alpha_reg_grad(x, 4, 0.01, 0.005)).collect();
        let mut v = a.clone();
        crate::nn::gradcheck::check(&mut v, &g, |v| alpha_reg(ndarray::ArrayView1::from(v)), 1e-6, 1e-6);
    }

    #[test]
    fn warp_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((6, 7), |_| rng.gen::<f64>());
        let zero = Array3::<f64>::zeros((6, 7, 2));
        assert_eq!(alpha_warp_loss(a.view(), a.view(), zero.view()).unwrap().0, 0.0);

        // content moves one pixel right between frames
        let mut next = Array2::zeros((6, 7));
        for y in 0..6 {
            for x in 1..7 {
                next[[y, x]] = a[[y, x - 1]];
            }
        }
        let mut flow = Array3::zeros((6, 7, 2));
        flow.slice_mut(ndarray::s![.., .., 0]).fill(1.0);
        let (v, _) = alpha_warp_loss(a.view(), next.view(), flow.view()).unwrap();
        assert!(v <= 1e-12, "{v}");

        let z = Array2::<f64>::zeros((3, 3));
        let o = Array2::<f64>::ones((3, 3));
        assert_eq!(alpha_warp_loss(z.view(), o.view(), Array3::zeros((3, 3, 2)).view()).unwrap().0, 1.0);

        let far = Array3::from_elem((3, 3, 2), 10.0);
        assert!(matches!(alpha_warp_loss(z.view(), o.view(), far.view()), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn warp_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Array2::from_shape_fn((5, 5), |_| rng.gen::<f64>());
        let b = Array2::from_shape_fn((5, 5), |_| rng.gen::<f64>());
        let flow = Array3::from_shape_fn((5, 5, 2), |_| rng.gen_range(-1.5..1.5));
        let (_, g) = alpha_warp_loss(a.view(), b.view(), flow.view()).unwrap();
        let mut v = a.as_slice().unwrap().to_vec();
        crate::nn::gradcheck::check(&mut v, g.as_slice().unwrap(), |v| {
            let a = Array2::from_shape_vec((5, 5), v.to_vec()).unwrap();
            alpha_warp_loss(a.view(), b.view(), flow.view()).unwrap().0
        }, 1e-6, 1e-6);
    }

    #[test]
    fn flow_examples() {
        let f = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let mask = [1.0, 0.0, 1.0];
        assert_eq!(flow_loss(f.view(), f.view(), &mask), 0.0);
        assert_eq!(flow_loss(f.view(), (&f + 9.0).view(), &[0.0; 3]), 0.0);
        assert_eq!(flow_loss(f.view(), (&f + 1.0).view(), &mask), 1.0);
        let g = flow_grad(f.view(), (&f + 1.0).view(), &mask);
        assert_eq!(g.row(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(g.row(0).to_vec(), vec![-0.5, -0.5]);
    }

    #[test]
    fn mask_loss_examples() {
        let m = Array3::<f64>::ones((2, 3, 3));
        assert_eq!(mask_loss(m.view(), m.view()).unwrap(), 0.0);
        assert_eq!(mask_loss(Array3::<f64>::zeros((2, 3, 3)).view(), m.view()).unwrap(), 1.0);
    }

    #[test]
    fn scheduler_phases() {
        let mut s = MaskLossScheduler::new(&LossWeights::shared());
        for step in 0..400 {
            assert_eq!(s.step(0.5, step), 50.0);
        }
        assert_eq!(s.step(0.01, 400), 5.0);
        assert_eq!(s.trigger_step, Some(400));
        for step in 401..800 {
            // later losses no longer matter
            assert_eq!(s.step(0.9, step), 5.0);
        }
        assert_eq!(s.step(0.9, 800), 0.0);
        assert_eq!(s.phase, MaskPhase::Off);
        assert_eq!(s.step(0.0, 5000), 0.0);

        let mut never = MaskLossScheduler::new(&LossWeights::shared());
        assert!((0..3000).all(|t| never.step(0.03, t) == 50.0));
    }

    #[test]
    fn depth_affine_and_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let depth: Vec<f64> = (0..50).map(|_| rng.gen_range(0.5..5.0)).collect();
        let mono: Vec<f64> = depth.iter().map(|d| 2.5 / d - 0.7).collect();
        let valid = vec![true; 50];
        let r = depth_loss(&depth, &mono, &valid);
        assert!(!r.degenerate && r.value <= 1e-8);
        assert!((r.scale - 2.5).abs() < 1e-9 && (r.shift + 0.7).abs() < 1e-9);

        let flat = vec![2.0; 10];
        let mono: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let r = depth_loss(&flat, &mono, &[true; 10]);
        assert!(r.degenerate && r.value == 0.0);

        let r = depth_loss(&depth[..3], &mono[..3], &[true, false, false]);
        assert!(r.degenerate && r.value == 0.0);
    }

    #[test]
    fn depth_matches_normal_equations_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let depth: Vec<f64> = (0..30).map(|_| rng.gen_range(0.5..5.0)).collect();
        let mono: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..2.0)).collect();
        let valid: Vec<bool> = (0..30).map(|i| i % 7 != 0).collect();
        let r = depth_loss(&depth, &mono, &valid);

        // oracle: solve [sum x^2 sum x; sum x n] [s b] = [sum xy; sum y] by Cramer
        let pts: Vec<(f64, f64)> = (0..30).filter(|&i| valid[i]).map(|i| (1.0 / depth[i], mono[i])).collect();
        let n = pts.len() as f64;
        let a11: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let a12: f64 = pts.iter().map(|p| p.0).sum();
        let r1: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let r2: f64 = pts.iter().map(|p| p.1).sum();
        let det = a11 * n - a12 * a12;
        let s = (r1 * n - a12 * r2) / det;
        let b = (a11 * r2 - a12 * r1) / det;
        let oracle: f64 = pts.iter().map(|p| (s * p.0 + b - p.1).powi(2)).sum::<f64>() / n;
        assert!((r.value - oracle).abs() < 1e-12);

        let mut v = depth.clone();
        crate::nn::gradcheck::check(&mut v, &r.grad, |v| depth_loss(v, &mono, &valid).value, 1e-6, 1e-5);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::shared();
        let zero = LossParts::default();
        assert_eq!(total_loss(&zero, &w, 50.0, 0).unwrap().total, 0.0);
        let weights = LossWeights { alpha_warp: 0.5, ..w.clone() };
        let parts = LossParts { alpha_warp: 2.0, ..Default::default() };
        assert_eq!(total_loss(&parts, &weights, 50.0, 0).unwrap().total, 1.0);
        let bad = LossParts { flow: f64::NAN, ..Default::default() };
        assert!(matches!(total_loss(&bad, &w, 50.0, 7), Err(Error::DivergedLoss { step: 7, .. })));
    }

    #[test]
    fn shared_weights_table() {
        let w = LossWeights::shared();
        assert_eq!(
            (w.recons, w.alpha_l1, w.alpha_l0, w.alpha_warp, w.flow, w.depth, w.distort),
            (1.0, 0.01, 0.005, 0.01, 1.0, 0.0, 0.0)
        );
        assert_eq!((w.mask_initial, w.mask_reduced, w.mask_threshold), (50.0, 5.0, 0.02));
        assert_eq!(LossWeights::davis().depth, 1.0);
        let b = LossWeights::depth_and_distortion();
        assert_eq!((b.depth, b.distort), (0.1, 0.01));
    }
}
