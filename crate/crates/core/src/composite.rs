//! Back-to-front alpha compositing of foreground layers over a background.
//!
//! Layer 0 is topmost. With `T_i = prod_{j<i} (1 - a_j)` the result is
//! `sum_i T_i a_i C_i + T_N B`. The same rule composes colors and flows.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};

use crate::{Error, Real, Result};

const ALPHA_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CompositeResult<T> {
    /// `P x C`
    pub value: Array2<T>,
    /// Contribution weight of each layer, `P x N`.
    pub layer_weights: Array2<T>,
    /// `P`
    pub background_weight: Vec<T>,
}

fn check_alphas<T: Real>(alphas: &ArrayView2<'_, T>) -> Result<()> {
    let lo = T::lit(-ALPHA_TOLERANCE);
    let hi = T::lit(1.0 + ALPHA_TOLERANCE);
    match alphas.iter().find(|&&a| !(a >= lo && a <= hi)) {
        Some(a) => Err(Error::InvalidAlpha(a.f64())),
        None => Ok(()),
    }
}

fn check_shapes<T>(layers: &ArrayView3<'_, T>, alphas: &ArrayView2<'_, T>, bg: &ArrayView2<'_, T>) -> Result<()> {
    let (n, p, c) = layers.dim();
    if alphas.dim() != (n, p) || bg.dim() != (p, c) {
        return Err(Error::InvalidInput(format!(
            "composite shapes: layers {:?}, alphas {:?}, background {:?}",
            layers.dim(),
            alphas.dim(),
            bg.dim()
        )));
    }
    Ok(())
}

/// Composites `layers` (`N x P x C`) with `alphas` (`N x P`) over `bg`
/// (`P x C`).
pub fn composite<T: Real>(layers: ArrayView3<'_, T>, alphas: ArrayView2<'_, T>, bg: ArrayView2<'_, T>) -> Result<CompositeResult<T>> {
    check_shapes(&layers, &alphas, &bg)?;
    check_alphas(&alphas)?;
    let (n, p, c) = layers.dim();
    let mut value = Array2::zeros((p, c));
    let mut layer_weights = Array2::zeros((p, n));
    let mut background_weight = vec![T::zero(); p];
    for px in 0..p {
        let mut trans = T::one();
        for i in 0..n {
            let a = alphas[[i, px]];
            let w = trans * a;
            layer_weights[[px, i]] = w;
            for ch in 0..c {
                value[[px, ch]] += w * layers[[i, px, ch]];
            }
            trans *= T::one() - a;
        }
        background_weight[px] = trans;
        for ch in 0..c {
            value[[px, ch]] += trans * bg[[px, ch]];
        }
    }
    Ok(CompositeResult { value, layer_weights, background_weight })
}

pub fn composite_colors<T: Real>(colors: ArrayView3<'_, T>, alphas: ArrayView2<'_, T>, bg: ArrayView2<'_, T>) -> Result<CompositeResult<T>> {
    composite(colors, alphas, bg)
}

pub fn composite_flows<T: Real>(flows: ArrayView3<'_, T>, alphas: ArrayView2<'_, T>, masked_flow: ArrayView2<'_, T>) -> Result<CompositeResult<T>> {
    composite(flows, alphas, masked_flow)
}

/// Partials of a loss through [`composite`].
#[derive(Clone, Debug)]
pub struct CompositeGrad<T> {
    pub layers: Array3<T>,
    pub alphas: Array2<T>,
    pub background: Array2<T>,
}

/// Backpropagates `d_value` (`P x C`). The alpha partial uses the suffix
/// composite `S_i` of everything below layer `i`: `T_i (C_i - S_{i+1})`.
pub fn composite_backward<T: Real>(
    layers: ArrayView3<'_, T>,
    alphas: ArrayView2<'_, T>,
    bg: ArrayView2<'_, T>,
    d_value: ArrayView2<'_, T>,
) -> CompositeGrad<T> {
    let (n, p, c) = layers.dim();
    let mut g = CompositeGrad { layers: Array3::zeros((n, p, c)), alphas: Array2::zeros((n, p)), background: Array2::zeros((p, c)) };
    let mut trans = vec![T::zero(); n + 1];
    let mut below = vec![T::zero(); c];
    for px in 0..p {
        trans[0] = T::one();
        for i in 0..n {
            trans[i + 1] = trans[i] * (T::one() - alphas[[i, px]]);
        }
        for ch in 0..c {
            below[ch] = bg[[px, ch]];
            g.background[[px, ch]] = trans[n] * d_value[[px, ch]];
        }
        for i in (0..n).rev() {
            let a = alphas[[i, px]];
            let mut da = T::zero();
            for ch in 0..c {
                let d = d_value[[px, ch]];
                let col = layers[[i, px, ch]];
                g.layers[[i, px, ch]] = trans[i] * a * d;
                da += trans[i] * (col - below[ch]) * d;
                below[ch] = a * col + (T::one() - a) * below[ch];
            }
            g.alphas[[i, px]] = da;
        }
    }
    g
}

/// Background flow with every foreground-masked pixel zeroed. `flow` is
/// `H x W x 2`, `masks` is `N x H x W`.
pub fn masked_background_flow<T: Real>(flow: ArrayView3<'_, T>, masks: ArrayView3<'_, T>) -> Result<Array3<T>> {
    let (h, w, _) = flow.dim();
    let (_, mh, mw) = masks.dim();
    if (mh, mw) != (h, w) {
        return Err(Error::InvalidInput(format!("flow {h}x{w} vs masks {mh}x{mw}")));
    }
    let mut out = flow.to_owned();
    for y in 0..h {
        for x in 0..w {
            let m = masks.index_axis(Axis(1), y).index_axis(Axis(1), x).iter().fold(T::zero(), |a, &b| a.max(b));
            let keep = T::one() - m;
            out[[y, x, 0]] *= keep;
            out[[y, x, 1]] *= keep;
        }
    }
    Ok(out)
}

/// Post-processing that copies input-frame color into layers where they
/// dominate the composite: with contribution weight `w` the blend factor is
/// `clamp((w - lo) / (hi - lo), 0, 1)`. `colors` is `N x H x W x 3`,
/// `alphas` `N x H x W`, `frame` `H x W x 3`.
pub fn detail_transfer<T: Real>(
    colors: ArrayView4<'_, T>,
    alphas: ArrayView3<'_, T>,
    frame: ArrayView3<'_, T>,
    lo: f64,
    hi: f64,
) -> Result<Array4<T>> {
    if !(lo < hi) {
        return Err(Error::InvalidThresholds { lo, hi });
    }
    let (n, h, w, c) = colors.dim();
    if alphas.dim() != (n, h, w) || frame.dim() != (h, w, c) {
        return Err(Error::InvalidInput("detail transfer shapes disagree".into()));
    }
    let alpha_flat = alphas.into_shape_with_order((n, h * w)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    check_alphas(&alpha_flat)?;
    let mut out = colors.to_owned();
    let (lo_t, span) = (T::lit(lo), T::lit(hi - lo));
    for y in 0..h {
        for x in 0..w {
            let mut trans = T::one();
            for i in 0..n {
                let a = alphas[[i, y, x]];
                let m = ((trans * a - lo_t) / span).max(T::zero()).min(T::one());
                for ch in 0..c {
                    out[[i, y, x, ch]] = m * frame[[y, x, ch]] + (T::one() - m) * colors[[i, y, x, ch]];
                }
                trans *= T::one() - a;
            }
        }
    }
    Ok(out)
}
