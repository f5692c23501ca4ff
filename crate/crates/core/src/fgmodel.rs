//! Foreground network: a U-Net mapping one layer's mask, the frame's
//! optical flow and a positional encoding of `(x, y, t)` to that layer's
//! color, alpha and flow. The same weights serve every layer and frame.

use ndarray::{concatenate, s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{leaky_relu, Conv2d, ConvTranspose2d, Module, Norm2d, NormTape, Param};
use crate::real::sigmoid;
use crate::{Error, Exec, Real, Result};

/// Frequencies per encoded coordinate.
pub const PE_FREQUENCIES: usize = 10;
/// Channels of the positional feature map: sin and cos per frequency for
/// each of `x`, `y`, `t`.
pub const FEATURE_CHANNELS: usize = 2 * PE_FREQUENCIES * 3;
/// Mask, two flow components, then the feature map.
pub const INPUT_CHANNELS: usize = 1 + 2 + FEATURE_CHANNELS;
/// Color (3), alpha (1), flow (2).
pub const OUTPUT_CHANNELS: usize = 6;

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FgConfig {
    /// Output channels of each stride-2 encoder stage.
    pub widths: Vec<usize>,
}

impl Default for FgConfig {
    fn default() -> Self {
        Self { widths: vec![64, 128, 256, 256, 256, 256, 256] }
    }
}

impl FgConfig {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Spatial sizes are padded up to a multiple of this.
    pub fn multiple(&self) -> usize {
        1 << self.stages()
    }
}

/// Positional encoding of every pixel of frame `t` of a `frames`-long video,
/// channel-major (`60 x H x W`).
pub fn build_feature_map(t: usize, frames: usize, h: usize, w: usize) -> Result<Array3<f32>> {
    if t >= frames {
        return Err(Error::InvalidFrame { t, frames });
    }
    let norm = |v: usize, n: usize| if n > 1 { 2.0 * v as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    let mut out = Array3::zeros((FEATURE_CHANNELS, h, w));
    let tn = norm(t, frames);
    for y in 0..h {
        let yn = norm(y, h);
        for x in 0..w {
            let xn = norm(x, w);
            for (comp, p) in [xn, yn, tn].into_iter().enumerate() {
                for l in 0..PE_FREQUENCIES {
                    let arg = (1u32 << l) as f64 * std::f64::consts::PI * p;
                    let c = comp * 2 * PE_FREQUENCIES + 2 * l;
                    out[[c, y, x]] = arg.sin() as f32;
                    out[[c + 1, y, x]] = arg.cos() as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Network input for one layer: mask (`H x W`), flow (`H x W x 2`, zero for
/// the last frame) and features (`60 x H x W`).
pub fn layer_input<T: Real>(mask: ArrayView2<'_, T>, flow: Option<ArrayView3<'_, T>>, features: ArrayView3<'_, T>) -> Result<Array3<T>> {
    let (h, w) = mask.dim();
    if features.dim() != (FEATURE_CHANNELS, h, w) {
        return Err(Error::InvalidInput(format!("features {:?} for a {h}x{w} mask", features.dim())));
    }
    let mut x = Array3::zeros((INPUT_CHANNELS, h, w));
    x.slice_mut(s![0, .., ..]).assign(&mask);
    if let Some(f) = flow {
        if f.dim() != (h, w, 2) {
            return Err(Error::InvalidInput(format!("flow {:?} for a {h}x{w} mask", f.dim())));
        }
        x.slice_mut(s![1, .., ..]).assign(&f.slice(s![.., .., 0]));
        x.slice_mut(s![2, .., ..]).assign(&f.slice(s![.., .., 1]));
    }
    x.slice_mut(s![3.., .., ..]).assign(&features);
    Ok(x)
}

/// Mirror index into `0..n` without repeating the edge sample.
#[inline]
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n { m } else { period - m }
}

/// Pads `x` (`c x h x w`) on the bottom and right by reflection.
pub fn reflect_pad<T: Real>(x: &Array3<T>, hp: usize, wp: usize) -> Array3<T> {
    let (c, h, w) = x.dim();
    if (hp, wp) == (h, w) {
        return x.clone();
    }
    Array3::from_shape_fn((c, hp, wp), |(ci, y, xx)| x[[ci, reflect(y, h), reflect(xx, w)]])
}

/// One layer's prediction, channel-major.
#[derive(Clone, Debug)]
pub struct LayerOutput<T> {
    /// `3 x H x W`, in `[0, 1]`.
    pub color: Array3<T>,
    /// `H x W`, in `[0, 1]`.
    pub alpha: Array2<T>,
    /// `2 x H x W`, pixels per frame.
    pub flow: Array3<T>,
}

/// Activations of one forward pass.
#[derive(Clone, Debug)]
pub struct FgTape<T> {
    size: (usize, usize),
    padded: (usize, usize),
    first_cols: Vec<T>,
    /// Encoder activations `e_i`.
    enc: Vec<Array3<T>>,
    /// Patch matrices of encoder stages after the first.
    enc_cols: Vec<Vec<T>>,
    enc_norm: Vec<Option<NormTape<T>>>,
    /// Input of each decoder transposed convolution, and of the head last.
    dec_in: Vec<Array3<T>>,
    /// Normalization state of each decoder stage, in forward order.
    dec_norm: Vec<NormTape<T>>,
    /// Padded head output after activations.
    out: Array3<T>,
}

#[derive(Clone, Debug)]
pub struct ForegroundNet<T> {
    pub config: FgConfig,
    pub encoder: Vec<Conv2d<T>>,
    /// Normalization after encoder stage `i`; absent on the outermost and
    /// innermost stages.
    pub encoder_norm: Vec<Option<Norm2d<T>>>,
    /// `decoder[i]` produces the activation at encoder level `i` resolution.
    pub decoder: Vec<ConvTranspose2d<T>>,
    pub decoder_norm: Vec<Norm2d<T>>,
    pub head: ConvTranspose2d<T>,
}

impl<T: Real> ForegroundNet<T> {
    pub fn new(config: FgConfig, seed: u64) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::InvalidInput(format!("bad foreground widths {:?}", config.widths)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = &config.widths;
        let s = w.len();
        let encoder = (0..s)
            .map(|i| Conv2d::new(&format!("fg.enc{i}"), if i == 0 { INPUT_CHANNELS } else { w[i - 1] }, w[i], 4, 2, 1, &mut rng))
            .collect();
        // decoder[i-1] maps level i to level i-1
        let decoder = (1..s)
            .rev()
            .map(|i| {
                let cin = if i == s - 1 { w[i] } else { 2 * w[i] };
                ConvTranspose2d::new(&format!("fg.dec{}", i - 1), cin, w[i - 1], 4, 2, 1, &mut rng)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        let encoder_norm = (0..s).map(|i| (i > 0 && i + 1 < s).then(|| Norm2d::new(&format!("fg.enc{i}.norm"), w[i]))).collect();
        let decoder_norm = (0..s - 1).map(|i| Norm2d::new(&format!("fg.dec{i}.norm"), w[i])).collect();
        let head_in = if s == 1 { w[0] } else { 2 * w[0] };
        let head = ConvTranspose2d::new("fg.head", head_in, OUTPUT_CHANNELS, 4, 2, 1, &mut rng);
        Ok(Self { config, encoder, encoder_norm, decoder, decoder_norm, head })
    }

    /// Forward pass on one `63 x H x W` input.
    pub fn forward(&self, input: &Array3<T>) -> Result<(LayerOutput<T>, FgTape<T>)> {
        let (c, h, w) = input.dim();
        if c != INPUT_CHANNELS || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!("foreground input {:?}", input.dim())));
        }
        let m = self.config.multiple();
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let x = reflect_pad(input, hp, wp);
        let s = self.config.stages();
        let slope = T::lit(LEAKY_SLOPE);

        let mut enc = Vec::with_capacity(s);
        let mut enc_cols = Vec::with_capacity(s.saturating_sub(1));
        let mut enc_norm = Vec::with_capacity(s);
        let (mut e, first_cols) = self.encoder[0].forward(&x);
        e.mapv_inplace(|v| leaky_relu(v, slope));
        enc.push(e);
        enc_norm.push(None);
        for i in 1..s {
            let (mut e, cols) = self.encoder[i].forward(&enc[i - 1]);
            let tape = self.encoder_norm[i].as_ref().map(|n| {
                let (y, tape) = n.forward(&e);
                e = y;
                tape
            });
            e.mapv_inplace(|v| leaky_relu(v, slope));
            enc.push(e);
            enc_cols.push(cols);
            enc_norm.push(tape);
        }

        let mut dec_in = Vec::with_capacity(s);
        let mut dec_norm = Vec::with_capacity(s.saturating_sub(1));
        let mut d = enc[s - 1].clone();
        for i in (1..s).rev() {
            let xin = if i == s - 1 { d } else { concatenate![Axis(0), d, enc[i]] };
            let (mut y, tape) = self.decoder_norm[i - 1].forward(&self.decoder[i - 1].forward(&xin));
            y.mapv_inplace(|v| v.max(T::zero()));
            dec_in.push(xin);
            dec_norm.push(tape);
            d = y;
        }
        let xin = if s == 1 { d } else { concatenate![Axis(0), d, enc[0]] };
        let mut out = self.head.forward(&xin);
        dec_in.push(xin);
        for ch in 0..4 {
            out.index_axis_mut(Axis(0), ch).mapv_inplace(sigmoid);
        }
        let crop = out.slice(s![.., ..h, ..w]);
        let result = LayerOutput {
            color: crop.slice(s![0..3, .., ..]).to_owned(),
            alpha: crop.index_axis(Axis(0), 3).to_owned(),
            flow: crop.slice(s![4..6, .., ..]).to_owned(),
        };
        Ok((result, FgTape { size: (h, w), padded: (hp, wp), first_cols, enc, enc_cols, enc_norm, dec_in, dec_norm, out }))
    }

    /// Accumulates parameter gradients given partials of the loss with
    /// respect to the cropped outputs. Absent partials are zero.
    pub fn backward(&mut self, tape: &FgTape<T>, d_color: Option<&Array3<T>>, d_alpha: Option<&Array2<T>>, d_flow: Option<&Array3<T>>) {
        let (h, w) = tape.size;
        let (hp, wp) = tape.padded;
        let s = self.config.stages();
        let mut d_out = Array3::zeros((OUTPUT_CHANNELS, hp, wp));
        {
            let mut crop = d_out.slice_mut(s![.., ..h, ..w]);
            if let Some(dc) = d_color {
                crop.slice_mut(s![0..3, .., ..]).assign(dc);
            }
            if let Some(da) = d_alpha {
                crop.index_axis_mut(Axis(0), 3).assign(da);
            }
            if let Some(df) = d_flow {
                crop.slice_mut(s![4..6, .., ..]).assign(df);
            }
        }
        for ch in 0..4 {
            let y = tape.out.index_axis(Axis(0), ch);
            d_out.index_axis_mut(Axis(0), ch).zip_mut_with(&y, |g, &v| *g *= v * (T::one() - v));
        }

        let head_in = &tape.dec_in[s - 1];
        let dx = self.head.backward(head_in, &d_out, true).expect("head dx");
        let slope = T::lit(LEAKY_SLOPE);
        // gradients reaching each encoder activation through skips
        let mut d_enc: Vec<Option<Array3<T>>> = vec![None; s];
        let split = |dx: Array3<T>, first: usize| -> (Array3<T>, Array3<T>) {
            (dx.slice(s![..first, .., ..]).to_owned(), dx.slice(s![first.., .., ..]).to_owned())
        };
        let mut d_dec = if s == 1 {
            d_enc[0] = Some(dx);
            None
        } else {
            let (dd, de) = split(dx, self.config.widths[0]);
            d_enc[0] = Some(de);
            Some(dd)
        };
        // d_dec holds the gradient of the decoder activation at level i-1
        for i in 1..s {
            let mut dy = d_dec.take().expect("decoder grad");
            // ReLU: output of decoder[i-1] is the first block of the next input
            let next_in = &tape.dec_in[s - i];
            let wi = self.config.widths[i - 1];
            let act = next_in.slice(s![..wi, .., ..]);
            dy.zip_mut_with(&act, |g, &a| {
                if a <= T::zero() {
                    *g = T::zero();
                }
            });
            let dy = self.decoder_norm[i - 1].backward(&tape.dec_norm[s - 1 - i], &dy);
            let xin = &tape.dec_in[s - 1 - i];
            let dx = self.decoder[i - 1].backward(xin, &dy, true).expect("decoder dx");
            if i == s - 1 {
                accumulate(&mut d_enc[i], dx);
            } else {
                let (dd, de) = split(dx, self.config.widths[i]);
                accumulate(&mut d_enc[i], de);
                d_dec = Some(dd);
            }
        }

        for i in (0..s).rev() {
            let mut de = d_enc[i].take().expect("encoder grad");
            de.zip_mut_with(&tape.enc[i], |g, &a| {
                if a <= T::zero() {
                    *g *= slope;
                }
            });
            if let (Some(norm), Some(nt)) = (self.encoder_norm[i].as_mut(), tape.enc_norm[i].as_ref()) {
                de = norm.backward(nt, &de);
            }
            if i == 0 {
                self.encoder[0].backward(&tape.first_cols, &de, None);
            } else {
                let (_, ph, pw) = tape.enc[i - 1].dim();
                let dx = self.encoder[i].backward(&tape.enc_cols[i - 1], &de, Some((ph, pw))).expect("encoder dx");
                accumulate(&mut d_enc[i - 1], dx);
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Array3<T>>, g: Array3<T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<T: Real> Module<T> for ForegroundNet<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.encoder.iter().for_each(|l| l.visit_params(f));
        self.encoder_norm.iter().flatten().for_each(|l| l.visit_params(f));
        self.decoder.iter().for_each(|l| l.visit_params(f));
        self.decoder_norm.iter().for_each(|l| l.visit_params(f));
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder.iter_mut().for_each(|l| l.visit_params_mut(f));
        self.encoder_norm.iter_mut().flatten().for_each(|l| l.visit_params_mut(f));
        self.decoder.iter_mut().for_each(|l| l.visit_params_mut(f));
        self.decoder_norm.iter_mut().for_each(|l| l.visit_params_mut(f));
        self.head.visit_params_mut(f);
    }
}

/// All layers of one frame, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct OmnimatteLayers<T> {
    /// `N x H x W x 3`
    pub colors: Array4<T>,
    /// `N x H x W`
    pub alphas: Array3<T>,
    /// `N x H x W x 2`
    pub flows: Array4<T>,
}

impl<T: Real> OmnimatteLayers<T> {
    pub fn from_outputs(outputs: &[LayerOutput<T>]) -> Self {
        let n = outputs.len();
        let (h, w) = outputs.first().map_or((0, 0), |o| o.alpha.dim());
        let mut colors = Array4::zeros((n, h, w, 3));
        let mut alphas = Array3::zeros((n, h, w));
        let mut flows = Array4::zeros((n, h, w, 2));
        for (i, o) in outputs.iter().enumerate() {
            colors.index_axis_mut(Axis(0), i).assign(&o.color.view().permuted_axes([1, 2, 0]));
            alphas.index_axis_mut(Axis(0), i).assign(&o.alpha);
            flows.index_axis_mut(Axis(0), i).assign(&o.flow.view().permuted_axes([1, 2, 0]));
        }
        Self { colors, alphas, flows }
    }
}

/// Runs the network on each layer's mask independently. `masks` is
/// `N x H x W`, `flow` `H x W x 2` (absent for the last frame), `features`
/// `60 x H x W`.
pub fn predict_layers<T: Real>(
    net: &ForegroundNet<T>,
    masks: ArrayView3<'_, T>,
    flow: Option<ArrayView3<'_, T>>,
    features: ArrayView3<'_, T>,
    exec: Exec,
) -> Result<OmnimatteLayers<T>> {
    let (n, h, w) = masks.dim();
    if features.dim() != (FEATURE_CHANNELS, h, w) || flow.is_some_and(|f| f.dim() != (h, w, 2)) {
        return Err(Error::InvalidInput(format!(
            "masks {:?}, flow {:?}, features {:?}",
            masks.dim(),
            flow.map(|f| f.dim()),
            features.dim()
        )));
    }
    let outputs = exec.map(n, |i| {
        let x = layer_input(masks.index_axis(Axis(0), i), flow, features)?;
        net.forward(&x).map(|(o, _)| o)
    });
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(OmnimatteLayers::from_outputs(&outputs))
}
