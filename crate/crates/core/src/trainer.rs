//! Joint optimization: each step runs the foreground network on one full
//! frame, renders the background field at a sparse random ray batch,
//! composites, assembles the weighted loss and updates both models.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::composite::{composite_backward, composite_colors, composite_flows, masked_background_flow};
use crate::fgmodel::{build_feature_map, layer_input, FgConfig, FgTape, ForegroundNet, LayerOutput, OmnimatteLayers};
use crate::field::{FieldConfig, TensorVmField};
use crate::geom::{self, Aabb};
use crate::io::artifacts::{write_atomic, RunArtifacts};
use crate::io::VideoDataset;
use crate::losses::{
    alpha_l0, alpha_l1, alpha_reg_grad, alpha_warp_loss, depth_loss, flow_grad, flow_loss, mask_loss, recon_grad,
    recon_loss, total_loss, union_mask, LossParts, LossReport, LossWeights, MaskLossScheduler,
};
use crate::nn::{Adam, Module};
use crate::render::{distortion_grad, distortion_loss, generate_rays, render_backward, render_image, render_rays, RenderOptions};
use crate::{Error, Exec, Result};

const STREAM_FRAME: u64 = 0;
const STREAM_RAYS: u64 = 1;
const STREAM_PERTURB: u64 = 2;
const STREAMS: u64 = 8;

/// Rays rendered per chunk when producing full frames.
pub const IMAGE_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub fg_lr: f64,
    /// The foreground rate is constant until this step, then decays by
    /// `fg_decay_rate` every `fg_decay_interval` steps.
    pub fg_decay_start: usize,
    pub fg_decay_interval: usize,
    pub fg_decay_rate: f64,
    pub grid_lr: f64,
    pub decoder_lr: f64,
    /// Both background rates reach this fraction of their initial value at
    /// the last step.
    pub bg_decay_ratio: f64,
    pub ray_batch: usize,
    pub upsample_steps: Vec<usize>,
    pub seed: u64,
    pub weights: LossWeights,
    pub near: Option<f64>,
    pub far: Option<f64>,
    pub samples: usize,
    pub transmittance_threshold: f64,
    pub field: FieldConfig,
    pub foreground: FgConfig,
    pub checkpoint_every: usize,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    /// Scale the total-variation weights with the background decay factor.
    pub decay_tv: bool,
    /// Far plane of the camera-frustum bounds estimate, in multiples of the
    /// median pairwise camera distance.
    pub bounds_far_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 15000,
            fg_lr: 0.001,
            fg_decay_start: 10000,
            fg_decay_interval: 10000,
            fg_decay_rate: 0.1,
            grid_lr: 0.02,
            decoder_lr: 0.001,
            bg_decay_ratio: 0.1,
            ray_batch: 4096,
            upsample_steps: vec![2000, 3000, 4000, 5500],
            seed: 3,
            weights: LossWeights::shared(),
            near: None,
            far: None,
            samples: 256,
            transmittance_threshold: 1e-4,
            field: FieldConfig::default(),
            foreground: FgConfig::default(),
            checkpoint_every: 5000,
            adam_betas: [0.9, 0.99],
            adam_eps: 1e-8,
            decay_tv: true,
            bounds_far_factor: 4.0,
        }
    }
}

impl TrainConfig {
    /// The 10,000-step preset with the depth loss enabled.
    pub fn davis() -> Self {
        Self { steps: 10000, weights: LossWeights::davis(), ..Self::default() }
    }

    /// Small networks and grids sized for 64x64 clips on a CPU.
    pub fn desk() -> Self {
        Self {
            steps: 5000,
            ray_batch: 1024,
            samples: 64,
            upsample_steps: vec![1000, 1500, 2000, 2750],
            field: FieldConfig {
                density_rank: 8,
                appearance_rank: 16,
                feature_dim: 27,
                decoder_hidden: 64,
                decoder_layers: 2,
                view_frequencies: 2,
                init_resolution: 32,
                final_resolution: 128,
                init_scale: 0.1,
            },
            foreground: FgConfig { widths: vec![16, 32, 64, 64, 64] },
            ..Self::default()
        }
    }

    pub fn from_yaml(text: &str) -> Result<Self> {
        let cfg: Self = serde_yaml::from_str(text).map_err(|e| Error::InvalidInput(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_yaml(&self) -> Result<String> {
        Ok(serde_yaml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.steps == 0 || self.upsample_steps.iter().any(|&s| s == 0 || s >= self.steps) {
            return bad(format!("steps {} must exceed every upsample step {:?}", self.steps, self.upsample_steps));
        }
        if self.ray_batch == 0 {
            return bad("ray_batch must be at least 1".into());
        }
        let rates = [self.fg_lr, self.grid_lr, self.decoder_lr, self.fg_decay_rate, self.bg_decay_ratio];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) || self.fg_decay_interval == 0 {
            return bad("learning rates and decay factors must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if !(self.bounds_far_factor > 0.0) {
            return bad(format!("bounds_far_factor {}", self.bounds_far_factor));
        }
        self.weights.validate()?;
        self.render_options(0.05, 100.0).validate()
    }

    fn render_options(&self, near: f64, far: f64) -> RenderOptions {
        RenderOptions {
            near: self.near.unwrap_or(near),
            far: self.far.unwrap_or(far),
            samples: self.samples,
            perturb: false,
            seed: 0,
            transmittance_threshold: self.transmittance_threshold,
        }
    }

    /// Background decay factor at `step`.
    pub fn bg_factor(&self, step: usize) -> f64 {
        self.bg_decay_ratio.powf(step as f64 / self.steps as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrGroup {
    Foreground,
    BgGrid,
    BgDecoder,
}

pub fn lr_at_step(config: &TrainConfig, step: usize, which: LrGroup) -> f64 {
    match which {
        LrGroup::Foreground => {
            let over = step.saturating_sub(config.fg_decay_start) as f64;
            config.fg_lr * config.fg_decay_rate.powf(over / config.fg_decay_interval as f64)
        }
        LrGroup::BgGrid => config.grid_lr * config.bg_factor(step),
        LrGroup::BgDecoder => config.decoder_lr * config.bg_factor(step),
    }
}

/// Deterministic generator for one purpose at one step.
pub fn step_rng(seed: u64, step: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 * STREAMS + stream);
    rng
}

/// Draws `k` distinct pixels `[x, y]` uniformly from those not excluded.
pub fn sample_ray_batch(
    frame_shape: (usize, usize),
    k: usize,
    exclusion: Option<ArrayView2<'_, bool>>,
    seed: u64,
    step: usize,
) -> Result<Vec<[usize; 2]>> {
    let (h, w) = frame_shape;
    if let Some(m) = &exclusion {
        if m.dim() != (h, w) {
            return Err(Error::InvalidInput(format!("exclusion mask {:?} for a {h}x{w} frame", m.dim())));
        }
    }
    let admissible: Vec<usize> = (0..h * w).filter(|&i| exclusion.as_ref().map_or(true, |m| !m[[i / w, i % w]])).collect();
    if admissible.is_empty() || k == 0 || k > admissible.len() {
        return Err(Error::EmptyBatch(format!("{k} rays requested from {} admissible pixels", admissible.len())));
    }
    let mut rng = step_rng(seed, step, STREAM_RAYS);
    Ok(rand::seq::index::sample(&mut rng, admissible.len(), k)
        .into_iter()
        .map(|j| [admissible[j] % w, admissible[j] / w])
        .collect())
}

/// Scene box: the dataset's `bounds.json` if present, otherwise the union of
/// camera frusta out to `far_factor` times the median camera spacing.
pub fn scene_bounds(data: &VideoDataset, far_factor: f64) -> Result<Aabb> {
    if let Some(b) = data.bounds {
        return Ok(b);
    }
    let cams = &data.cameras;
    let centers: Vec<_> = (0..cams.len()).map(|t| cams.center(t)).collect();
    let mut dists = Vec::new();
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            dists.push(geom::norm(geom::sub(centers[i], centers[j])));
        }
    }
    dists.sort_by(f64::total_cmp);
    let median = dists.get(dists.len() / 2).copied().unwrap_or(0.0);
    if !(median > 1e-9) {
        return Err(Error::InvalidBounds("cameras do not translate; provide bounds.json".into()));
    }
    let far = far_factor * median;
    let k = &cams.intrinsics;
    let (xm, ym) = (k.width as f64 - 0.5, k.height as f64 - 0.5);
    let mut b = Aabb::empty();
    for (t, &c) in centers.iter().enumerate() {
        b.include(c);
        for (x, y) in [(-0.5, -0.5), (xm, -0.5), (-0.5, ym), (xm, ym)] {
            b.include(geom::add(c, geom::scale(cams.pixel_direction(t, x, y), far)));
        }
    }
    Ok(b)
}

/// Render range for a box: from just in front of the cameras to past its
/// farthest corner.
pub fn default_range(data: &VideoDataset, bbox: &Aabb) -> (f64, f64) {
    let mut far: f64 = 0.0;
    for t in 0..data.cameras.len() {
        let c = data.cameras.center(t);
        for p in bbox.corners() {
            far = far.max(geom::norm(geom::sub(p, c)));
        }
    }
    (0.05, (far * 1.01).max(0.1))
}

/// Foreground network and background field.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub foreground: ForegroundNet<f32>,
    pub field: TensorVmField<f32>,
}

impl JointModel {
    pub fn new(config: &TrainConfig, bbox: Aabb) -> Result<Self> {
        Ok(Self {
            foreground: ForegroundNet::new(config.foreground.clone(), config.seed)?,
            field: TensorVmField::new(config.field.clone(), bbox, config.seed.wrapping_add(1))?,
        })
    }
}

/// Network inputs for frame `t`, one per layer.
pub fn frame_inputs(data: &VideoDataset, t: usize) -> Result<Vec<Array3<f32>>> {
    let (h, w) = data.shape();
    let features = build_feature_map(t, data.num_frames(), h, w)?;
    let flow = data.flow_at(t);
    (0..data.num_layers())
        .map(|i| layer_input(data.masks.slice(s![i, t, .., ..]), flow, features.view()))
        .collect()
}

/// Everything the model predicts for one frame.
#[derive(Clone, Debug)]
pub struct FrameOutputs {
    pub layers: OmnimatteLayers<f32>,
    /// `H x W x 3`
    pub background: Array3<f32>,
    pub depth: Array2<f32>,
    /// `H x W x 3`
    pub composite: Array3<f32>,
}

pub fn render_frame_outputs(
    model: &JointModel,
    data: &VideoDataset,
    t: usize,
    opts: &RenderOptions,
    exec: Exec,
) -> Result<FrameOutputs> {
    let (h, w) = data.shape();
    let inputs = frame_inputs(data, t)?;
    let outputs = exec.map(inputs.len(), |i| model.foreground.forward(&inputs[i]).map(|(o, _)| o));
    let layers = OmnimatteLayers::from_outputs(&outputs.into_iter().collect::<Result<Vec<_>>>()?);
    let bg = render_image(&model.field, &data.cameras, t, opts, IMAGE_CHUNK, exec)?;
    let n = layers.alphas.dim().0;
    let p = h * w;
    let colors = layers.colors.view().into_shape_with_order((n, p, 3)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let alphas = layers.alphas.view().into_shape_with_order((n, p)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let bg_flat = bg.rgb.view().into_shape_with_order((p, 3)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let comp = composite_colors(colors, alphas, bg_flat)?;
    let composite = comp.value.into_shape_with_order((h, w, 3)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(FrameOutputs { layers, background: bg.rgb, depth: bg.depth, composite })
}

/// Mutable state of a joint run.
pub struct JointTrainer<'a> {
    pub config: TrainConfig,
    data: &'a VideoDataset,
    inputs: Vec<Vec<Array3<f32>>>,
    /// Per frame with flow: masked background flow and target, `P x 2`.
    bg_flows: Vec<Array2<f32>>,
    target_flows: Vec<Array2<f32>>,
    union: Vec<Vec<f32>>,
    pub model: JointModel,
    fg_adam: Adam<f32>,
    grid_adam: Adam<f32>,
    net_adam: Adam<f32>,
    pub scheduler: MaskLossScheduler,
    /// Completed steps.
    pub step: usize,
    pub history: Vec<LossReport>,
    pub render: RenderOptions,
    pub exec: Exec,
}

fn flat2(a: ndarray::ArrayView3<'_, f32>) -> Array2<f32> {
    let (h, w, c) = a.dim();
    a.to_owned().into_shape_with_order((h * w, c)).expect("contiguous")
}

impl<'a> JointTrainer<'a> {
    pub fn new(data: &'a VideoDataset, config: TrainConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        let (h, w) = data.shape();
        if config.ray_batch > h * w {
            return Err(Error::InvalidInput(format!("ray_batch {} exceeds the {} pixels of a frame", config.ray_batch, h * w)));
        }
        let bbox = scene_bounds(data, config.bounds_far_factor)?;
        let (near, far) = default_range(data, &bbox);
        let render = config.render_options(near, far);
        render.validate()?;
        let t_len = data.num_frames();
        let inputs = (0..t_len).map(|t| frame_inputs(data, t)).collect::<Result<Vec<_>>>()?;
        let mut bg_flows = Vec::new();
        let mut target_flows = Vec::new();
        let mut union = Vec::new();
        for t in 0..t_len {
            let masks = data.masks.slice(s![.., t, .., ..]).to_owned();
            union.push(union_mask(&masks).iter().copied().collect());
            if let Some(f) = data.flow_at(t) {
                bg_flows.push(flat2(masked_background_flow(f, masks.view())?.view()));
                target_flows.push(flat2(f));
            }
        }
        let [b1, b2] = config.adam_betas;
        let adam = Adam::new(b1, b2, config.adam_eps);
        Ok(Self {
            model: JointModel::new(&config, bbox)?,
            scheduler: MaskLossScheduler::new(&config.weights),
            fg_adam: adam.clone(),
            grid_adam: adam.clone(),
            net_adam: adam,
            config,
            data,
            inputs,
            bg_flows,
            target_flows,
            union,
            step: 0,
            history: Vec::new(),
            render,
            exec,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    /// Runs one optimization step and returns its loss report.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let step = self.step + 1;
        let cfg = &self.config;
        let wts = &cfg.weights;
        let data = self.data;
        let exec = self.exec;
        let (h, w) = data.shape();
        let (t_len, n, p) = (data.num_frames(), data.num_layers(), h * w);
        let t = step_rng(cfg.seed, step, STREAM_FRAME).gen_range(0..t_len);

        // foreground on the full frame
        let net = &self.model.foreground;
        let fwd: Vec<(LayerOutput<f32>, FgTape<f32>)> =
            exec.map(n, |i| net.forward(&self.inputs[t][i])).into_iter().collect::<Result<_>>()?;
        let finite = |o: &LayerOutput<f32>| o.color.iter().chain(&o.alpha).chain(&o.flow).all(|v| v.is_finite());
        if !fwd.iter().all(|(o, _)| finite(o)) {
            return Err(Error::DivergedLoss { step, detail: "non-finite foreground output".into() });
        }
        let has_next = t + 1 < t_len;
        let next_alpha: Vec<Array2<f32>> = if has_next && wts.alpha_warp > 0.0 {
            exec.map(n, |i| net.forward(&self.inputs[t + 1][i]).map(|(o, _)| o.alpha)).into_iter().collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        // background at sparse rays
        let pixels = sample_ray_batch((h, w), cfg.ray_batch, None, cfg.seed, step)?;
        let k = pixels.len();
        let rays = generate_rays(&data.cameras, t, &pixels)?;
        let opts = RenderOptions {
            perturb: true,
            seed: step_rng(cfg.seed, step, STREAM_PERTURB).gen(),
            ..self.render
        };
        let render = render_rays(&self.model.field, &rays, &opts, true, exec)?;
        if !render.rgb.iter().chain(&render.depth).all(|v| v.is_finite()) {
            return Err(Error::DivergedLoss { step, detail: "non-finite background render".into() });
        }

        let mut d_color = vec![Array3::<f32>::zeros((3, h, w)); n];
        let mut d_alpha = vec![Array2::<f32>::zeros((h, w)); n];
        let mut d_flow = vec![Array3::<f32>::zeros((2, h, w)); n];
        let mut parts = LossParts::default();

        // reconstruction at the sampled pixels
        let mut layer_rgb = Array3::<f32>::zeros((n, k, 3));
        let mut layer_a = Array2::<f32>::zeros((n, k));
        let mut target = Array2::<f32>::zeros((k, 3));
        for (j, &[x, y]) in pixels.iter().enumerate() {
            for (i, (o, _)) in fwd.iter().enumerate() {
                for c in 0..3 {
                    layer_rgb[[i, j, c]] = o.color[[c, y, x]];
                }
                layer_a[[i, j]] = o.alpha[[y, x]];
            }
            for c in 0..3 {
                target[[j, c]] = data.frames[[t, y, x, c]];
            }
        }
        let comp = composite_colors(layer_rgb.view(), layer_a.view(), render.rgb.view())?;
        parts.recons = recon_loss(comp.value.view(), target.view())?;
        let mut d_value = recon_grad(comp.value.view(), target.view());
        d_value.mapv_inplace(|v| v * wts.recons as f32);
        let cg = composite_backward(layer_rgb.view(), layer_a.view(), render.rgb.view(), d_value.view());
        for (j, &[x, y]) in pixels.iter().enumerate() {
            for i in 0..n {
                for c in 0..3 {
                    d_color[i][[c, y, x]] += cg.layers[[i, j, c]];
                }
                d_alpha[i][[y, x]] += cg.alphas[[i, j]];
            }
        }

        // flow composition over the full frame
        if has_next {
            let mut lf = Array3::<f32>::zeros((n, p, 2));
            let mut la = Array2::<f32>::zeros((n, p));
            for (i, (o, _)) in fwd.iter().enumerate() {
                for y in 0..h {
                    for x in 0..w {
                        lf[[i, y * w + x, 0]] = o.flow[[0, y, x]];
                        lf[[i, y * w + x, 1]] = o.flow[[1, y, x]];
                        la[[i, y * w + x]] = o.alpha[[y, x]];
                    }
                }
            }
            let bgf = &self.bg_flows[t];
            let comp_f = composite_flows(lf.view(), la.view(), bgf.view())?;
            parts.flow = flow_loss(comp_f.value.view(), self.target_flows[t].view(), &self.union[t]);
            if wts.flow > 0.0 {
                let mut g = flow_grad(comp_f.value.view(), self.target_flows[t].view(), &self.union[t]);
                g.mapv_inplace(|v| v * wts.flow as f32);
                let fg = composite_backward(lf.view(), la.view(), bgf.view(), g.view());
                for i in 0..n {
                    for y in 0..h {
                        for x in 0..w {
                            d_flow[i][[0, y, x]] += fg.layers[[i, y * w + x, 0]];
                            d_flow[i][[1, y, x]] += fg.layers[[i, y * w + x, 1]];
                            d_alpha[i][[y, x]] += fg.alphas[[i, y * w + x]];
                        }
                    }
                }
            }
        }

        // alpha regularization, mask bootstrap and temporal consistency
        let mut alphas = Array3::<f32>::zeros((n, h, w));
        for (i, (o, _)) in fwd.iter().enumerate() {
            alphas.index_axis_mut(Axis(0), i).assign(&o.alpha);
        }
        parts.alpha_l1 = alpha_l1(alphas.view());
        parts.alpha_l0 = alpha_l0(alphas.view());
        let masks = data.masks.slice(s![.., t, .., ..]);
        parts.mask = mask_loss(alphas.view(), masks)?;
        let mask_weight = self.scheduler.step(parts.mask, step);
        let count = n * p;
        let mask_scale = (2.0 * mask_weight / count as f64) as f32;
        for i in 0..n {
            let a_i = alphas.index_axis(Axis(0), i);
            let m_i = masks.index_axis(Axis(0), i);
            ndarray::Zip::from(&mut d_alpha[i]).and(&a_i).and(&m_i).for_each(|d, &a, &m| {
                *d += alpha_reg_grad(a, count, wts.alpha_l1, wts.alpha_l0) + mask_scale * (a - m);
            });
        }
        if !next_alpha.is_empty() {
            let flow = data.flow_at(t).expect("flow for all but the last frame");
            let mut total = 0.0;
            for i in 0..n {
                match alpha_warp_loss(alphas.index_axis(Axis(0), i), next_alpha[i].view(), flow) {
                    Ok((l, g)) => {
                        total += l;
                        let scale = (wts.alpha_warp / n as f64) as f32;
                        d_alpha[i].zip_mut_with(&g, |d, &v| *d += scale * v);
                    }
                    Err(Error::EmptyBatch(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            parts.alpha_warp = total / n as f64;
        }

        // background-only terms
        let mut d_depth = vec![0.0f32; k];
        let mut depth_degenerate = false;
        if wts.depth > 0.0 {
            let mono: Vec<f32> = pixels.iter().map(|&[x, y]| data.mono_depth[[t, y, x]]).collect();
            let valid: Vec<bool> = render.accumulation.iter().map(|&a| a > 0.5).collect();
            let dl = depth_loss(&render.depth, &mono, &valid);
            parts.depth = dl.value;
            depth_degenerate = dl.degenerate;
            for (d, g) in d_depth.iter_mut().zip(&dl.grad) {
                *d = g * wts.depth as f32;
            }
        }
        let d_weights = if wts.distort > 0.0 {
            parts.distort = distortion_loss(render.weights.view(), render.s.view(), render.intervals.view())?;
            let mut g = distortion_grad(render.weights.view(), render.s.view(), render.intervals.view())?;
            g.mapv_inplace(|v| v * wts.distort as f32);
            Some(g)
        } else {
            None
        };
        let tv_scale = if cfg.decay_tv { cfg.bg_factor(step - 1) } else { 1.0 };
        let mut effective = wts.clone();
        effective.tv_density *= tv_scale;
        effective.tv_appearance *= tv_scale;
        if effective.tv_density > 0.0 || effective.tv_appearance > 0.0 {
            (parts.tv_density, parts.tv_appearance) = self.model.field.tv_loss();
        }

        let mut report = total_loss(&parts, &effective, mask_weight, step)?;
        report.psnr = Some(-10.0 * parts.recons.max(1e-30).log10());
        report.depth_degenerate = depth_degenerate;

        // backward
        for (i, (_, tape)) in fwd.iter().enumerate() {
            self.model.foreground.backward(tape, Some(&d_color[i]), Some(&d_alpha[i]), Some(&d_flow[i]));
        }
        render_backward(
            &mut self.model.field,
            &render,
            cg.background.view(),
            &d_depth,
            None,
            d_weights.as_ref().map(|g| g.view()),
            exec,
        );
        self.model.field.tv_backward(effective.tv_density, effective.tv_appearance);
        if !self.model.foreground.grads_finite() || !self.model.field.grads_finite() {
            return Err(Error::DivergedLoss { step, detail: "non-finite gradient".into() });
        }

        let cfg = &self.config;
        self.fg_adam.update(&mut self.model.foreground, lr_at_step(cfg, step - 1, LrGroup::Foreground));
        self.grid_adam.update(&mut self.model.field.grids(), lr_at_step(cfg, step - 1, LrGroup::BgGrid));
        self.net_adam.update(&mut self.model.field.networks(), lr_at_step(cfg, step - 1, LrGroup::BgDecoder));
        if !self.model.foreground.params_finite() || !self.model.field.params_finite() {
            return Err(Error::DivergedLoss { step, detail: "non-finite parameter".into() });
        }
        if self.model.field.upsample(step, &cfg.upsample_steps) {
            self.grid_adam.reset();
        }
        self.step = step;
        self.history.push(report.clone());
        Ok(report)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let f = &self.model.field;
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "joint",
            "step": self.step,
            "resolution": f.resolution,
            "bbox": f.bbox,
            "scheduler": self.scheduler,
            "adam_steps": [self.fg_adam.step, self.grid_adam.step, self.net_adam.step],
            "config": self.config,
        }));
        ck.insert_module("fg", &self.model.foreground);
        ck.insert_module("bg", &self.model.field);
        for (name, adam) in [("fg", &self.fg_adam), ("grid", &self.grid_adam), ("net", &self.net_adam)] {
            store_adam(&mut ck, name, adam);
        }
        Ok(ck)
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let meta = &ck.meta;
        let step = meta_usize(meta, "step")?;
        self.model.field = load_field(ck, "bg", &self.config.field)?;
        ck.load_module("fg", &mut self.model.foreground)?;
        self.scheduler = serde_json::from_value(meta["scheduler"].clone())?;
        let steps: [u64; 3] = serde_json::from_value(meta["adam_steps"].clone())?;
        for ((name, adam), s) in [("fg", &mut self.fg_adam), ("grid", &mut self.grid_adam), ("net", &mut self.net_adam)]
            .into_iter()
            .zip(steps)
        {
            load_adam(ck, name, adam, s);
        }
        self.step = step;
        self.history.retain(|r| r.step <= step);
        Ok(())
    }
}

fn meta_usize(meta: &serde_json::Value, key: &str) -> Result<usize> {
    meta[key].as_u64().map(|v| v as usize).ok_or_else(|| Error::CorruptData(format!("checkpoint meta lacks {key}")))
}

/// Rebuilds a field stored under `prefix` at its saved resolution and box.
pub fn load_field(ck: &Checkpoint, prefix: &str, config: &FieldConfig) -> Result<TensorVmField<f32>> {
    let res: [usize; 3] = serde_json::from_value(ck.meta["resolution"].clone())?;
    let bbox: Aabb = serde_json::from_value(ck.meta["bbox"].clone())?;
    let mut field = TensorVmField::new(config.clone(), bbox, 0)?;
    field.resize(res);
    ck.load_module(prefix, &mut field)?;
    Ok(field)
}

pub(crate) fn store_adam(ck: &mut Checkpoint, name: &str, adam: &Adam<f32>) {
    for (j, (m, v)) in adam.first.iter().zip(&adam.second).enumerate() {
        ck.insert(format!("adam.{name}.m{j}"), vec![m.len()], m.clone());
        ck.insert(format!("adam.{name}.v{j}"), vec![v.len()], v.clone());
    }
}

pub(crate) fn load_adam(ck: &Checkpoint, name: &str, adam: &mut Adam<f32>, step: u64) {
    adam.reset();
    adam.step = step;
    let mut j = 0;
    while let (Some((_, m)), Some((_, v))) = (ck.get(&format!("adam.{name}.m{j}")), ck.get(&format!("adam.{name}.v{j}"))) {
        adam.first.push(m.to_vec());
        adam.second.push(v.to_vec());
        j += 1;
    }
}

pub fn checkpoint_base(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step:06}"))
}

pub fn append_log(path: &Path, report: &LossReport) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(report)?)?;
    Ok(())
}

/// Reads a JSON-lines loss log.
pub fn read_log(path: &Path) -> Result<Vec<LossReport>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Trains from scratch into `out_dir`.
pub fn train_joint(
    data: &VideoDataset,
    data_dir: Option<&Path>,
    config: TrainConfig,
    out_dir: &Path,
    exec: Exec,
) -> Result<RunArtifacts> {
    let trainer = JointTrainer::new(data, config, exec)?;
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    let log = out_dir.join("log.jsonl");
    if log.exists() {
        fs::remove_file(&log)?;
    }
    let artifacts = RunArtifacts {
        run_dir: out_dir.to_path_buf(),
        data_dir: data_dir.map(Path::to_path_buf),
        checkpoints: Vec::new(),
        layer_dirs: Vec::new(),
        metrics: None,
        config_snapshot: out_dir.join("config.yaml"),
        log: Some(log),
    };
    write_atomic(&artifacts.config_snapshot, trainer.config.to_yaml()?.as_bytes())?;
    drive(trainer, artifacts, None).map(|(a, _)| a)
}

/// Continues a run from its latest checkpoint.
pub fn resume_joint(run_dir: &Path, data: &VideoDataset, exec: Exec) -> Result<RunArtifacts> {
    let artifacts = RunArtifacts::load(run_dir)?;
    let config = TrainConfig::from_yaml(&fs::read_to_string(&artifacts.config_snapshot)?)?;
    let mut trainer = JointTrainer::new(data, config, exec)?;
    if let Some(base) = artifacts.latest_checkpoint() {
        trainer.restore(&Checkpoint::load(base)?)?;
    }
    if let Some(log) = &artifacts.log {
        let kept: Vec<_> = read_log(log).unwrap_or_default().into_iter().filter(|r| r.step <= trainer.step).collect();
        let text: String = kept.iter().map(|r| serde_json::to_string(r).map(|s| s + "\n")).collect::<std::result::Result<_, _>>()?;
        write_atomic(log, text.as_bytes())?;
        trainer.history = kept;
    }
    drive(trainer, artifacts, None).map(|(a, _)| a)
}

/// Runs until the configured budget (or `stop_at`), checkpointing on the
/// schedule. On divergence the manifest is saved with the checkpoints
/// written so far and the error is returned.
pub fn drive<'a>(
    mut trainer: JointTrainer<'a>,
    mut artifacts: RunArtifacts,
    stop_at: Option<usize>,
) -> Result<(RunArtifacts, JointTrainer<'a>)> {
    let end = stop_at.unwrap_or(trainer.config.steps).min(trainer.config.steps);
    while trainer.step < end {
        let report = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => {
                artifacts.save()?;
                return Err(e);
            }
        };
        if let Some(log) = &artifacts.log {
            append_log(log, &report)?;
        }
        if report.step % 100 == 0 {
            log::info!("step {} loss {:.5} psnr {:.2}", report.step, report.total, report.psnr.unwrap_or(0.0));
        }
        if trainer.step % trainer.config.checkpoint_every == 0 || trainer.step == trainer.config.steps {
            let base = checkpoint_base(&artifacts.run_dir, trainer.step);
            trainer.checkpoint()?.save(&base)?;
            if !artifacts.checkpoints.contains(&base) {
                artifacts.checkpoints.push(base);
            }
            artifacts.save()?;
        }
    }
    artifacts.save()?;
    Ok((artifacts, trainer))
}

/// Loads the joint model from the latest checkpoint of a run.
pub fn load_joint_model(run_dir: &Path) -> Result<(JointModel, TrainConfig, RunArtifacts)> {
    let artifacts = RunArtifacts::load(run_dir)?;
    let base = artifacts
        .latest_checkpoint()
        .ok_or_else(|| Error::MissingInput(run_dir.join("checkpoints")))?;
    let ck = Checkpoint::load(base)?;
    let config: TrainConfig = serde_json::from_value(ck.meta["config"].clone())?;
    let field = load_field(&ck, "bg", &config.field)?;
    let mut foreground = ForegroundNet::new(config.foreground.clone(), config.seed)?;
    ck.load_module("fg", &mut foreground)?;
    Ok((JointModel { foreground, field }, config, artifacts))
}

/// Render options used for evaluation of a trained run.
pub fn eval_render_options(data: &VideoDataset, model: &JointModel, config: &TrainConfig) -> RenderOptions {
    let (near, far) = default_range(data, &model.field.bbox);
    config.render_options(near, far)
}
