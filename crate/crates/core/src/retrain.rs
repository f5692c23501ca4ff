//! Clean-background stage: a fresh field is fitted to the input frames with
//! every pixel the learned layers claim as foreground excluded from ray
//! sampling.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, ArrayView4, Axis};
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::field::TensorVmField;
use crate::io::artifacts::{write_atomic, RunArtifacts};
use crate::io::{frame_name, load_dataset, read_pfm, write_pfm, VideoDataset};
use crate::losses::{depth_loss, recon_grad, recon_loss, total_loss, LossParts, LossReport};
use crate::nn::{Adam, Module};
use crate::render::{distortion_grad, distortion_loss, generate_rays, render_backward, render_rays, RenderOptions};
use crate::trainer::{
    append_log, checkpoint_base, default_range, frame_inputs, load_adam, load_joint_model, lr_at_step, read_log,
    sample_ray_batch, scene_bounds, step_rng, store_adam, JointModel, LrGroup, TrainConfig,
};
use crate::{Error, Exec, Result};

pub const DEFAULT_ALPHA_THRESHOLD: f64 = 0.1;
pub const DEFAULT_STEPS: usize = 5000;

/// `T x H x W` mask, true where any layer's alpha exceeds `tau`. `alphas`
/// is `N x T x H x W`.
pub fn build_exclusion_masks(alphas: ArrayView4<'_, f32>, tau: f64) -> Array3<bool> {
    let (_, t, h, w) = alphas.dim();
    let mut out = Array3::from_elem((t, h, w), false);
    for layer in alphas.outer_iter() {
        ndarray::Zip::from(&mut out).and(&layer).for_each(|o, &a| *o |= a as f64 > tau);
    }
    out
}

/// Predicted alphas of every layer and frame, `N x T x H x W`.
pub fn compute_alphas(model: &JointModel, data: &VideoDataset, exec: Exec) -> Result<Array4<f32>> {
    let (t_len, n) = (data.num_frames(), data.num_layers());
    let (h, w) = data.shape();
    let mut out = Array4::zeros((n, t_len, h, w));
    for t in 0..t_len {
        let inputs = frame_inputs(data, t)?;
        let alphas = exec.map(n, |i| model.foreground.forward(&inputs[i]).map(|(o, _)| o.alpha));
        for (i, a) in alphas.into_iter().enumerate() {
            out.slice_mut(s![i, t, .., ..]).assign(&a?);
        }
    }
    Ok(out)
}

/// Reads cached alphas from `dir/layer_NN/*.pfm`, or computes and writes
/// them.
pub fn cached_alphas(dir: &Path, model: &JointModel, data: &VideoDataset, exec: Exec) -> Result<Array4<f32>> {
    let (t_len, n) = (data.num_frames(), data.num_layers());
    let (h, w) = data.shape();
    let path = |i: usize, t: usize| dir.join(format!("layer_{i:02}")).join(frame_name(t, "pfm"));
    if (0..n).all(|i| (0..t_len).all(|t| path(i, t).is_file())) {
        let mut out = Array4::zeros((n, t_len, h, w));
        for i in 0..n {
            for t in 0..t_len {
                let a = read_pfm(path(i, t))?;
                if a.dim() != (h, w) {
                    return Err(Error::InconsistentDataset(format!("cached alpha {} size", path(i, t).display())));
                }
                out.slice_mut(s![i, t, .., ..]).assign(&a);
            }
        }
        return Ok(out);
    }
    let alphas = compute_alphas(model, data, exec)?;
    for i in 0..n {
        fs::create_dir_all(dir.join(format!("layer_{i:02}")))?;
        for t in 0..t_len {
            write_pfm(path(i, t), &alphas.slice(s![i, t, .., ..]).to_owned())?;
        }
    }
    Ok(alphas)
}

/// Joint settings adapted to a background-only run of `steps` steps; the
/// upsampling events keep their relative positions.
pub fn retrain_config(joint: &TrainConfig, steps: usize) -> Result<TrainConfig> {
    let mut cfg = joint.clone();
    cfg.upsample_steps = joint
        .upsample_steps
        .iter()
        .map(|&s| ((s as f64 * steps as f64 / joint.steps as f64).round() as usize).max(1))
        .collect();
    cfg.upsample_steps.dedup();
    cfg.steps = steps;
    cfg.checkpoint_every = joint.checkpoint_every.min(steps).max(1);
    cfg.validate()?;
    Ok(cfg)
}

/// Mutable state of a background-only run.
pub struct BackgroundTrainer<'a> {
    pub config: TrainConfig,
    data: &'a VideoDataset,
    exclusion: Array3<bool>,
    pub field: TensorVmField<f32>,
    grid_adam: Adam<f32>,
    net_adam: Adam<f32>,
    pub step: usize,
    pub history: Vec<LossReport>,
    pub render: RenderOptions,
    pub exec: Exec,
}

impl<'a> BackgroundTrainer<'a> {
    pub fn new(data: &'a VideoDataset, exclusion: Array3<bool>, config: TrainConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        let (h, w) = data.shape();
        if exclusion.dim() != (data.num_frames(), h, w) {
            return Err(Error::InvalidInput(format!("exclusion masks {:?} for {} frames of {h}x{w}", exclusion.dim(), data.num_frames())));
        }
        for (t, m) in exclusion.outer_iter().enumerate() {
            if m.iter().all(|&v| v) {
                return Err(Error::FrameFullyMasked(t));
            }
        }
        let bbox = scene_bounds(data, config.bounds_far_factor)?;
        let (near, far) = default_range(data, &bbox);
        let render = RenderOptions {
            near: config.near.unwrap_or(near),
            far: config.far.unwrap_or(far),
            samples: config.samples,
            perturb: false,
            seed: 0,
            transmittance_threshold: config.transmittance_threshold,
        };
        render.validate()?;
        let field = TensorVmField::new(config.field.clone(), bbox, config.seed.wrapping_add(1))?;
        let [b1, b2] = config.adam_betas;
        let adam = Adam::new(b1, b2, config.adam_eps);
        Ok(Self {
            config,
            data,
            exclusion,
            field,
            grid_adam: adam.clone(),
            net_adam: adam,
            step: 0,
            history: Vec::new(),
            render,
            exec,
        })
    }

    pub fn train_step(&mut self) -> Result<LossReport> {
        let step = self.step + 1;
        let cfg = &self.config;
        let wts = &cfg.weights;
        let data = self.data;
        let (h, w) = data.shape();
        let t = step_rng(cfg.seed, step, 0).gen_range(0..data.num_frames());
        let excl = self.exclusion.index_axis(Axis(0), t);
        let admissible = excl.iter().filter(|&&v| !v).count();
        let pixels = sample_ray_batch((h, w), cfg.ray_batch.min(admissible), Some(excl), cfg.seed, step)?;
        assert!(pixels.iter().all(|&[x, y]| !excl[[y, x]]), "sampled an excluded pixel");
        let k = pixels.len();
        let rays = generate_rays(&data.cameras, t, &pixels)?;
        let opts = RenderOptions { perturb: true, seed: step_rng(cfg.seed, step, 2).gen(), ..self.render };
        let render = render_rays(&self.field, &rays, &opts, true, self.exec)?;
        if !render.rgb.iter().all(|v| v.is_finite()) {
            return Err(Error::DivergedLoss { step, detail: "non-finite background render".into() });
        }
        let mut target = ndarray::Array2::<f32>::zeros((k, 3));
        for (j, &[x, y]) in pixels.iter().enumerate() {
            for c in 0..3 {
                target[[j, c]] = data.frames[[t, y, x, c]];
            }
        }
        let mut parts = LossParts { recons: recon_loss(render.rgb.view(), target.view())?, ..Default::default() };
        let mut d_rgb = recon_grad(render.rgb.view(), target.view());
        d_rgb.mapv_inplace(|v| v * wts.recons as f32);

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
            (parts.tv_density, parts.tv_appearance) = self.field.tv_loss();
        }
        let mut report = total_loss(&parts, &effective, 0.0, step)?;
        report.psnr = Some(-10.0 * parts.recons.max(1e-30).log10());
        report.depth_degenerate = depth_degenerate;

        render_backward(&mut self.field, &render, d_rgb.view(), &d_depth, None, d_weights.as_ref().map(|g| g.view()), self.exec);
        self.field.tv_backward(effective.tv_density, effective.tv_appearance);
        if !self.field.grads_finite() {
            return Err(Error::DivergedLoss { step, detail: "non-finite gradient".into() });
        }
        self.grid_adam.update(&mut self.field.grids(), lr_at_step(cfg, step - 1, LrGroup::BgGrid));
        self.net_adam.update(&mut self.field.networks(), lr_at_step(cfg, step - 1, LrGroup::BgDecoder));
        if !self.field.params_finite() {
            return Err(Error::DivergedLoss { step, detail: "non-finite parameter".into() });
        }
        if self.field.upsample(step, &self.config.upsample_steps) {
            self.grid_adam.reset();
        }
        self.step = step;
        self.history.push(report.clone());
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "background",
            "step": self.step,
            "resolution": self.field.resolution,
            "bbox": self.field.bbox,
            "adam_steps": [self.grid_adam.step, self.net_adam.step],
            "config": self.config,
        }));
        ck.insert_module("bg", &self.field);
        store_adam(&mut ck, "grid", &self.grid_adam);
        store_adam(&mut ck, "net", &self.net_adam);
        ck
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        self.field = crate::trainer::load_field(ck, "bg", &self.config.field)?;
        let steps: [u64; 2] = serde_json::from_value(ck.meta["adam_steps"].clone())?;
        load_adam(ck, "grid", &mut self.grid_adam, steps[0]);
        load_adam(ck, "net", &mut self.net_adam, steps[1]);
        self.step = ck.meta["step"].as_u64().ok_or_else(|| Error::CorruptData("checkpoint meta lacks step".into()))? as usize;
        Ok(())
    }
}

/// Fits a fresh background into `out_dir` with sampling restricted by
/// `exclusion` (`T x H x W`, true = excluded).
pub fn retrain_background(
    data: &VideoDataset,
    data_dir: Option<&Path>,
    exclusion: Array3<bool>,
    config: TrainConfig,
    out_dir: &Path,
    exec: Exec,
) -> Result<(RunArtifacts, TensorVmField<f32>, Vec<LossReport>)> {
    let mut trainer = BackgroundTrainer::new(data, exclusion, config, exec)?;
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    let log = out_dir.join("log.jsonl");
    if log.exists() {
        fs::remove_file(&log)?;
    }
    let mut art = RunArtifacts {
        run_dir: out_dir.to_path_buf(),
        data_dir: data_dir.map(Path::to_path_buf),
        checkpoints: Vec::new(),
        layer_dirs: Vec::new(),
        metrics: None,
        config_snapshot: out_dir.join("config.yaml"),
        log: Some(log.clone()),
    };
    write_atomic(&art.config_snapshot, trainer.config.to_yaml()?.as_bytes())?;
    while trainer.step < trainer.config.steps {
        let report = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => {
                art.save()?;
                return Err(e);
            }
        };
        append_log(&log, &report)?;
        if report.step % 100 == 0 {
            log::info!("retrain step {} loss {:.5}", report.step, report.total);
        }
        if trainer.step % trainer.config.checkpoint_every == 0 || trainer.step == trainer.config.steps {
            let base = checkpoint_base(out_dir, trainer.step);
            trainer.checkpoint().save(&base)?;
            art.checkpoints.push(base);
            art.save()?;
        }
    }
    art.save()?;
    debug_assert_eq!(read_log(&log).map(|l| l.len()).unwrap_or(0), trainer.step);
    Ok((art, trainer.field, trainer.history))
}

/// Retrains the background of a finished joint run. Alphas come from the
/// run's final checkpoint and are cached under `run_dir/alpha_cache`.
pub fn retrain_run(run_dir: &Path, tau: f64, steps: usize, out_dir: Option<&Path>, exec: Exec) -> Result<RunArtifacts> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidInput(format!("alpha threshold {tau} must lie in [0, 1)")));
    }
    let (model, joint_cfg, art) = load_joint_model(run_dir)?;
    let data_dir: PathBuf = art.data_dir.clone().ok_or_else(|| Error::MissingInput(run_dir.join("run.json: data_dir")))?;
    let data = load_dataset(&data_dir)?;
    let alphas = cached_alphas(&run_dir.join("alpha_cache"), &model, &data, exec)?;
    let exclusion = build_exclusion_masks(alphas.view(), tau);
    let config = retrain_config(&joint_cfg, steps)?;
    let out = out_dir.map_or_else(|| run_dir.join("retrain"), Path::to_path_buf);
    retrain_background(&data, Some(&data_dir), exclusion, config, &out, exec).map(|(a, _, _)| a)
}
