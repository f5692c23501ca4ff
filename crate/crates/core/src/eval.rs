//! Image metrics, run rendering and evaluation reports.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::checkpoint::Checkpoint;
use crate::field::TensorVmField;
use crate::io::artifacts::{write_atomic, RunArtifacts};
use crate::io::pfm::write_pfm;
use crate::io::{frame_name, load_dataset, read_rgb_sequence, write_rgb, write_rgba, VideoDataset};
use crate::render::{render_image, RenderOptions};
use crate::trainer::{self, default_range, render_frame_outputs, JointModel, TrainConfig, IMAGE_CHUNK};
use crate::{Error, Exec, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::InvalidInput(format!("shape {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit-range images; `+inf` when identical.
pub fn psnr(pred: ArrayView3<'_, f32>, gt: ArrayView3<'_, f32>) -> Result<f64> {
    check_shapes(pred.shape(), gt.shape())?;
    if pred.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    let mse = pred.iter().zip(gt.iter()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Rec. 601 luma of an `H x W x 3` image.
pub fn luma(img: ArrayView3<'_, f32>) -> Array2<f64> {
    let (h, w, _) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * img[[y, x, 0]] as f64 + 0.587 * img[[y, x, 1]] as f64 + 0.114 * img[[y, x, 2]] as f64
    })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let sum: f64 = g.iter().sum();
    g.into_iter().map(|v| v / sum).collect()
}

/// Separable valid-mode filtering with the normalized Gaussian window.
fn filter(img: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = g.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..n).map(|k| g[k] * img[[y, x + k]]).sum();
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..n).map(|k| g[k] * rows[[y + k, x]]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luma channels with an 11x11 Gaussian
/// window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1.
pub fn ssim(pred: ArrayView3<'_, f32>, gt: ArrayView3<'_, f32>) -> Result<f64> {
    check_shapes(pred.shape(), gt.shape())?;
    let (h, w, c) = pred.dim();
    if c != 3 || h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!("ssim needs an RGB image of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}x{c}")));
    }
    let (a, b) = (luma(pred), luma(gt));
    let g = gaussian_window();
    let (mu_a, mu_b) = (filter(&a, &g), filter(&b, &g));
    let (saa, sbb, sab) = (filter(&(&a * &a), &g), filter(&(&b * &b), &g), filter(&(&a * &b), &g));
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for ((((&ma, &mb), &xaa), &xbb), &xab) in mu_a.iter().zip(&mu_b).zip(&saa).zip(&sbb).zip(&sab) {
        let (va, vb, cov) = (xaa - ma * ma, xbb - mb * mb, xab - ma * mb);
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Serializes non-finite values as the strings `"inf"`, `"-inf"`, `"nan"`.
pub mod sentinel {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *v {
            v if v.is_finite() => s.serialize_f64(v),
            v if v.is_nan() => s.serialize_str("nan"),
            v if v > 0.0 => s.serialize_str("inf"),
            _ => s.serialize_str("-inf"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad metric value {other}"))),
            },
        }
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
            use serde::ser::SerializeSeq;
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&Wrap(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
            Ok(Vec::<Wrap>::deserialize(d)?.into_iter().map(|w| w.0).collect())
        }

        #[derive(Serialize, Deserialize)]
        struct Wrap(#[serde(with = "super")] f64);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "psnr" => Ok(Metric::Psnr),
            "ssim" => Ok(Metric::Ssim),
            other => Err(Error::InvalidInput(format!("unknown metric {other}; expected psnr or ssim"))),
        }
    }
}

/// Per-frame and mean metrics of a predicted sequence against ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr: Option<MetricSeries>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<MetricSeries>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    #[serde(with = "sentinel::vec")]
    pub per_frame: Vec<f64>,
    #[serde(with = "sentinel")]
    pub mean: f64,
}

impl MetricSeries {
    fn new(per_frame: Vec<f64>) -> Self {
        let mean = per_frame.iter().sum::<f64>() / per_frame.len().max(1) as f64;
        Self { per_frame, mean }
    }
}

pub fn evaluate_sequences(
    pred: ndarray::ArrayView4<'_, f32>,
    gt: ndarray::ArrayView4<'_, f32>,
    metrics: &[Metric],
    exec: Exec,
) -> Result<EvalReport> {
    if pred.dim().0 != gt.dim().0 {
        return Err(Error::InconsistentDataset(format!("{} predicted frames vs {} ground-truth frames", pred.dim().0, gt.dim().0)));
    }
    check_shapes(pred.shape(), gt.shape())?;
    let t = pred.dim().0;
    let mut report = EvalReport { frames: t, ..Default::default() };
    for m in metrics {
        let f = |i: usize| {
            let (a, b) = (pred.index_axis(Axis(0), i), gt.index_axis(Axis(0), i));
            match m {
                Metric::Psnr => psnr(a, b),
                Metric::Ssim => ssim(a, b),
            }
        };
        let series = MetricSeries::new(exec.map(t, f).into_iter().collect::<Result<Vec<_>>>()?);
        match m {
            Metric::Psnr => report.psnr = Some(series),
            Metric::Ssim => report.ssim = Some(series),
        }
    }
    Ok(report)
}

/// Compares two directories of numbered PNG frames.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, metrics: &[Metric], exec: Exec) -> Result<EvalReport> {
    for d in [pred_dir, gt_dir] {
        if !d.is_dir() {
            return Err(Error::MissingInput(d.to_path_buf()));
        }
    }
    let pred = read_rgb_sequence(pred_dir)?;
    let gt = read_rgb_sequence(gt_dir)?;
    evaluate_sequences(pred.view(), gt.view(), metrics, exec)
}

/// Evaluates the rendered background of a run against clean plates and
/// writes `metrics.json` into the run directory.
pub fn evaluate_run(run_dir: &Path, gt_dir: &Path, exec: Exec) -> Result<EvalReport> {
    let report = evaluate_dirs(&run_dir.join("render").join("bg"), gt_dir, &[Metric::Psnr, Metric::Ssim], exec)?;
    let path = run_dir.join("metrics.json");
    write_atomic(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    if let Ok(mut art) = RunArtifacts::load(run_dir) {
        art.metrics = Some(path);
        art.save()?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderTarget {
    Fg,
    Bg,
    Composite,
    Depth,
}

impl std::str::FromStr for RenderTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fg" => Ok(Self::Fg),
            "bg" => Ok(Self::Bg),
            "composite" => Ok(Self::Composite),
            "depth" => Ok(Self::Depth),
            other => Err(Error::InvalidInput(format!("unknown render target {other}"))),
        }
    }
}

/// A trained run: either a joint model or a background-only field.
pub enum RunModel {
    Joint(Box<JointModel>),
    Background(TensorVmField<f32>),
}

/// Loads the model of a run and the dataset it was trained on.
pub fn load_run(run_dir: &Path) -> Result<(RunModel, TrainConfig, VideoDataset, RunArtifacts)> {
    let art = RunArtifacts::load(run_dir)?;
    let data_dir = art.data_dir.clone().ok_or_else(|| Error::MissingInput(run_dir.join("run.json: data_dir")))?;
    let data = load_dataset(&data_dir)?;
    let base = art.latest_checkpoint().ok_or_else(|| Error::MissingInput(run_dir.join("checkpoints")))?;
    let ck = Checkpoint::load(base)?;
    let config: TrainConfig = serde_json::from_value(ck.meta["config"].clone())?;
    let model = match ck.meta["kind"].as_str() {
        Some("background") => RunModel::Background(trainer::load_field(&ck, "bg", &config.field)?),
        _ => RunModel::Joint(Box::new(trainer::load_joint_model(run_dir)?.0)),
    };
    Ok((model, config, data, art))
}

fn render_options_for(data: &VideoDataset, field: &TensorVmField<f32>, config: &TrainConfig) -> RenderOptions {
    let (near, far) = default_range(data, &field.bbox);
    RenderOptions {
        near: config.near.unwrap_or(near),
        far: config.far.unwrap_or(far),
        samples: config.samples,
        perturb: false,
        seed: 0,
        transmittance_threshold: config.transmittance_threshold,
    }
}

/// Renders `what` for every frame into `out_dir` (default
/// `run_dir/render/<what>`). Foreground layers go to `layer_NN/`
/// subdirectories as RGBA; depth is written as PFM.
pub fn render_run(run_dir: &Path, what: RenderTarget, out_dir: Option<&Path>, exec: Exec) -> Result<PathBuf> {
    let (model, config, data, mut art) = load_run(run_dir)?;
    let name = match what {
        RenderTarget::Fg => "fg",
        RenderTarget::Bg => "bg",
        RenderTarget::Composite => "composite",
        RenderTarget::Depth => "depth",
    };
    let out = out_dir.map_or_else(|| run_dir.join("render").join(name), Path::to_path_buf);
    fs::create_dir_all(&out)?;
    let field = match &model {
        RunModel::Joint(m) => &m.field,
        RunModel::Background(f) => f,
    };
    let opts = render_options_for(&data, field, &config);
    for t in 0..data.num_frames() {
        match (what, &model) {
            (RenderTarget::Bg | RenderTarget::Depth, _) => {
                let img = render_image(field, &data.cameras, t, &opts, IMAGE_CHUNK, exec)?;
                if what == RenderTarget::Bg {
                    write_rgb(&out.join(frame_name(t, "png")), img.rgb.view())?;
                } else {
                    write_pfm(out.join(frame_name(t, "pfm")), &img.depth)?;
                }
            }
            (RenderTarget::Fg | RenderTarget::Composite, RunModel::Joint(m)) => {
                let o = render_frame_outputs(m, &data, t, &opts, exec)?;
                if what == RenderTarget::Composite {
                    write_rgb(&out.join(frame_name(t, "png")), o.composite.view())?;
                    continue;
                }
                for i in 0..o.layers.alphas.dim().0 {
                    let dir = out.join(format!("layer_{i:02}"));
                    fs::create_dir_all(&dir)?;
                    let alpha = o.layers.alphas.index_axis(Axis(0), i).to_owned();
                    write_rgba(&dir.join(frame_name(t, "png")), o.layers.colors.slice(s![i, .., .., ..]), &alpha)?;
                }
            }
            (_, RunModel::Background(_)) => {
                return Err(Error::InvalidInput(format!("run {} has no foreground layers", run_dir.display())));
            }
        }
    }
    if what == RenderTarget::Fg {
        art.layer_dirs = (0..data.num_layers()).map(|i| out.join(format!("layer_{i:02}"))).collect();
        art.save()?;
    }
    Ok(out)
}

/// Summary numbers of a trained model on a dataset with optional ground
/// truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Mean per-frame PSNR of the composite against the input frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composite_psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_ssim: Option<f64>,
    /// Mean combined foreground opacity over ground-truth shadow pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shadow_alpha: Option<f64>,
    /// Mean squared background error over shadow pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shadow_background_mse: Option<f64>,
}

fn shadow_mse(bg: &[Array3<f32>], gt: &ndarray::Array4<f32>, shadows: &Array3<bool>) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, b) in bg.iter().enumerate() {
        for ((y, x), &s) in shadows.index_axis(Axis(0), t).indexed_iter() {
            if s {
                for c in 0..3 {
                    total += (b[[y, x, c]] as f64 - gt[[t, y, x, c]] as f64).powi(2);
                }
                count += 3;
            }
        }
    }
    (count > 0).then(|| total / count as f64)
}

fn background_scores(bg: &[Array3<f32>], data: &VideoDataset, shadows: Option<&Array3<bool>>, m: &mut RunMetrics) -> Result<()> {
    let Some(gt) = &data.gt_background else { return Ok(()) };
    let mut p = Vec::with_capacity(bg.len());
    let mut q = Vec::with_capacity(bg.len());
    for (t, b) in bg.iter().enumerate() {
        p.push(psnr(b.view(), gt.index_axis(Axis(0), t))?);
        q.push(ssim(b.view(), gt.index_axis(Axis(0), t))?);
    }
    m.background_psnr = Some(MetricSeries::new(p).mean);
    m.background_ssim = Some(MetricSeries::new(q).mean);
    m.shadow_background_mse = shadows.and_then(|s| shadow_mse(bg, gt, s));
    Ok(())
}

/// Composite, background and shadow-capture scores of a joint model.
pub fn joint_metrics(
    model: &JointModel,
    config: &TrainConfig,
    data: &VideoDataset,
    shadows: Option<&Array3<bool>>,
    exec: Exec,
) -> Result<RunMetrics> {
    let opts = render_options_for(data, &model.field, config);
    let mut m = RunMetrics::default();
    let mut comp = Vec::new();
    let mut bgs = Vec::new();
    let (mut alpha_sum, mut alpha_count) = (0.0, 0usize);
    for t in 0..data.num_frames() {
        let o = render_frame_outputs(model, data, t, &opts, exec)?;
        comp.push(psnr(o.composite.view(), data.frames.index_axis(Axis(0), t))?);
        if let Some(s) = shadows {
            for ((y, x), &v) in s.index_axis(Axis(0), t).indexed_iter() {
                if v {
                    let clear: f64 = o.layers.alphas.slice(s![.., y, x]).iter().map(|&a| 1.0 - a as f64).product();
                    alpha_sum += 1.0 - clear;
                    alpha_count += 1;
                }
            }
        }
        bgs.push(o.background);
    }
    m.composite_psnr = Some(MetricSeries::new(comp).mean);
    m.shadow_alpha = (alpha_count > 0).then(|| alpha_sum / alpha_count as f64);
    background_scores(&bgs, data, shadows, &mut m)?;
    Ok(m)
}

/// Background scores of a standalone field.
pub fn field_metrics(
    field: &TensorVmField<f32>,
    config: &TrainConfig,
    data: &VideoDataset,
    shadows: Option<&Array3<bool>>,
    exec: Exec,
) -> Result<RunMetrics> {
    let opts = render_options_for(data, field, config);
    let bgs = (0..data.num_frames())
        .map(|t| render_image(field, &data.cameras, t, &opts, IMAGE_CHUNK, exec).map(|r| r.rgb))
        .collect::<Result<Vec<_>>>()?;
    let mut m = RunMetrics::default();
    background_scores(&bgs, data, shadows, &mut m)?;
    Ok(m)
}

/// Scores the latest checkpoint of a run against the ground truth of its
/// dataset and writes `metrics.json` into the run directory.
pub fn score_run(run_dir: &Path, exec: Exec) -> Result<RunMetrics> {
    let (model, config, data, mut art) = load_run(run_dir)?;
    let shadows = match &art.data_dir {
        Some(d) => crate::synthgen::dataset_shadows(d)?,
        None => None,
    };
    let metrics = match &model {
        RunModel::Joint(m) => joint_metrics(m, &config, &data, shadows.as_ref(), exec)?,
        RunModel::Background(f) => field_metrics(f, &config, &data, shadows.as_ref(), exec)?,
    };
    let path = run_dir.join("metrics.json");
    write_atomic(&path, serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    art.metrics = Some(path);
    art.save()?;
    Ok(metrics)
}
