//! Dataset bundle and the on-disk formats the pipeline reads and writes.
//!
//! Dataset layout under a root directory:
//!
//! ```text
//! rgb/00000.png ...            input frames (8-bit RGB)
//! mask/00/00000.png ...        one subdirectory per layer, topmost first
//! flow/00000.flo ...           forward flow t -> t+1 (T-1 files)
//! depth/00000.pfm ...          monocular disparity
//! poses.json                   intrinsics + camera-to-world matrices
//! gt_background/00000.png ...  optional clean plates
//! bounds.json                  optional scene bounding box
//! ```

pub mod artifacts;
pub mod cameras;
pub mod flo;
pub mod pfm;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};

pub use artifacts::RunArtifacts;
pub use cameras::{load_cameras, save_cameras, CameraTrajectory, Intrinsics};
pub use flo::{read_flow_file, write_flow_file};
pub use pfm::{read_pfm, write_pfm};

use crate::geom::Aabb;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct VideoDataset {
    /// `T x H x W x 3`, values in `[0, 1]`.
    pub frames: Array4<f32>,
    /// `N x T x H x W`, binary; layer 0 is topmost.
    pub masks: Array4<f32>,
    pub cameras: CameraTrajectory,
    /// `(T-1) x H x W x 2`, forward flow in pixels.
    pub flow: Array4<f32>,
    /// `T x H x W` affine-invariant disparity (larger is nearer).
    pub mono_depth: Array3<f32>,
    pub gt_background: Option<Array4<f32>>,
    pub bounds: Option<Aabb>,
}

impl VideoDataset {
    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn num_layers(&self) -> usize {
        self.masks.dim().0
    }

    /// `(height, width)`.
    pub fn shape(&self) -> (usize, usize) {
        let (_, h, w, _) = self.frames.dim();
        (h, w)
    }

    /// Forward flow for frame `t`, or `None` for the last frame.
    pub fn flow_at(&self, t: usize) -> Option<ArrayView3<'_, f32>> {
        (t + 1 < self.num_frames()).then(|| self.flow.index_axis(Axis(0), t))
    }

    pub fn validate(&self) -> Result<()> {
        let (t, h, w, c) = self.frames.dim();
        if t < 2 {
            return Err(Error::InconsistentDataset(format!("need at least 2 frames, got {t}")));
        }
        if c != 3 {
            return Err(Error::InconsistentDataset(format!("frames have {c} channels")));
        }
        let (n, mt, mh, mw) = self.masks.dim();
        if n < 1 {
            return Err(Error::InconsistentDataset("no mask layers".into()));
        }
        if (mt, mh, mw) != (t, h, w) {
            return Err(Error::InconsistentDataset(format!(
                "mask shape {:?} vs frames {:?}",
                (mt, mh, mw),
                (t, h, w)
            )));
        }
        if self.flow.dim() != (t - 1, h, w, 2) {
            return Err(Error::InconsistentDataset(format!(
                "flow shape {:?}, expected {:?}",
                self.flow.dim(),
                (t - 1, h, w, 2)
            )));
        }
        if self.mono_depth.dim() != (t, h, w) {
            return Err(Error::InconsistentDataset(format!(
                "depth shape {:?}",
                self.mono_depth.dim()
            )));
        }
        if self.cameras.len() != t {
            return Err(Error::InconsistentDataset(format!(
                "{} poses for {t} frames",
                self.cameras.len()
            )));
        }
        let k = &self.cameras.intrinsics;
        if (k.width, k.height) != (w, h) {
            return Err(Error::InconsistentDataset(format!(
                "intrinsics size {}x{} vs frames {w}x{h}",
                k.width, k.height
            )));
        }
        if let Some(gt) = &self.gt_background {
            if gt.dim() != self.frames.dim() {
                return Err(Error::InconsistentDataset("gt_background shape".into()));
            }
        }
        if self.masks.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::CorruptData("mask values must be 0 or 1".into()));
        }
        let finite = |name: &str, ok: bool| {
            if !ok {
                Err(Error::CorruptData(format!("non-finite values in {name}")))
            } else {
                Ok(())
            }
        };
        finite("frames", self.frames.iter().all(|v| v.is_finite()))?;
        finite("flow", self.flow.iter().all(|v| v.is_finite()))?;
        finite("depth", self.mono_depth.iter().all(|v| v.is_finite()))?;
        if self.mono_depth.iter().any(|&d| d < 0.0) {
            return Err(Error::CorruptData("negative disparity".into()));
        }
        if let Some(gt) = &self.gt_background {
            finite("gt_background", gt.iter().all(|v| v.is_finite()))?;
        }
        self.cameras.validate()
    }

    /// Union of all layer masks for every frame, `T x H x W`.
    pub fn union_masks(&self) -> Array3<f32> {
        let mut out = self.masks.index_axis(Axis(0), 0).to_owned();
        for layer in self.masks.axis_iter(Axis(0)).skip(1) {
            out.zip_mut_with(&layer, |a, &b| *a = a.max(b));
        }
        out
    }

    /// Downsamples every array by an integer factor: masks with nearest
    /// neighbour, everything else bilinearly; flow vectors and intrinsics
    /// are rescaled to the new pixel grid.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidInput("downsample factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (t, h, w) = (self.num_frames(), self.shape().0, self.shape().1);
        let (nh, nw) = (h / factor, w / factor);
        if nh == 0 || nw == 0 {
            return Err(Error::InvalidInput(format!("factor {factor} too large for {w}x{h}")));
        }
        let resize4 = |a: &Array4<f32>, nearest: bool| {
            let (b, _, _, c) = a.dim();
            let mut out = Array4::zeros((b, nh, nw, c));
            for i in 0..b {
                for ch in 0..c {
                    let src = a.slice(s![i, .., .., ch]).to_owned();
                    out.slice_mut(s![i, .., .., ch])
                        .assign(&resize_plane(&src, nh, nw, nearest));
                }
            }
            out
        };
        let mut masks = Array4::zeros((self.num_layers(), t, nh, nw));
        for n in 0..self.num_layers() {
            for f in 0..t {
                let src = self.masks.slice(s![n, f, .., ..]).to_owned();
                masks.slice_mut(s![n, f, .., ..]).assign(&resize_plane(&src, nh, nw, true));
            }
        }
        let mut flow = resize4(&self.flow, false);
        flow.mapv_inplace(|v| v / factor as f32);
        let mut depth = Array3::zeros((t, nh, nw));
        for f in 0..t {
            let src = self.mono_depth.index_axis(Axis(0), f).to_owned();
            depth.index_axis_mut(Axis(0), f).assign(&resize_plane(&src, nh, nw, false));
        }
        let k = self.cameras.intrinsics;
        let sx = nw as f64 / w as f64;
        let sy = nh as f64 / h as f64;
        let intrinsics = Intrinsics {
            fx: k.fx * sx,
            fy: k.fy * sy,
            cx: k.cx * sx,
            cy: k.cy * sy,
            width: nw,
            height: nh,
        };
        Ok(Self {
            frames: resize4(&self.frames, false),
            masks,
            cameras: CameraTrajectory::new(intrinsics, self.cameras.poses.clone())?,
            flow,
            mono_depth: depth,
            gt_background: self.gt_background.as_ref().map(|g| resize4(g, false)),
            bounds: self.bounds,
        })
    }
}

/// Resamples a plane to `nh x nw` with pixel-center alignment.
fn resize_plane(src: &Array2<f32>, nh: usize, nw: usize, nearest: bool) -> Array2<f32> {
    let (h, w) = src.dim();
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    Array2::from_shape_fn((nh, nw), |(y, x)| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        if nearest {
            return src[[fy.round() as usize, fx.round() as usize]];
        }
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
        let top = src[[y0, x0]] * (1.0 - tx) + src[[y0, x1]] * tx;
        let bot = src[[y1, x0]] * (1.0 - tx) + src[[y1, x1]] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

pub fn frame_name(t: usize, ext: &str) -> String {
    format!("{t:05}.{ext}")
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb buffer"))
}

pub fn read_gray(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).expect("gray buffer"))
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb(path: &Path, img: ArrayView3<'_, f32>) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
    }
    let buf: Vec<u8> = img.iter().map(|&v| quantize(v)).collect();
    image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size")
        .save(path)?;
    Ok(())
}

pub fn write_rgba(path: &Path, rgb: ArrayView3<'_, f32>, alpha: &Array2<f32>) -> Result<()> {
    let (h, w, _) = rgb.dim();
    let mut buf = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push(quantize(rgb[[y, x, c]]));
            }
            buf.push(quantize(alpha[[y, x]]));
        }
    }
    image::RgbaImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size")
        .save(path)?;
    Ok(())
}

pub fn write_gray(path: &Path, img: &Array2<f32>) -> Result<()> {
    let (h, w) = img.dim();
    let buf: Vec<u8> = img.iter().map(|&v| quantize(v)).collect();
    image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size")
        .save(path)?;
    Ok(())
}

/// Reads a directory of PNG frames into `T x H x W x 3`.
pub fn read_rgb_sequence(dir: &Path) -> Result<Array4<f32>> {
    let files = sorted_files(dir, "png")?;
    if files.is_empty() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    stack_frames(files.iter().map(|p| read_rgb(p)).collect::<Result<Vec<_>>>()?)
}

fn stack_frames(frames: Vec<Array3<f32>>) -> Result<Array4<f32>> {
    let (h, w, c) = frames[0].dim();
    let mut out = Array4::zeros((frames.len(), h, w, c));
    for (i, f) in frames.iter().enumerate() {
        if f.dim() != (h, w, c) {
            return Err(Error::InconsistentDataset(format!(
                "frame {i} has shape {:?}, expected {:?}",
                f.dim(),
                (h, w, c)
            )));
        }
        out.index_axis_mut(Axis(0), i).assign(f);
    }
    Ok(out)
}

fn require_count(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::InconsistentDataset(format!("{what}: {got} entries, expected {want}")));
    }
    Ok(())
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<VideoDataset> {
    let root = root.as_ref();
    for sub in ["rgb", "mask", "flow", "depth"] {
        if !root.join(sub).is_dir() {
            return Err(Error::MissingInput(root.join(sub)));
        }
    }
    let poses_path = root.join("poses.json");
    if !poses_path.is_file() {
        return Err(Error::MissingInput(poses_path));
    }

    let frames = read_rgb_sequence(&root.join("rgb"))?;
    let (t, h, w, _) = frames.dim();

    let mut layer_dirs: Vec<PathBuf> = fs::read_dir(root.join("mask"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    layer_dirs.sort();
    if layer_dirs.is_empty() {
        return Err(Error::MissingInput(root.join("mask/00")));
    }
    let mut masks = Array4::zeros((layer_dirs.len(), t, h, w));
    for (n, dir) in layer_dirs.iter().enumerate() {
        let files = sorted_files(dir, "png")?;
        require_count(&format!("masks in {}", dir.display()), files.len(), t)?;
        for (f, p) in files.iter().enumerate() {
            let m = read_gray(p)?;
            if m.dim() != (h, w) {
                return Err(Error::InconsistentDataset(format!("mask {} size", p.display())));
            }
            masks
                .slice_mut(s![n, f, .., ..])
                .assign(&m.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }));
        }
    }

    let flow_files = sorted_files(&root.join("flow"), "flo")?;
    require_count("flow files", flow_files.len(), t - 1)?;
    let mut flow = Array4::zeros((t.saturating_sub(1), h, w, 2));
    for (f, p) in flow_files.iter().enumerate() {
        let fl = read_flow_file(p)?;
        if fl.dim() != (h, w, 2) {
            return Err(Error::InconsistentDataset(format!("flow {} size", p.display())));
        }
        flow.index_axis_mut(Axis(0), f).assign(&fl);
    }

    let depth_files = sorted_files(&root.join("depth"), "pfm")?;
    require_count("depth files", depth_files.len(), t)?;
    let mut mono_depth = Array3::zeros((t, h, w));
    for (f, p) in depth_files.iter().enumerate() {
        let d = read_pfm(p)?;
        if d.dim() != (h, w) {
            return Err(Error::InconsistentDataset(format!("depth {} size", p.display())));
        }
        mono_depth.index_axis_mut(Axis(0), f).assign(&d);
    }

    let cameras = load_cameras(&poses_path)?;
    require_count("poses", cameras.len(), t)?;

    let gt_dir = root.join("gt_background");
    let gt_background = if gt_dir.is_dir() {
        let gt = read_rgb_sequence(&gt_dir)?;
        require_count("gt_background frames", gt.dim().0, t)?;
        Some(gt)
    } else {
        None
    };

    let bounds_path = root.join("bounds.json");
    let bounds = if bounds_path.is_file() {
        Some(serde_json::from_str(&fs::read_to_string(bounds_path)?)?)
    } else {
        None
    };

    let ds = VideoDataset { frames, masks, cameras, flow, mono_depth, gt_background, bounds };
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(ds: &VideoDataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    ds.validate()?;
    for sub in ["rgb", "flow", "depth"] {
        fs::create_dir_all(root.join(sub))?;
    }
    for t in 0..ds.num_frames() {
        write_rgb(&root.join("rgb").join(frame_name(t, "png")), ds.frames.index_axis(Axis(0), t))?;
        write_pfm(
            root.join("depth").join(frame_name(t, "pfm")),
            &ds.mono_depth.index_axis(Axis(0), t).to_owned(),
        )?;
    }
    for t in 0..ds.num_frames() - 1 {
        write_flow_file(
            root.join("flow").join(frame_name(t, "flo")),
            &ds.flow.index_axis(Axis(0), t).to_owned(),
        )?;
    }
    for n in 0..ds.num_layers() {
        let dir = root.join("mask").join(format!("{n:02}"));
        fs::create_dir_all(&dir)?;
        for t in 0..ds.num_frames() {
            write_gray(&dir.join(frame_name(t, "png")), &ds.masks.slice(s![n, t, .., ..]).to_owned())?;
        }
    }
    if let Some(gt) = &ds.gt_background {
        let dir = root.join("gt_background");
        fs::create_dir_all(&dir)?;
        for t in 0..ds.num_frames() {
            write_rgb(&dir.join(frame_name(t, "png")), gt.index_axis(Axis(0), t))?;
        }
    }
    if let Some(b) = &ds.bounds {
        fs::write(root.join("bounds.json"), serde_json::to_string_pretty(b)?)?;
    }
    save_cameras(root.join("poses.json"), &ds.cameras)
}
