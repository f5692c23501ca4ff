//! Analytic ray-traced scene generator. Renders a textured room (ground plane
//! and back wall) with moving sphere actors under a directional light, and
//! emits a full dataset with exact flow, disparity, poses, silhouette masks
//! and actor-free clean plates.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::geom::{self, Aabb, Vec3};
use crate::io::cameras::{CameraTrajectory, Intrinsics};
use crate::io::{write_dataset, VideoDataset};
use crate::{Error, Exec, Result};

const HIT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoomSpec {
    /// Height of the ground plane `y = ground_height`.
    pub ground_height: f64,
    /// Depth of the back wall `z = wall_z`.
    pub wall_z: f64,
    pub ground_color: [f64; 3],
    pub wall_color: [f64; 3],
    /// Edge length of one checker cell in world units.
    pub checker_size: f64,
    /// Relative brightness swing of the checker pattern.
    pub checker_contrast: f64,
    /// Lattice spacing of the value noise in world units.
    pub noise_scale: f64,
    pub noise_amplitude: f64,
    pub texture_seed: u64,
    /// Color returned by rays that leave the room.
    pub sky_color: [f64; 3],
}

impl Default for RoomSpec {
    fn default() -> Self {
        Self {
            ground_height: 0.0,
            wall_z: -2.0,
            ground_color: [0.62, 0.55, 0.45],
            wall_color: [0.45, 0.58, 0.7],
            checker_size: 0.5,
            checker_contrast: 0.3,
            noise_scale: 0.3,
            noise_amplitude: 0.25,
            texture_seed: 7,
            sky_color: [0.8, 0.85, 0.9],
        }
    }
}

/// Sphere whose center moves linearly from `start` (first frame) to `end`
/// (last frame).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorSpec {
    pub radius: f64,
    pub start: Vec3,
    pub end: Vec3,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LightSpec {
    /// Direction pointing towards the light.
    pub direction: Vec3,
    pub ambient: f64,
    /// Multiplier applied where an actor blocks the light.
    pub shadow_factor: f64,
}

impl Default for LightSpec {
    fn default() -> Self {
        Self { direction: [1.0, 1.0, 0.3], ambient: 0.35, shadow_factor: 0.4 }
    }
}

/// Look-at trajectory; eye and target move linearly over the clip. A fixed
/// eye with a moving target is a rotation-only camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraPath {
    pub eye_start: Vec3,
    pub eye_end: Vec3,
    pub target_start: Vec3,
    pub target_end: Vec3,
    pub up: Vec3,
    /// Focal length in pixels.
    pub focal: f64,
}

impl Default for CameraPath {
    fn default() -> Self {
        Self {
            eye_start: [-0.5, 1.4, 3.0],
            eye_end: [0.5, 1.4, 3.0],
            target_start: [0.0, 0.4, -0.5],
            target_end: [0.0, 0.4, -0.5],
            up: [0.0, 1.0, 0.0],
            focal: 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub room: RoomSpec,
    pub actors: Vec<ActorSpec>,
    pub light: LightSpec,
    pub camera: CameraPath,
    /// Distance used for the disparity of rays that hit nothing.
    pub far: f64,
    /// Fractional padding of the emitted scene bounds.
    pub bounds_padding: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 30,
            room: RoomSpec::default(),
            actors: vec![ActorSpec {
                radius: 0.35,
                start: [-1.0, 0.35, 0.3],
                end: [1.0, 0.35, 0.3],
                color: [0.85, 0.2, 0.15],
            }],
            light: LightSpec::default(),
            camera: CameraPath::default(),
            far: 100.0,
            bounds_padding: 0.05,
        }
    }
}

impl SceneSpec {
    /// Two actors crossing in opposite directions; the nearer one is layer 0.
    pub fn two_actors() -> Self {
        let mut spec = Self::default();
        spec.actors[0].start = [-1.0, 0.3, 0.6];
        spec.actors[0].end = [1.0, 0.3, 0.6];
        spec.actors[0].radius = 0.3;
        spec.actors.push(ActorSpec {
            radius: 0.3,
            start: [1.0, 0.3, -0.4],
            end: [-1.0, 0.3, -0.4],
            color: [0.2, 0.35, 0.85],
        });
        spec
    }

    /// Fixed eye panning across the room; no parallax.
    pub fn rotation_only() -> Self {
        let mut spec = Self::default();
        spec.camera.eye_start = [0.0, 1.4, 3.0];
        spec.camera.eye_end = [0.0, 1.4, 3.0];
        spec.camera.target_start = [-0.6, 0.4, -0.5];
        spec.camera.target_end = [0.6, 0.4, -0.5];
        spec
    }

    pub fn from_yaml(text: &str) -> Result<Self> {
        let spec: Self = serde_yaml::from_str(text).map_err(|e| Error::InvalidInput(format!("scene spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_yaml(&self) -> Result<String> {
        serde_yaml::to_string(self).map_err(|e| Error::InvalidInput(format!("scene spec: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("resolution {}x{}", self.width, self.height));
        }
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if !(self.camera.focal > 0.0) || !(self.far > 0.0) {
            return bad("focal length and far distance must be positive".into());
        }
        if geom::norm(self.light.direction) < 1e-9 {
            return bad("light direction is zero".into());
        }
        for (i, a) in self.actors.iter().enumerate() {
            if !(a.radius > 0.0) {
                return bad(format!("actor {i} radius {}", a.radius));
            }
        }
        let c = &self.camera;
        for (eye, target) in [(c.eye_start, c.target_start), (c.eye_end, c.target_end)] {
            let f = geom::sub(target, eye);
            if geom::norm(f) < 1e-9 || geom::norm(geom::cross(f, c.up)) < 1e-9 * geom::norm(f) {
                return bad("camera target coincides with eye or is parallel to up".into());
            }
        }
        Ok(())
    }

    fn phase(&self, t: usize) -> f64 {
        t as f64 / (self.frames - 1) as f64
    }

    pub fn actor_center(&self, actor: usize, t: usize) -> Vec3 {
        let a = &self.actors[actor];
        lerp3(a.start, a.end, self.phase(t))
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let (w, h) = (self.width as f64, self.height as f64);
        Intrinsics {
            fx: self.camera.focal,
            fy: self.camera.focal,
            cx: w / 2.0,
            cy: h / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    pub fn cameras(&self) -> Result<CameraTrajectory> {
        let c = &self.camera;
        let poses = (0..self.frames)
            .map(|t| {
                let u = self.phase(t);
                geom::look_at(lerp3(c.eye_start, c.eye_end, u), lerp3(c.target_start, c.target_end, u), c.up)
            })
            .collect();
        CameraTrajectory::new(self.intrinsics(), poses)
    }

    /// Distance travelled by the camera center over the clip.
    pub fn baseline(&self) -> f64 {
        geom::norm(geom::sub(self.camera.eye_end, self.camera.eye_start))
    }

    /// Distance from the first eye position to its look-at target.
    pub fn scene_depth(&self) -> f64 {
        geom::norm(geom::sub(self.camera.target_start, self.camera.eye_start))
    }
}

fn lerp3(a: Vec3, b: Vec3, u: f64) -> Vec3 {
    [a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u, a[2] + (b[2] - a[2]) * u]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Ground,
    Wall,
    Actor(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub distance: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub surface: Surface,
}

fn sphere_hit(center: Vec3, radius: f64, origin: Vec3, dir: Vec3) -> Option<f64> {
    let oc = geom::sub(origin, center);
    let b = geom::dot(oc, dir);
    let c = geom::dot(oc, oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    [-b - sq, -b + sq].into_iter().find(|&d| d > HIT_EPS)
}

fn plane_hit(origin: f64, dir: f64, level: f64) -> Option<f64> {
    if dir.abs() < 1e-12 {
        return None;
    }
    let d = (level - origin) / dir;
    (d > HIT_EPS).then_some(d)
}

/// Nearest intersection of a unit-direction ray with the scene at frame `t`.
pub fn trace(spec: &SceneSpec, t: usize, origin: Vec3, dir: Vec3, with_actors: bool) -> Option<Hit> {
    let mut best: Option<(f64, Surface)> = None;
    let mut take = |d: Option<f64>, s: Surface| {
        if let Some(d) = d {
            if best.map_or(true, |(b, _)| d < b) {
                best = Some((d, s));
            }
        }
    };
    take(plane_hit(origin[1], dir[1], spec.room.ground_height), Surface::Ground);
    take(plane_hit(origin[2], dir[2], spec.room.wall_z), Surface::Wall);
    if with_actors {
        for (i, a) in spec.actors.iter().enumerate() {
            take(sphere_hit(spec.actor_center(i, t), a.radius, origin, dir), Surface::Actor(i));
        }
    }
    best.map(|(distance, surface)| {
        let point = geom::add(origin, geom::scale(dir, distance));
        let normal = match surface {
            Surface::Ground => [0.0, 1.0, 0.0],
            Surface::Wall => [0.0, 0.0, 1.0],
            Surface::Actor(i) => geom::normalize(geom::sub(point, spec.actor_center(i, t))),
        };
        Hit { distance, point, normal, surface }
    })
}

fn hash(seed: u64, i: i64, j: i64) -> f64 {
    let mut z = seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (j as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, u: f64, v: f64) -> f64 {
    let (fu, fv) = (u.floor(), v.floor());
    let (i, j) = (fu as i64, fv as i64);
    let smooth = |x: f64| x * x * (3.0 - 2.0 * x);
    let (a, b) = (smooth(u - fu), smooth(v - fv));
    let top = hash(seed, i, j) * (1.0 - a) + hash(seed, i + 1, j) * a;
    let bottom = hash(seed, i, j + 1) * (1.0 - a) + hash(seed, i + 1, j + 1) * a;
    top * (1.0 - b) + bottom * b
}

/// Procedural albedo: soft checker modulated by two octaves of value noise.
fn texture(room: &RoomSpec, base: [f64; 3], seed: u64, u: f64, v: f64) -> [f64; 3] {
    let k = std::f64::consts::PI / room.checker_size;
    let checker = (4.0 * (k * u).sin() * (k * v).sin()).tanh();
    let n = (value_noise(seed, u / room.noise_scale, v / room.noise_scale)
        + 0.5 * value_noise(seed ^ 1, 2.0 * u / room.noise_scale, 2.0 * v / room.noise_scale))
        / 1.5;
    let m = (1.0 + 0.5 * room.checker_contrast * checker) * (1.0 + room.noise_amplitude * (2.0 * n - 1.0));
    base.map(|c| (c * m).clamp(0.0, 1.0))
}

fn albedo(spec: &SceneSpec, hit: &Hit) -> [f64; 3] {
    let r = &spec.room;
    let p = hit.point;
    match hit.surface {
        Surface::Ground => texture(r, r.ground_color, r.texture_seed, p[0], p[2]),
        Surface::Wall => texture(r, r.wall_color, r.texture_seed.wrapping_add(101), p[0], p[1]),
        Surface::Actor(i) => spec.actors[i].color,
    }
}

/// Whether some actor other than the hit surface blocks the light at `hit`.
fn in_shadow(spec: &SceneSpec, t: usize, hit: &Hit) -> bool {
    let l = geom::normalize(spec.light.direction);
    spec.actors.iter().enumerate().any(|(i, a)| {
        hit.surface != Surface::Actor(i) && sphere_hit(spec.actor_center(i, t), a.radius, hit.point, l).is_some()
    })
}

fn shade(spec: &SceneSpec, t: usize, hit: Option<&Hit>, with_actors: bool) -> ([f64; 3], bool) {
    let Some(hit) = hit else { return (spec.room.sky_color, false) };
    let l = geom::normalize(spec.light.direction);
    let lit = spec.light.ambient + (1.0 - spec.light.ambient) * geom::dot(hit.normal, l).max(0.0);
    let shadowed = with_actors && in_shadow(spec, t, hit);
    let factor = if shadowed { lit * spec.light.shadow_factor } else { lit };
    (albedo(spec, hit).map(|c| (c * factor).clamp(0.0, 1.0)), shadowed)
}

/// Everything rendered for one frame.
#[derive(Clone, Debug)]
pub struct FrameRender {
    /// `H x W x 3`.
    pub rgb: Array3<f64>,
    /// `H x W x 3`, actors and their shadows removed.
    pub background: Array3<f64>,
    /// `N x H x W`, 1 where actor `n` is the first visible surface.
    pub masks: Array3<f64>,
    /// Static-surface pixels darkened by an actor's shadow.
    pub shadow: Array2<bool>,
    /// `H x W` inverse hit distance.
    pub disparity: Array2<f64>,
}

pub fn render_frame(spec: &SceneSpec, cams: &CameraTrajectory, t: usize) -> FrameRender {
    let (h, w, n) = (spec.height, spec.width, spec.actors.len());
    let mut out = FrameRender {
        rgb: Array3::zeros((h, w, 3)),
        background: Array3::zeros((h, w, 3)),
        masks: Array3::zeros((n, h, w)),
        shadow: Array2::from_elem((h, w), false),
        disparity: Array2::zeros((h, w)),
    };
    let origin = cams.center(t);
    for y in 0..h {
        for x in 0..w {
            let dir = cams.pixel_direction(t, x as f64, y as f64);
            let hit = trace(spec, t, origin, dir, true);
            let (rgb, shadowed) = shade(spec, t, hit.as_ref(), true);
            let bg_hit = trace(spec, t, origin, dir, false);
            let (bg, _) = shade(spec, t, bg_hit.as_ref(), false);
            for c in 0..3 {
                out.rgb[[y, x, c]] = rgb[c];
                out.background[[y, x, c]] = bg[c];
            }
            out.disparity[[y, x]] = 1.0 / hit.map_or(spec.far, |h| h.distance);
            match hit.map(|h| h.surface) {
                Some(Surface::Actor(i)) => out.masks[[i, y, x]] = 1.0,
                _ => out.shadow[[y, x]] = shadowed,
            }
        }
    }
    out
}

/// Forward flow from frame `t` to `t + 1`: each pixel's first hit is moved
/// with its surface and reprojected.
pub fn analytic_flow(spec: &SceneSpec, t: usize) -> Result<Array3<f64>> {
    if t + 1 >= spec.frames {
        return Err(Error::InvalidFrame { t, frames: spec.frames });
    }
    let cams = spec.cameras()?;
    Ok(flow_with(spec, &cams, t))
}

fn flow_with(spec: &SceneSpec, cams: &CameraTrajectory, t: usize) -> Array3<f64> {
    let (h, w) = (spec.height, spec.width);
    let origin = cams.center(t);
    let mut flow = Array3::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            let dir = cams.pixel_direction(t, x as f64, y as f64);
            let moved = match trace(spec, t, origin, dir, true) {
                Some(hit) => match hit.surface {
                    Surface::Actor(i) => {
                        geom::add(hit.point, geom::sub(spec.actor_center(i, t + 1), spec.actor_center(i, t)))
                    }
                    _ => hit.point,
                },
                None => geom::add(origin, geom::scale(dir, spec.far)),
            };
            if let Some(([u, v], _)) = cams.project(t + 1, moved) {
                flow[[y, x, 0]] = u - x as f64;
                flow[[y, x, 1]] = v - y as f64;
            }
        }
    }
    flow
}

/// Disparity `1 / hit distance` for frame `t`.
pub fn analytic_depth(spec: &SceneSpec, t: usize) -> Result<Array2<f64>> {
    let cams = spec.cameras()?;
    if t >= spec.frames {
        return Err(Error::InvalidFrame { t, frames: spec.frames });
    }
    Ok(render_frame(spec, &cams, t).disparity)
}

/// A generated scene with the per-pixel ground truth kept in memory.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub dataset: VideoDataset,
    /// `T x H x W` shadow pixels (outside every mask).
    pub shadows: Array3<bool>,
}

/// Renders every frame and assembles the dataset.
pub fn build(spec: &SceneSpec, exec: Exec) -> Result<SyntheticScene> {
    spec.validate()?;
    if spec.actors.is_empty() {
        return Err(Error::DegenerateScene("scene has no actor".into()));
    }
    let cams = spec.cameras()?;
    let (t_len, h, w, n) = (spec.frames, spec.height, spec.width, spec.actors.len());
    let renders = exec.map(t_len, |t| render_frame(spec, &cams, t));
    let flows = exec.map(t_len - 1, |t| flow_with(spec, &cams, t));

    let mut frames = Array4::zeros((t_len, h, w, 3));
    let mut gt = Array4::zeros((t_len, h, w, 3));
    let mut masks = Array4::zeros((n, t_len, h, w));
    let mut depth = Array3::zeros((t_len, h, w));
    let mut shadows = Array3::from_elem((t_len, h, w), false);
    for (t, r) in renders.iter().enumerate() {
        frames.index_axis_mut(Axis(0), t).assign(&r.rgb.mapv(|v| v as f32));
        gt.index_axis_mut(Axis(0), t).assign(&r.background.mapv(|v| v as f32));
        masks.slice_mut(s![.., t, .., ..]).assign(&r.masks.mapv(|v| v as f32));
        depth.index_axis_mut(Axis(0), t).assign(&r.disparity.mapv(|v| v as f32));
        shadows.index_axis_mut(Axis(0), t).assign(&r.shadow);
    }
    for i in 0..n {
        if masks.index_axis(Axis(0), i).iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateScene(format!("actor {i} is never visible")));
        }
    }
    let mut flow = Array4::zeros((t_len - 1, h, w, 2));
    for (t, f) in flows.iter().enumerate() {
        flow.index_axis_mut(Axis(0), t).assign(&f.mapv(|v| v as f32));
    }

    let mut bounds = Aabb::empty();
    for t in 0..t_len {
        let origin = cams.center(t);
        for y in 0..h {
            for x in 0..w {
                let dir = cams.pixel_direction(t, x as f64, y as f64);
                if let Some(hit) = trace(spec, t, origin, dir, false) {
                    bounds.include(hit.point);
                }
            }
        }
    }
    if bounds.volume() <= 0.0 || !bounds.volume().is_finite() {
        return Err(Error::DegenerateScene("background surfaces span no volume".into()));
    }
    let dataset = VideoDataset {
        frames,
        masks,
        cameras: cams,
        flow,
        mono_depth: depth,
        gt_background: Some(gt),
        bounds: Some(bounds.padded(spec.bounds_padding)),
    };
    dataset.validate()?;
    Ok(SyntheticScene { spec: spec.clone(), dataset, shadows })
}

/// Builds the scene and writes the dataset layout to `out_dir`, together
/// with a copy of the spec.
pub fn generate(spec: &SceneSpec, out_dir: &Path) -> Result<SyntheticScene> {
    let scene = build(spec, Exec::default())?;
    fs::create_dir_all(out_dir)?;
    write_dataset(&scene.dataset, out_dir)?;
    fs::write(out_dir.join("scene.yaml"), spec.to_yaml()?)?;
    Ok(scene)
}

/// Ground-truth shadow masks of a generated dataset, recovered from its
/// `scene.yaml`; `None` for datasets without one.
pub fn dataset_shadows(data_dir: &Path) -> Result<Option<Array3<bool>>> {
    let path = data_dir.join("scene.yaml");
    if !path.is_file() {
        return Ok(None);
    }
    let spec = SceneSpec::from_yaml(&fs::read_to_string(path)?)?;
    Ok(Some(build(&spec, Exec::default())?.shadows))
}

/// Fraction of frames in which each actor covers at least one pixel.
pub fn visibility(scene: &SyntheticScene) -> Vec<f64> {
    let masks = &scene.dataset.masks;
    let (n, t_len, _, _) = masks.dim();
    (0..n)
        .map(|i| {
            let seen = (0..t_len).filter(|&t| masks.slice(s![i, t, .., ..]).iter().any(|&v| v > 0.0)).count();
            seen as f64 / t_len as f64
        })
        .collect()
}
