//! Pinhole ray generation and differentiable volume rendering of the
//! background field.
//!
//! Each ray is clipped to the field's box, split into `S` equal bins and
//! sampled once per bin. Colors are decoded only where they can matter:
//! samples whose pre-activation density is nonnegative (elsewhere both the
//! weight and its density gradient vanish) while the transmittance is above
//! a threshold. A threshold of zero evaluates every such sample, which makes
//! the backward pass exact.

use ndarray::{Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::field::{DecodeTape, Stencil, TensorVmField};
use crate::geom::{add, scale, Vec3};
use crate::io::CameraTrajectory;
use crate::{Error, Exec, Real, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<Vec3>,
    /// Unit directions.
    pub directions: Vec<Vec3>,
    /// `[x, y]` pixel of each ray.
    pub pixels: Vec<[usize; 2]>,
    pub frames: Vec<usize>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn extend(&mut self, other: RayBatch) {
        self.origins.extend(other.origins);
        self.directions.extend(other.directions);
        self.pixels.extend(other.pixels);
        self.frames.extend(other.frames);
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> RayBatch {
        RayBatch {
            origins: self.origins[range.clone()].to_vec(),
            directions: self.directions[range.clone()].to_vec(),
            pixels: self.pixels[range.clone()].to_vec(),
            frames: self.frames[range].to_vec(),
        }
    }
}

/// Rays through the centers of `pixels` (`[x, y]`) of frame `t`.
pub fn generate_rays(camera: &CameraTrajectory, t: usize, pixels: &[[usize; 2]]) -> Result<RayBatch> {
    if t >= camera.len() {
        return Err(Error::InvalidFrame { t, frames: camera.len() });
    }
    let k = &camera.intrinsics;
    let origin = camera.center(t);
    let mut batch = RayBatch::default();
    for &[x, y] in pixels {
        if x >= k.width || y >= k.height {
            return Err(Error::InvalidPixel { x: x as i64, y: y as i64, width: k.width, height: k.height });
        }
        batch.origins.push(origin);
        batch.directions.push(camera.pixel_direction(t, x as f64, y as f64));
        batch.pixels.push([x, y]);
        batch.frames.push(t);
    }
    Ok(batch)
}

/// Every pixel of frame `t` in row-major order.
pub fn frame_rays(camera: &CameraTrajectory, t: usize) -> Result<RayBatch> {
    let k = &camera.intrinsics;
    let pixels: Vec<[usize; 2]> = (0..k.height).flat_map(|y| (0..k.width).map(move |x| [x, y])).collect();
    generate_rays(camera, t, &pixels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub near: f64,
    pub far: f64,
    pub samples: usize,
    pub perturb: bool,
    pub seed: u64,
    /// Samples behind transmittance at or below this are skipped.
    pub transmittance_threshold: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { near: 0.05, far: 100.0, samples: 256, perturb: false, seed: 0, transmittance_threshold: 1e-4 }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::InvalidRange { near: self.near, far: self.far });
        }
        if self.samples < 2 {
            return Err(Error::InvalidSamples(format!("need at least 2 samples per ray, got {}", self.samples)));
        }
        Ok(())
    }
}

/// Transmittance before each sample and weights from per-sample optical
/// thickness `tau_k = sigma_k * delta_k`.
pub fn integrate<T: Real>(tau: &[T], trans: &mut [T], weights: &mut [T]) {
    let mut acc = T::zero();
    for k in 0..tau.len() {
        let t = (-acc).exp();
        trans[k] = t;
        weights[k] = -t * (-tau[k]).exp_m1();
        acc += tau[k];
    }
}

/// Forward state of one ray kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct RayTrace<T> {
    /// Start of the clipped segment.
    pub start: T,
    /// Bin width in world units; zero for rays missing the box.
    pub delta: T,
    pub z: Vec<T>,
    pub raw: Vec<T>,
    pub tau: Vec<T>,
    pub trans: Vec<T>,
    pub weights: Vec<T>,
    pub stencils: Vec<Stencil<T>>,
    /// Sample indices with decoded colors.
    pub active: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct RenderTape<T> {
    pub rays: Vec<RayTrace<T>>,
    /// Offset of each ray's first active sample in the decoded rows.
    pub offsets: Vec<usize>,
    pub decode: DecodeTape<T>,
}

#[derive(Clone, Debug)]
pub struct BackgroundRender<T> {
    /// `K x 3`, no background color added.
    pub rgb: Array2<T>,
    /// Unnormalized expected depth.
    pub depth: Vec<T>,
    pub accumulation: Vec<T>,
    /// `K x S`
    pub weights: Array2<T>,
    /// Normalized sample positions in `[0, 1]`, `K x S`.
    pub s: Array2<T>,
    /// Normalized bin widths, `K x S`.
    pub intervals: Array2<T>,
    pub tape: Option<RenderTape<T>>,
}

fn trace_ray<T: Real>(field: &TensorVmField<T>, origin: Vec3, dir: Vec3, opts: &RenderOptions, index: usize) -> RayTrace<T> {
    let n = opts.samples;
    let Some((t0, t1)) = field
        .bbox
        .intersect(origin, dir)
        .map(|(a, b)| (a.max(opts.near), b.min(opts.far)))
        .filter(|(a, b)| b > a)
    else {
        return RayTrace::default();
    };
    let delta = (t1 - t0) / n as f64;
    let mut rng = opts.perturb.then(|| {
        let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
        r.set_stream(index as u64);
        r
    });
    let mut tr = RayTrace {
        start: T::lit(t0),
        delta: T::lit(delta),
        z: Vec::with_capacity(n),
        raw: Vec::with_capacity(n),
        tau: Vec::with_capacity(n),
        trans: vec![T::zero(); n],
        weights: vec![T::zero(); n],
        stencils: Vec::with_capacity(n),
        active: Vec::new(),
    };
    for k in 0..n {
        let u = rng.as_mut().map_or(0.5, |r| r.gen::<f64>());
        let z = t0 + (k as f64 + u) * delta;
        let st = field.stencil_clamped(add(origin, scale(dir, z)));
        let raw = field.density_raw(&st);
        tr.z.push(T::lit(z));
        tr.raw.push(raw);
        tr.tau.push(raw.max(T::zero()) * tr.delta);
        tr.stencils.push(st);
    }
    integrate(&tr.tau, &mut tr.trans, &mut tr.weights);
    let thr = T::lit(opts.transmittance_threshold);
    tr.active = (0..n)
        .filter(|&k| tr.raw[k] >= T::zero() && (tr.trans[k] > thr || opts.transmittance_threshold == 0.0))
        .map(|k| k as u32)
        .collect();
    tr
}

/// Renders `rays` through `field`. With `keep_tape` the intermediate state
/// needed by [`render_backward`] is retained.
pub fn render_rays<T: Real>(
    field: &TensorVmField<T>,
    rays: &RayBatch,
    opts: &RenderOptions,
    keep_tape: bool,
    exec: Exec,
) -> Result<BackgroundRender<T>> {
    opts.validate()?;
    for (index, d) in rays.directions.iter().enumerate() {
        let norm = crate::geom::norm(*d);
        if (norm - 1.0).abs() > crate::field::DIRECTION_TOLERANCE {
            return Err(Error::InvalidDirection { index, norm });
        }
    }
    let (k, n) = (rays.len(), opts.samples);
    let traces: Vec<RayTrace<T>> =
        exec.map(k, |i| trace_ray(field, rays.origins[i], rays.directions[i], opts, i));

    let mut offsets = Vec::with_capacity(k + 1);
    let mut total = 0;
    for tr in &traces {
        offsets.push(total);
        total += tr.active.len();
    }
    offsets.push(total);

    let cols = 3 * field.appearance.rank;
    let mut app = Array2::<T>::zeros((total, cols));
    {
        let data = app.as_slice_mut().expect("contiguous");
        let rows_per_chunk = 256;
        exec.for_chunks_mut(data, rows_per_chunk * cols, |c, chunk| {
            let first = c * rows_per_chunk;
            let mut ray = offsets.partition_point(|&o| o <= first) - 1;
            for (r, row) in chunk.chunks_mut(cols).enumerate() {
                let a = first + r;
                while offsets[ray + 1] <= a {
                    ray += 1;
                }
                let sample = traces[ray].active[a - offsets[ray]] as usize;
                field.appearance_vector(&traces[ray].stencils[sample], row);
            }
        });
    }
    let mut dirs = Vec::with_capacity(total);
    for (i, tr) in traces.iter().enumerate() {
        dirs.extend(std::iter::repeat(rays.directions[i]).take(tr.active.len()));
    }
    let decode = field.decode(app, &dirs);

    let mut rgb = Array2::zeros((k, 3));
    let mut depth = vec![T::zero(); k];
    let mut accumulation = vec![T::zero(); k];
    let mut weights = Array2::zeros((k, n));
    let mut s = Array2::zeros((k, n));
    let intervals = Array2::from_elem((k, n), T::lit(1.0 / n as f64));
    for (i, tr) in traces.iter().enumerate() {
        for j in 0..n {
            s[[i, j]] = T::lit((j as f64 + 0.5) / n as f64);
        }
        if tr.z.is_empty() {
            continue;
        }
        let w = &tr.weights;
        let span = tr.delta * T::lit(n as f64);
        for j in 0..n {
            weights[[i, j]] = w[j];
            s[[i, j]] = ((tr.z[j] - tr.start) / span).max(T::zero()).min(T::one());
            depth[i] += w[j] * tr.z[j];
            accumulation[i] += w[j];
        }
        for (a, &j) in tr.active.iter().enumerate() {
            let row = offsets[i] + a;
            for c in 0..3 {
                rgb[[i, c]] += w[j as usize] * decode.rgb[[row, c]];
            }
        }
    }
    let tape = keep_tape.then(|| RenderTape { rays: traces, offsets, decode });
    Ok(BackgroundRender { rgb, depth, accumulation, weights, s, intervals, tape })
}

/// A full frame rendered in chunks of `chunk` rays.
#[derive(Clone, Debug)]
pub struct ImageRender<T> {
    /// `H x W x 3`
    pub rgb: Array3<T>,
    pub depth: Array2<T>,
    pub accumulation: Array2<T>,
}

pub fn render_image<T: Real>(
    field: &TensorVmField<T>,
    camera: &CameraTrajectory,
    t: usize,
    opts: &RenderOptions,
    chunk: usize,
    exec: Exec,
) -> Result<ImageRender<T>> {
    let (h, w) = (camera.intrinsics.height, camera.intrinsics.width);
    let rays = frame_rays(camera, t)?;
    let mut out = ImageRender { rgb: Array3::zeros((h, w, 3)), depth: Array2::zeros((h, w)), accumulation: Array2::zeros((h, w)) };
    let chunk = chunk.max(1);
    let mut begin = 0;
    while begin < rays.len() {
        let end = (begin + chunk).min(rays.len());
        let part = rays.slice(begin..end);
        let r = render_rays(field, &part, opts, false, exec)?;
        for (j, &[x, y]) in part.pixels.iter().enumerate() {
            for c in 0..3 {
                out.rgb[[y, x, c]] = r.rgb[[j, c]];
            }
            out.depth[[y, x]] = r.depth[j];
            out.accumulation[[y, x]] = r.accumulation[j];
        }
        begin = end;
    }
    Ok(out)
}

/// Accumulates parameter gradients of a loss whose partials with respect to
/// the rendered color, depth, accumulation and (optionally) weights are
/// given.
pub fn render_backward<T: Real>(
    field: &mut TensorVmField<T>,
    render: &BackgroundRender<T>,
    d_rgb: ArrayView2<'_, T>,
    d_depth: &[T],
    d_accumulation: Option<&[T]>,
    d_weights: Option<ArrayView2<'_, T>>,
    exec: Exec,
) {
    let tape = render.tape.as_ref().expect("render_rays called without keep_tape");
    let k = tape.rays.len();
    let total = *tape.offsets.last().unwrap_or(&0);
    let colors = &tape.decode.rgb;

    // per-ray density gradients and per-sample color gradients
    let per_ray: Vec<(Vec<T>, Vec<[T; 3]>)> = exec.map(k, |i| {
        let tr = &tape.rays[i];
        let n = tr.z.len();
        if n == 0 {
            return (Vec::new(), Vec::new());
        }
        let g_rgb = [d_rgb[[i, 0]], d_rgb[[i, 1]], d_rgb[[i, 2]]];
        let mut g = vec![T::zero(); n];
        for j in 0..n {
            g[j] = d_depth[i] * tr.z[j];
            if let Some(da) = d_accumulation {
                g[j] += da[i];
            }
            if let Some(dw) = &d_weights {
                g[j] += dw[[i, j]];
            }
        }
        let mut d_color = Vec::with_capacity(tr.active.len());
        for (a, &j) in tr.active.iter().enumerate() {
            let row = tape.offsets[i] + a;
            let w = render.weights[[i, j as usize]];
            g[j as usize] += (0..3).map(|c| g_rgb[c] * colors[[row, c]]).sum::<T>();
            d_color.push([w * g_rgb[0], w * g_rgb[1], w * g_rgb[2]]);
        }
        // d tau_k = T_{k+1} g_k - sum_{j>k} w_j g_j
        let mut d_raw = vec![T::zero(); n];
        let mut suffix = T::zero();
        for j in (0..n).rev() {
            let w = render.weights[[i, j]];
            let next_trans = tr.trans[j] * (-tr.tau[j]).exp();
            let d_tau = next_trans * g[j] - suffix;
            suffix += w * g[j];
            if tr.raw[j] >= T::zero() {
                d_raw[j] = d_tau * tr.delta;
            }
        }
        (d_raw, d_color)
    });

    let mut d_colors = Array2::zeros((total, 3));
    for (i, (_, dc)) in per_ray.iter().enumerate() {
        for (a, v) in dc.iter().enumerate() {
            let row = tape.offsets[i] + a;
            for c in 0..3 {
                d_colors[[row, c]] = v[c];
            }
        }
    }
    let d_app = field.decode_backward(&tape.decode, &d_colors);

    for (i, (d_raw, _)) in per_ray.iter().enumerate() {
        let tr = &tape.rays[i];
        for (j, &d) in d_raw.iter().enumerate() {
            if d != T::zero() {
                field.density_backward(&tr.stencils[j], d);
            }
        }
        for (a, &j) in tr.active.iter().enumerate() {
            let row = tape.offsets[i] + a;
            field.appearance_backward(&tr.stencils[j as usize], d_app.row(row).as_slice().expect("row"));
        }
    }
}

fn check_distortion_inputs<T: Real>(w: &ArrayView2<'_, T>, s: &ArrayView2<'_, T>, iv: &ArrayView2<'_, T>) -> Result<()> {
    if w.dim() != s.dim() || w.dim() != iv.dim() {
        return Err(Error::InvalidSamples(format!("shape mismatch {:?} {:?} {:?}", w.dim(), s.dim(), iv.dim())));
    }
    for (i, row) in s.rows().into_iter().enumerate() {
        if row.iter().zip(row.iter().skip(1)).any(|(a, b)| b < a) {
            return Err(Error::InvalidSamples(format!("positions of ray {i} are not sorted")));
        }
    }
    Ok(())
}

/// Spread of the weights along each ray: pairwise weighted distances plus a
/// self term per bin, averaged over rays. Evaluated in linear time with
/// running sums.
pub fn distortion_loss<T: Real>(weights: ArrayView2<'_, T>, s: ArrayView2<'_, T>, intervals: ArrayView2<'_, T>) -> Result<f64> {
    check_distortion_inputs(&weights, &s, &intervals)?;
    let (k, n) = weights.dim();
    if k == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..k {
        let (mut w_before, mut ws_before) = (0.0, 0.0);
        let mut cross = 0.0;
        let mut own = 0.0;
        for j in 0..n {
            let (w, sj, d) = (weights[[i, j]].f64(), s[[i, j]].f64(), intervals[[i, j]].f64());
            // each unordered pair counted twice
            cross += 2.0 * w * (sj * w_before - ws_before);
            w_before += w;
            ws_before += w * sj;
            own += w * w * d / 3.0;
        }
        total += cross + own;
    }
    Ok(total / k as f64)
}

/// Gradient of [`distortion_loss`] with respect to the weights.
pub fn distortion_grad<T: Real>(weights: ArrayView2<'_, T>, s: ArrayView2<'_, T>, intervals: ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_distortion_inputs(&weights, &s, &intervals)?;
    let (k, n) = weights.dim();
    let mut out = Array2::zeros((k, n));
    if k == 0 {
        return Ok(out);
    }
    let inv_k = 1.0 / k as f64;
    for i in 0..k {
        let (w_total, ws_total) = (0..n).fold((0.0, 0.0), |(a, b), j| {
            let w = weights[[i, j]].f64();
            (a + w, b + w * s[[i, j]].f64())
        });
        let (mut w_before, mut ws_before) = (0.0, 0.0);
        for j in 0..n {
            let (w, sj, d) = (weights[[i, j]].f64(), s[[i, j]].f64(), intervals[[i, j]].f64());
            let w_after = w_total - w_before - w;
            let ws_after = ws_total - ws_before - w * sj;
            let dist = sj * w_before - ws_before + ws_after - sj * w_after;
            out[[i, j]] = T::lit((2.0 * dist + 2.0 * w * d / 3.0) * inv_k);
            w_before += w;
            ws_before += w * sj;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use crate::geom::{identity, Aabb};
    use crate::io::Intrinsics;
    use ndarray::array;

    fn camera(poses: Vec<crate::geom::Mat4>) -> CameraTrajectory {
        let k = Intrinsics { fx: 20.0, fy: 20.0, cx: 8.0, cy: 6.0, width: 16, height: 12 };
        CameraTrajectory::new(k, poses).unwrap()
    }

    #[test]
    fn principal_ray_points_down_negative_z() {
        let k = Intrinsics { fx: 20.0, fy: 20.0, cx: 7.5, cy: 5.5, width: 16, height: 12 };
        let cam = CameraTrajectory::new(k, vec![identity()]).unwrap();
        // pixel (cx - 0.5, cy - 0.5) has its center on the principal point
        let rays = generate_rays(&cam, 0, &[[7, 5]]).unwrap();
        let d = rays.directions[0];
        assert!(d[0].abs() < 1e-12 && d[1].abs() < 1e-12 && (d[2] + 1.0).abs() < 1e-12, "{d:?}");
        assert_eq!(rays.origins[0], [0.0; 3]);
    }

    #[test]
    fn directions_unit_and_translation_shifts_origin() {
        let mut moved = identity();
        moved[0][3] = 1.0;
        let cam = camera(vec![identity(), moved]);
        let pixels: Vec<[usize; 2]> = (0..12).flat_map(|y| (0..16).map(move |x| [x, y])).collect();
        let a = generate_rays(&cam, 0, &pixels).unwrap();
        let b = generate_rays(&cam, 1, &pixels).unwrap();
        for i in 0..pixels.len() {
            assert!((crate::geom::norm(a.directions[i]) - 1.0).abs() < 1e-9);
            assert_eq!(a.directions[i], b.directions[i]);
            assert_eq!(crate::geom::sub(b.origins[i], a.origins[i]), [1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn out_of_bounds_pixel() {
        let cam = camera(vec![identity()]);
        assert!(matches!(generate_rays(&cam, 0, &[[16, 0]]), Err(Error::InvalidPixel { x: 16, .. })));
        assert!(matches!(generate_rays(&cam, 0, &[[0, 12]]), Err(Error::InvalidPixel { y: 12, .. })));
    }

    fn field(res: usize) -> TensorVmField<f64> {
        let cfg = FieldConfig {
            density_rank: 2,
            appearance_rank: 2,
            feature_dim: 4,
            decoder_hidden: 8,
            init_resolution: res,
            final_resolution: res,
            ..FieldConfig::default()
        };
        TensorVmField::new(cfg, Aabb::new([-1.0; 3], [1.0; 3]), 7).unwrap()
    }

    fn axis_rays() -> RayBatch {
        RayBatch {
            origins: vec![[0.1, 0.2, 3.0], [-0.3, 0.4, 3.0], [0.5, -0.5, -3.0]],
            directions: vec![[0.0, 0.0, -1.0], crate::geom::normalize([0.1, -0.05, -1.0]), [0.0, 0.0, 1.0]],
            pixels: vec![[0, 0]; 3],
            frames: vec![0; 3],
        }
    }

    #[test]
    fn empty_field_renders_black() {
        let f = field(4);
        let opts = RenderOptions { near: 0.1, far: 10.0, samples: 16, ..Default::default() };
        let r = render_rays(&f, &axis_rays(), &opts, false, Exec::Sequential).unwrap();
        assert!(r.rgb.iter().all(|&v| v == 0.0));
        assert!(r.depth.iter().all(|&v| v == 0.0));
        assert!(r.accumulation.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_range_and_samples() {
        let f = field(4);
        let opts = RenderOptions { near: 2.0, far: 1.0, samples: 16, ..Default::default() };
        assert!(matches!(render_rays(&f, &axis_rays(), &opts, false, Exec::Sequential), Err(Error::InvalidRange { .. })));
        let opts = RenderOptions { near: 0.1, far: 1.0, samples: 1, ..Default::default() };
        assert!(matches!(render_rays(&f, &axis_rays(), &opts, false, Exec::Sequential), Err(Error::InvalidSamples(_))));
    }

    /// Midpoint-sampled slab `[a, b]` of density `sigma0` with color `c`
    /// rendered over `[near, far]`.
    fn render_slab(a: f64, b: f64, sigma0: f64, c: f64, near: f64, far: f64, n: usize) -> (f64, f64, f64) {
        let delta = (far - near) / n as f64;
        let z: Vec<f64> = (0..n).map(|k| near + (k as f64 + 0.5) * delta).collect();
        let tau: Vec<f64> = z.iter().map(|&z| if (a..=b).contains(&z) { sigma0 * delta } else { 0.0 }).collect();
        let (mut t, mut w) = (vec![0.0; n], vec![0.0; n]);
        integrate(&tau, &mut t, &mut w);
        let rgb = w.iter().map(|w| w * c).sum();
        let depth = w.iter().zip(&z).map(|(w, z)| w * z).sum();
        (rgb, depth, w.iter().sum())
    }

    #[test]
    fn homogeneous_slab_matches_closed_form() {
        let (a, b, sigma0, c) = (1.0, 2.0, 1.7, 0.6);
        let (rgb, _, _) = render_slab(a, b, sigma0, c, 0.0, 4.0, 256);
        let exact = (1.0 - (-sigma0 * (b - a)).exp()) * c;
        assert!((rgb - exact).abs() < 1e-3, "{rgb} vs {exact}");
    }

    #[test]
    fn opaque_slab_depth() {
        let (near, far, n) = (0.0, 4.0, 128);
        let spacing = (far - near) / n as f64;
        let z0 = 2.3;
        let (_, depth, acc) = render_slab(z0, z0 + spacing, 1e4, 1.0, near, far, n);
        assert!((acc - 1.0).abs() < 1e-9);
        assert!((depth - z0).abs() <= spacing, "{depth}");
    }

    fn random_dense_field(res: usize, seed: u64) -> TensorVmField<f64> {
        let mut f = field(res);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in 0..3 {
            f.density.planes[m].value.iter_mut().for_each(|v| *v = rng.gen_range(0.2..1.0));
            f.density.lines[m].value.iter_mut().for_each(|v| *v = rng.gen_range(0.2..1.0));
        }
        f
    }

    #[test]
    fn weights_bounded_and_deterministic() {
        let f = random_dense_field(4, 1);
        let opts = RenderOptions { near: 0.1, far: 10.0, samples: 32, ..Default::default() };
        let a = render_rays(&f, &axis_rays(), &opts, false, Exec::Sequential).unwrap();
        let b = render_rays(&f, &axis_rays(), &opts, false, Exec::Parallel).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.weights, b.weights);
        for i in 0..3 {
            let sum: f64 = a.weights.row(i).sum();
            assert!(sum <= 1.0 + 1e-5 && sum > 0.0);
            assert!(a.weights.row(i).iter().all(|&w| w >= 0.0));
            assert!(a.s.row(i).iter().all(|&s| (0.0..=1.0).contains(&s)));
            assert!(a.rgb.row(i).iter().all(|&c| (0.0..=1.0).contains(&c)));
        }
    }

    #[test]
    fn perturbed_samples_are_seeded_and_sorted() {
        let f = random_dense_field(4, 1);
        let opts = RenderOptions { near: 0.1, far: 10.0, samples: 32, perturb: true, seed: 5, ..Default::default() };
        let a = render_rays(&f, &axis_rays(), &opts, false, Exec::Sequential).unwrap();
        let b = render_rays(&f, &axis_rays(), &opts, false, Exec::Parallel).unwrap();
        assert_eq!(a.rgb, b.rgb);
        for row in a.s.rows() {
            assert!(row.iter().zip(row.iter().skip(1)).all(|(x, y)| x <= y));
        }
        let c = render_rays(&f, &axis_rays(), &RenderOptions { seed: 6, ..opts }, false, Exec::Sequential).unwrap();
        assert_ne!(a.rgb, c.rgb);
    }

    fn probe_loss(f: &TensorVmField<f64>, opts: &RenderOptions, probes: &(Array2<f64>, Vec<f64>, Array2<f64>)) -> f64 {
        let r = render_rays(f, &axis_rays(), opts, false, Exec::Sequential).unwrap();
        (&r.rgb * &probes.0).sum()
            + r.depth.iter().zip(&probes.1).map(|(a, b)| a * b).sum::<f64>()
            + (&r.weights * &probes.2).sum()
    }

    #[test]
    fn render_gradients_match_finite_differences() {
        let mut f = random_dense_field(4, 3);
        let opts = RenderOptions { near: 0.1, far: 10.0, samples: 24, transmittance_threshold: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probes = (
            Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0)),
            (0..3).map(|_| rng.gen_range(-0.2..0.2)).collect::<Vec<_>>(),
            Array2::from_shape_fn((3, 24), |_| rng.gen_range(-1.0..1.0)),
        );
        let r = render_rays(&f, &axis_rays(), &opts, true, Exec::Sequential).unwrap();
        render_backward(&mut f, &r, probes.0.view(), &probes.1, None, Some(probes.2.view()), Exec::Sequential);
        let base = f.clone();
        for m in [0, 2] {
            let mut v = base.density.planes[m].value.clone();
            crate::nn::gradcheck::check(&mut v, &base.density.planes[m].grad, |v| {
                let mut g = base.clone();
                g.density.planes[m].value = v.to_vec();
                probe_loss(&g, &opts, &probes)
            }, 1e-4, 1e-3);
            let mut v = base.density.lines[m].value.clone();
            crate::nn::gradcheck::check(&mut v, &base.density.lines[m].grad, |v| {
                let mut g = base.clone();
                g.density.lines[m].value = v.to_vec();
                probe_loss(&g, &opts, &probes)
            }, 1e-4, 1e-3);
        }
        let mut v = base.appearance.planes[1].value.clone();
        crate::nn::gradcheck::check(&mut v, &base.appearance.planes[1].grad, |v| {
            let mut g = base.clone();
            g.appearance.planes[1].value = v.to_vec();
            probe_loss(&g, &opts, &probes)
        }, 1e-4, 1e-3);
        let mut v = base.decoder.layers[0].weight.value.clone();
        crate::nn::gradcheck::check(&mut v, &base.decoder.layers[0].weight.grad, |v| {
            let mut g = base.clone();
            g.decoder.layers[0].weight.value = v.to_vec();
            probe_loss(&g, &opts, &probes)
        }, 1e-4, 1e-3);
    }

    #[test]
    fn zero_init_field_receives_density_gradient() {
        let mut f = field(4);
        let opts = RenderOptions { near: 0.1, far: 10.0, samples: 16, ..Default::default() };
        let r = render_rays(&f, &axis_rays(), &opts, true, Exec::Sequential).unwrap();
        let target = Array2::from_elem((3, 3), 0.8);
        let d_rgb = (&r.rgb - &target) * 2.0;
        render_backward(&mut f, &r, d_rgb.view(), &[0.0; 3], None, None, Exec::Sequential);
        assert!(f.density.lines.iter().any(|l| l.grad.iter().any(|&g| g != 0.0)));
    }

    fn brute_distortion(w: &[f64], s: &[f64], d: &[f64]) -> f64 {
        let mut total = 0.0;
        for j in 0..w.len() {
            for k in 0..w.len() {
                total += w[j] * w[k] * (s[j] - s[k]).abs();
            }
            total += w[j] * w[j] * d[j] / 3.0;
        }
        total
    }

    #[test]
    fn distortion_examples() {
        let zero = Array2::<f64>::zeros((2, 4));
        let s = array![[0.1, 0.4, 0.6, 0.9], [0.1, 0.4, 0.6, 0.9]];
        let d = Array2::from_elem((2, 4), 0.25);
        assert_eq!(distortion_loss(zero.view(), s.view(), d.view()).unwrap(), 0.0);

        let w = array![[0.0, 0.7, 0.0, 0.0]];
        let v = distortion_loss(w.view(), s.row(0).insert_axis(ndarray::Axis(0)), d.row(0).insert_axis(ndarray::Axis(0))).unwrap();
        assert!((v - 0.49 * 0.25 / 3.0).abs() < 1e-15);

        let s = array![[0.1, 0.49, 0.51, 0.9]];
        let d = Array2::from_elem((1, 4), 0.02);
        let spread = distortion_loss(array![[0.5, 0.0, 0.0, 0.5]].view(), s.view(), d.view()).unwrap();
        let tight = distortion_loss(array![[0.0, 0.5, 0.5, 0.0]].view(), s.view(), d.view()).unwrap();
        // 2 * 0.25 * 0.8 vs 2 * 0.25 * 0.02 plus equal self terms
        assert!((spread - (0.4 + 2.0 * 0.25 * 0.02 / 3.0)).abs() < 1e-12);
        assert!(spread > tight);
    }

    #[test]
    fn distortion_matches_double_sum_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (k, n) = (3, 9);
        let w = Array2::from_shape_fn((k, n), |_| rng.gen_range(0.0..0.3));
        let mut s = Array2::from_shape_fn((k, n), |_| rng.gen_range(0.0..1.0));
        for mut row in s.rows_mut() {
            let mut v = row.to_vec();
            v.sort_by(f64::total_cmp);
            row.assign(&ndarray::Array1::from(v));
        }
        let d = Array2::from_shape_fn((k, n), |_| rng.gen_range(0.01..0.1));
        let brute: f64 = (0..k)
            .map(|i| brute_distortion(&w.row(i).to_vec(), &s.row(i).to_vec(), &d.row(i).to_vec()))
            .sum::<f64>()
            / k as f64;
        assert!((distortion_loss(w.view(), s.view(), d.view()).unwrap() - brute).abs() < 1e-12);
        let g = distortion_grad(w.view(), s.view(), d.view()).unwrap();
        let mut v = w.as_slice().unwrap().to_vec();
        crate::nn::gradcheck::check(&mut v, g.as_slice().unwrap(), |v| {
            let w = Array2::from_shape_vec((k, n), v.to_vec()).unwrap();
            distortion_loss(w.view(), s.view(), d.view()).unwrap()
        }, 1e-6, 1e-6);
    }

    #[test]
    fn distortion_rejects_unsorted() {
        let w = array![[0.1, 0.2]];
        let s = array![[0.6, 0.4]];
        let d = array![[0.5, 0.5]];
        assert!(matches!(distortion_loss(w.view(), s.view(), d.view()), Err(Error::InvalidSamples(_))));
    }
}
