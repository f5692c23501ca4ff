//! Static background radiance field: a vector-matrix factorized voxel grid.
//!
//! Each of density and appearance is a sum over three plane/line pairs
//! (`XY` with `Z`, `XZ` with `Y`, `YZ` with `X`). A plane is bilinearly
//! interpolated, a line linearly, and the two are multiplied per component.
//! Density is the ReLU of the summed products. The appearance products are
//! projected by a basis matrix to a feature vector that a small MLP decodes,
//! together with an encoding of the view direction, into RGB.

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geom::{Aabb, Vec3};
use crate::nn::{gemm, Mlp, MlpTape, Module, Param};
use crate::real::sigmoid;
use crate::{Error, Real, Result};

/// Plane axes and the matching line axis of each factor pair.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
pub const LINE_AXIS: [usize; 3] = [2, 1, 0];

pub const DIRECTION_TOLERANCE: f64 = 1e-4;

/// Upper bound on factor rank; per-sample scratch lives on the stack.
pub const MAX_RANK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub density_rank: usize,
    pub appearance_rank: usize,
    pub feature_dim: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub view_frequencies: usize,
    pub init_resolution: usize,
    pub final_resolution: usize,
    pub init_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            density_rank: 8,
            appearance_rank: 24,
            feature_dim: 27,
            decoder_hidden: 128,
            decoder_layers: 2,
            view_frequencies: 2,
            init_resolution: 128,
            final_resolution: 640,
            init_scale: 0.1,
        }
    }
}

impl FieldConfig {
    pub fn decoder_input(&self) -> usize {
        self.feature_dim + 3 + 6 * self.view_frequencies
    }

    /// Per-axis resolution after each of `events` upsampling events: a
    /// geometric progression in voxel count from `init^3` to `final^3`.
    pub fn resolution_schedule(&self, events: usize) -> Vec<usize> {
        let (lo, hi) = ((self.init_resolution as f64).ln(), (self.final_resolution as f64).ln());
        (1..=events)
            .map(|k| {
                let voxels = (3.0 * (lo + (hi - lo) * k as f64 / events as f64)).exp();
                (voxels.cbrt().round() as usize).clamp(self.init_resolution, self.final_resolution)
            })
            .collect()
    }
}

/// One factorization (density or appearance): three planes and three lines.
#[derive(Clone, Debug)]
pub struct VmFactors<T> {
    pub rank: usize,
    /// Plane `m` has shape `[res[a], res[b], rank]` for `(a, b) = PLANE_AXES[m]`.
    pub planes: [Param<T>; 3],
    /// Line `m` has shape `[res[LINE_AXIS[m]], rank]`.
    pub lines: [Param<T>; 3],
}

impl<T: Real> VmFactors<T> {
    fn new(prefix: &str, rank: usize, res: [usize; 3], mut plane: impl FnMut() -> T, mut line: impl FnMut() -> T) -> Self {
        let planes = std::array::from_fn(|m| {
            let (a, b) = PLANE_AXES[m];
            let shape = vec![res[a], res[b], rank];
            let n = shape.iter().product();
            Param::new(format!("{prefix}.plane{m}"), shape, (0..n).map(|_| plane()).collect())
        });
        let lines = std::array::from_fn(|m| {
            let shape = vec![res[LINE_AXIS[m]], rank];
            let n = shape.iter().product();
            Param::new(format!("{prefix}.line{m}"), shape, (0..n).map(|_| line()).collect())
        });
        Self { rank, planes, lines }
    }

    /// Per-component plane and line values at a stencil.
    #[inline]
    fn gather(&self, st: &Stencil<T>, m: usize, p: &mut [T], l: &mut [T]) {
        let r = self.rank;
        p.iter_mut().for_each(|v| *v = T::zero());
        let plane = &self.planes[m].value;
        for c in 0..4 {
            let w = st.plane_w[m][c];
            let base = st.plane_idx[m][c] * r;
            for (pv, &x) in p.iter_mut().zip(&plane[base..base + r]) {
                *pv += w * x;
            }
        }
        let line = &self.lines[m].value;
        let (i0, i1) = (st.line_idx[m][0] * r, st.line_idx[m][1] * r);
        let (w0, w1) = (st.line_w[m][0], st.line_w[m][1]);
        for (k, lv) in l.iter_mut().enumerate() {
            *lv = w0 * line[i0 + k] + w1 * line[i1 + k];
        }
    }

    /// Scatters `dp` (per plane component) and `dl` (per line component).
    #[inline]
    fn scatter(&mut self, st: &Stencil<T>, m: usize, dp: &[T], dl: &[T]) {
        let r = self.rank;
        let plane = &mut self.planes[m].grad;
        for c in 0..4 {
            let w = st.plane_w[m][c];
            let base = st.plane_idx[m][c] * r;
            for (g, &d) in plane[base..base + r].iter_mut().zip(dp) {
                *g += w * d;
            }
        }
        let line = &mut self.lines[m].grad;
        for k in 0..2 {
            let w = st.line_w[m][k];
            let base = st.line_idx[m][k] * r;
            for (g, &d) in line[base..base + r].iter_mut().zip(dl) {
                *g += w * d;
            }
        }
    }

    fn resize(&mut self, old: [usize; 3], new: [usize; 3]) {
        let r = self.rank;
        for m in 0..3 {
            let (a, b) = PLANE_AXES[m];
            let src = &self.planes[m].value;
            let mut out = vec![T::zero(); new[a] * new[b] * r];
            for i in 0..new[a] {
                let (i0, i1, fi) = resample_coord(i, old[a], new[a]);
                for j in 0..new[b] {
                    let (j0, j1, fj) = resample_coord(j, old[b], new[b]);
                    let w = [
                        (T::one() - fi) * (T::one() - fj),
                        (T::one() - fi) * fj,
                        fi * (T::one() - fj),
                        fi * fj,
                    ];
                    let idx = [i0 * old[b] + j0, i0 * old[b] + j1, i1 * old[b] + j0, i1 * old[b] + j1];
                    let dst = &mut out[(i * new[b] + j) * r..(i * new[b] + j + 1) * r];
                    for c in 0..4 {
                        for (d, &s) in dst.iter_mut().zip(&src[idx[c] * r..idx[c] * r + r]) {
                            *d += w[c] * s;
                        }
                    }
                }
            }
            let name = self.planes[m].name.clone();
            self.planes[m] = Param::new(name, vec![new[a], new[b], r], out);

            let c = LINE_AXIS[m];
            let src = &self.lines[m].value;
            let mut out = vec![T::zero(); new[c] * r];
            for i in 0..new[c] {
                let (i0, i1, f) = resample_coord(i, old[c], new[c]);
                for k in 0..r {
                    out[i * r + k] = (T::one() - f) * src[i0 * r + k] + f * src[i1 * r + k];
                }
            }
            let name = self.lines[m].name.clone();
            self.lines[m] = Param::new(name, vec![new[c], r], out);
        }
    }

    /// Mean squared difference of adjacent entries, summed over tensors.
    fn tv(&self) -> f64 {
        let r = self.rank;
        let mut total = 0.0;
        for m in 0..3 {
            let p = &self.planes[m];
            let (na, nb) = (p.shape[0], p.shape[1]);
            let pairs = ((na - 1) * nb + na * (nb - 1)) * r;
            let mut acc = 0.0;
            for i in 0..na {
                for j in 0..nb {
                    let here = &p.value[(i * nb + j) * r..(i * nb + j + 1) * r];
                    if i + 1 < na {
                        let down = &p.value[((i + 1) * nb + j) * r..((i + 1) * nb + j + 1) * r];
                        acc += sq_diff(here, down);
                    }
                    if j + 1 < nb {
                        let right = &p.value[(i * nb + j + 1) * r..(i * nb + j + 2) * r];
                        acc += sq_diff(here, right);
                    }
                }
            }
            total += acc / pairs.max(1) as f64;
            let l = &self.lines[m];
            let n = l.shape[0];
            let acc: f64 = (0..n - 1)
                .map(|i| sq_diff(&l.value[i * r..(i + 1) * r], &l.value[(i + 1) * r..(i + 2) * r]))
                .sum();
            total += acc / ((n - 1) * r).max(1) as f64;
        }
        total
    }

    fn tv_backward(&mut self, weight: f64) {
        let r = self.rank;
        for m in 0..3 {
            let p = &mut self.planes[m];
            let (na, nb) = (p.shape[0], p.shape[1]);
            let pairs = ((na - 1) * nb + na * (nb - 1)) * r;
            let k = T::lit(2.0 * weight / pairs.max(1) as f64);
            for i in 0..na {
                for j in 0..nb {
                    for c in 0..r {
                        let here = (i * nb + j) * r + c;
                        if i + 1 < na {
                            let other = ((i + 1) * nb + j) * r + c;
                            let d = k * (p.value[here] - p.value[other]);
                            p.grad[here] += d;
                            p.grad[other] -= d;
                        }
                        if j + 1 < nb {
                            let other = (i * nb + j + 1) * r + c;
                            let d = k * (p.value[here] - p.value[other]);
                            p.grad[here] += d;
                            p.grad[other] -= d;
                        }
                    }
                }
            }
            let l = &mut self.lines[m];
            let n = l.shape[0];
            let k = T::lit(2.0 * weight / ((n - 1) * r).max(1) as f64);
            for i in 0..n - 1 {
                for c in 0..r {
                    let d = k * (l.value[i * r + c] - l.value[(i + 1) * r + c]);
                    l.grad[i * r + c] += d;
                    l.grad[(i + 1) * r + c] -= d;
                }
            }
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.planes.iter().chain(self.lines.iter()).for_each(|p| f(p));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.planes.iter_mut().chain(self.lines.iter_mut()).for_each(|p| f(p));
    }
}

#[inline]
fn sq_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y).f64().powi(2)).sum()
}

/// Source indices and fraction for align-corners linear resampling.
#[inline]
fn resample_coord<T: Real>(i: usize, old: usize, new: usize) -> (usize, usize, T) {
    if old == 1 || new == 1 {
        return (0, 0, T::zero());
    }
    let g = i as f64 * (old - 1) as f64 / (new - 1) as f64;
    let i0 = (g.floor() as usize).min(old - 2);
    (i0, i0 + 1, T::lit(g - i0 as f64))
}

/// Interpolation footprint of one point on all three plane/line pairs.
#[derive(Clone, Copy, Debug)]
pub struct Stencil<T> {
    pub plane_idx: [[usize; 4]; 3],
    pub plane_w: [[T; 4]; 3],
    pub line_idx: [[usize; 2]; 3],
    pub line_w: [[T; 2]; 3],
}

/// Saved activations from [`TensorVmField::decode`].
#[derive(Clone, Debug)]
pub struct DecodeTape<T> {
    pub appearance: Array2<T>,
    pub mlp: MlpTape<T>,
    pub rgb: Array2<T>,
}

#[derive(Clone, Debug)]
pub struct TensorVmField<T> {
    pub config: FieldConfig,
    pub bbox: Aabb,
    pub resolution: [usize; 3],
    pub density: VmFactors<T>,
    pub appearance: VmFactors<T>,
    /// `feature_dim x 3 * appearance_rank`
    pub basis: Param<T>,
    pub decoder: Mlp<T>,
}

impl<T: Real> TensorVmField<T> {
    /// Density lines start at zero so the field is empty (σ ≡ 0); density
    /// planes and the appearance factors are seeded normal with the
    /// configured scale, which keeps the line gradient alive at start.
    pub fn new(config: FieldConfig, bbox: Aabb, seed: u64) -> Result<Self> {
        let e = bbox.extent();
        if !(e.iter().all(|v| v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidBounds(format!("degenerate box {bbox:?}")));
        }
        let ranks_ok = (1..=MAX_RANK).contains(&config.density_rank) && (1..=MAX_RANK).contains(&config.appearance_rank);
        if !ranks_ok || config.init_resolution < 2 || config.final_resolution < config.init_resolution {
            return Err(Error::InvalidInput(format!("bad field config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_scale).expect("scale");
        let res = [config.init_resolution; 3];
        let density = VmFactors::new("density", config.density_rank, res, || T::lit(normal.sample(&mut rng)), T::zero);
        let appearance = {
            let mut app_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let mut draw = move || T::lit(normal.sample(&mut app_rng));
            let planes = std::array::from_fn(|m| {
                let (a, b) = PLANE_AXES[m];
                let n = res[a] * res[b] * config.appearance_rank;
                Param::new(format!("appearance.plane{m}"), vec![res[a], res[b], config.appearance_rank], (0..n).map(|_| draw()).collect())
            });
            let lines = std::array::from_fn(|m| {
                let n = res[LINE_AXIS[m]] * config.appearance_rank;
                Param::new(format!("appearance.line{m}"), vec![res[LINE_AXIS[m]], config.appearance_rank], (0..n).map(|_| draw()).collect())
            });
            VmFactors { rank: config.appearance_rank, planes, lines }
        };
        let basis = {
            let fan_in = 3 * config.appearance_rank;
            let bound = 1.0 / (fan_in as f64).sqrt();
            crate::nn::Param::uniform("basis", vec![config.feature_dim, fan_in], bound, &mut rng)
        };
        let mut sizes = vec![config.decoder_input()];
        sizes.extend(std::iter::repeat(config.decoder_hidden).take(config.decoder_layers));
        sizes.push(3);
        let decoder = Mlp::new("decoder", &sizes, &mut rng);
        Ok(Self { config, bbox, resolution: res, density, appearance, basis, decoder })
    }

    pub fn total_voxels(&self) -> usize {
        self.resolution.iter().product()
    }

    /// Interpolation stencil for a world point, or `None` outside the box.
    #[inline]
    pub fn stencil(&self, p: Vec3) -> Option<Stencil<T>> {
        if !self.bbox.contains(p) {
            return None;
        }
        let mut idx = [0usize; 3];
        let mut frac = [T::zero(); 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let g = ((p[a] - self.bbox.min[a]) / (self.bbox.max[a] - self.bbox.min[a]) * (n - 1) as f64)
                .clamp(0.0, (n - 1) as f64);
            let i0 = (g.floor() as usize).min(n - 2);
            idx[a] = i0;
            frac[a] = T::lit(g - i0 as f64);
        }
        let one = T::one();
        let mut st = Stencil {
            plane_idx: [[0; 4]; 3],
            plane_w: [[T::zero(); 4]; 3],
            line_idx: [[0; 2]; 3],
            line_w: [[T::zero(); 2]; 3],
        };
        for m in 0..3 {
            let (a, b) = PLANE_AXES[m];
            let nb = self.resolution[b];
            let (ia, ib) = (idx[a], idx[b]);
            let (fa, fb) = (frac[a], frac[b]);
            st.plane_idx[m] = [ia * nb + ib, ia * nb + ib + 1, (ia + 1) * nb + ib, (ia + 1) * nb + ib + 1];
            st.plane_w[m] = [(one - fa) * (one - fb), (one - fa) * fb, fa * (one - fb), fa * fb];
            let c = LINE_AXIS[m];
            st.line_idx[m] = [idx[c], idx[c] + 1];
            st.line_w[m] = [one - frac[c], frac[c]];
        }
        Some(st)
    }

    /// Stencil of the nearest point inside the box.
    #[inline]
    pub fn stencil_clamped(&self, p: Vec3) -> Stencil<T> {
        let q = std::array::from_fn(|a| p[a].clamp(self.bbox.min[a], self.bbox.max[a]));
        self.stencil(q).expect("clamped point inside box")
    }

    /// Pre-activation density at a stencil.
    #[inline]
    pub fn density_raw(&self, st: &Stencil<T>) -> T {
        let r = self.density.rank;
        let (mut p, mut l) = ([T::zero(); MAX_RANK], [T::zero(); MAX_RANK]);
        let mut total = T::zero();
        for m in 0..3 {
            self.density.gather(st, m, &mut p[..r], &mut l[..r]);
            for k in 0..r {
                total += p[k] * l[k];
            }
        }
        total
    }

    /// Accumulates `d_raw * d(raw density)/d(factors)`.
    #[inline]
    pub fn density_backward(&mut self, st: &Stencil<T>, d_raw: T) {
        let r = self.density.rank;
        let (mut p, mut l) = ([T::zero(); MAX_RANK], [T::zero(); MAX_RANK]);
        for m in 0..3 {
            self.density.gather(st, m, &mut p[..r], &mut l[..r]);
            for k in 0..r {
                let pk = p[k];
                p[k] = d_raw * l[k];
                l[k] = d_raw * pk;
            }
            self.density.scatter(st, m, &p[..r], &l[..r]);
        }
    }

    /// Writes the `3 * appearance_rank` component products into `out`.
    #[inline]
    pub fn appearance_vector(&self, st: &Stencil<T>, out: &mut [T]) {
        let r = self.appearance.rank;
        let mut l = [T::zero(); MAX_RANK];
        for m in 0..3 {
            let seg = &mut out[m * r..(m + 1) * r];
            self.appearance.gather(st, m, seg, &mut l[..r]);
            for (s, &lv) in seg.iter_mut().zip(&l[..r]) {
                *s *= lv;
            }
        }
    }

    #[inline]
    pub fn appearance_backward(&mut self, st: &Stencil<T>, d_vec: &[T]) {
        let r = self.appearance.rank;
        let (mut p, mut l) = ([T::zero(); MAX_RANK], [T::zero(); MAX_RANK]);
        for m in 0..3 {
            self.appearance.gather(st, m, &mut p[..r], &mut l[..r]);
            let d = &d_vec[m * r..(m + 1) * r];
            for k in 0..r {
                let pk = p[k];
                p[k] = d[k] * l[k];
                l[k] = d[k] * pk;
            }
            self.appearance.scatter(st, m, &p[..r], &l[..r]);
        }
    }

    /// Decoder input row: features, raw direction, then sin/cos of the
    /// direction at each frequency.
    fn direction_encoding(&self, d: Vec3, out: &mut [T]) {
        out[..3].iter_mut().zip(d).for_each(|(o, v)| *o = T::lit(v));
        let mut k = 3;
        for f in 0..self.config.view_frequencies {
            let scale = (1u64 << f) as f64;
            for v in d {
                out[k] = T::lit((v * scale).sin());
                k += 1;
            }
            for v in d {
                out[k] = T::lit((v * scale).cos());
                k += 1;
            }
        }
    }

    /// Decodes appearance vectors (`n x 3R`) seen along `dirs` into RGB.
    pub fn decode(&self, appearance: Array2<T>, dirs: &[Vec3]) -> DecodeTape<T> {
        let n = appearance.nrows();
        let fd = self.config.feature_dim;
        let mut input = Array2::zeros((n, self.config.decoder_input()));
        {
            let basis = ArrayView2::from_shape((fd, 3 * self.appearance.rank), &self.basis.value).expect("basis");
            let mut feat = input.slice_mut(s![.., ..fd]);
            gemm(T::one(), appearance.view(), basis.t(), T::zero(), &mut feat);
        }
        for (i, d) in dirs.iter().enumerate() {
            let mut row = input.row_mut(i);
            let row = row.as_slice_mut().expect("row");
            self.direction_encoding(*d, &mut row[fd..]);
        }
        let (mut rgb, mlp) = self.decoder.forward(input);
        rgb.mapv_inplace(sigmoid);
        DecodeTape { appearance, mlp, rgb }
    }

    /// Backpropagates `d_rgb` through the decoder and basis; returns the
    /// gradient with respect to the appearance vectors.
    pub fn decode_backward(&mut self, tape: &DecodeTape<T>, d_rgb: &Array2<T>) -> Array2<T> {
        let mut d_out = d_rgb.clone();
        d_out.zip_mut_with(&tape.rgb, |g, &c| *g *= c * (T::one() - c));
        let d_in = self.decoder.backward(&tape.mlp, d_out, true).expect("decoder input grad");
        let fd = self.config.feature_dim;
        let d_feat = d_in.slice(s![.., ..fd]);
        let cols = 3 * self.appearance.rank;
        {
            let mut gb = ndarray::ArrayViewMut2::from_shape((fd, cols), &mut self.basis.grad[..]).expect("basis grad");
            gemm(T::one(), d_feat.t(), tape.appearance.view(), T::one(), &mut gb);
        }
        let basis = ArrayView2::from_shape((fd, cols), &self.basis.value).expect("basis");
        let mut d_app = Array2::zeros((d_in.nrows(), cols));
        gemm(T::one(), d_feat, basis, T::zero(), &mut d_app.view_mut());
        d_app
    }

    /// Density and color at world points seen along unit directions.
    /// Points outside the box have zero density.
    pub fn query(&self, points: &[Vec3], viewdirs: &[Vec3]) -> Result<(Vec<T>, Array2<T>)> {
        if points.len() != viewdirs.len() {
            return Err(Error::InvalidInput("points and viewdirs differ in length".into()));
        }
        for (index, d) in viewdirs.iter().enumerate() {
            let norm = crate::geom::norm(*d);
            if (norm - 1.0).abs() > DIRECTION_TOLERANCE {
                return Err(Error::InvalidDirection { index, norm });
            }
        }
        if let Some(p) = points.iter().find(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput(format!("non-finite point {p:?}")));
        }
        let cols = 3 * self.appearance.rank;
        let mut sigma = Vec::with_capacity(points.len());
        let mut app = Array2::zeros((points.len(), cols));
        for (i, p) in points.iter().enumerate() {
            match self.stencil(*p) {
                Some(st) => {
                    sigma.push(self.density_raw(&st).max(T::zero()));
                    self.appearance_vector(&st, app.row_mut(i).as_slice_mut().expect("row"));
                }
                None => {
                    sigma.push(T::zero());
                    // clamp so the color stays defined outside the box
                    let st = self.stencil_clamped(*p);
                    self.appearance_vector(&st, app.row_mut(i).as_slice_mut().expect("row"));
                }
            }
        }
        let tape = self.decode(app, viewdirs);
        Ok((sigma, tape.rgb))
    }

    /// Resamples all factors to `new_res` per axis.
    pub fn resize(&mut self, new_res: [usize; 3]) {
        let old = self.resolution;
        if old == new_res {
            return;
        }
        self.density.resize(old, new_res);
        self.appearance.resize(old, new_res);
        self.resolution = new_res;
    }

    /// Applies the upsampling event scheduled at `step`, if any. Returns
    /// whether the grid changed.
    pub fn upsample(&mut self, step: usize, schedule: &[usize]) -> bool {
        let Some(k) = schedule.iter().position(|&s| s == step) else {
            return false;
        };
        let n = self.config.resolution_schedule(schedule.len())[k];
        let before = self.resolution;
        self.resize([n; 3]);
        before != self.resolution
    }

    /// `(density, appearance)` total-variation terms.
    pub fn tv_loss(&self) -> (f64, f64) {
        (self.density.tv(), self.appearance.tv())
    }

    pub fn tv_backward(&mut self, density_weight: f64, appearance_weight: f64) {
        if density_weight != 0.0 {
            self.density.tv_backward(density_weight);
        }
        if appearance_weight != 0.0 {
            self.appearance.tv_backward(appearance_weight);
        }
    }

    pub fn grids(&mut self) -> FieldGrids<'_, T> {
        FieldGrids(self)
    }

    pub fn networks(&mut self) -> FieldNetworks<'_, T> {
        FieldNetworks(self)
    }
}

impl<T: Real> Module<T> for TensorVmField<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.density.visit(f);
        self.appearance.visit(f);
        f(&self.basis);
        self.decoder.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.density.visit_mut(f);
        self.appearance.visit_mut(f);
        f(&mut self.basis);
        self.decoder.visit_params_mut(f);
    }
}

/// The voxel factors only (the high learning-rate group).
pub struct FieldGrids<'a, T>(pub &'a mut TensorVmField<T>);

/// Basis matrix and decoder (the low learning-rate group).
pub struct FieldNetworks<'a, T>(pub &'a mut TensorVmField<T>);

impl<T: Real> Module<T> for FieldGrids<'_, T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.0.density.visit(f);
        self.0.appearance.visit(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.0.density.visit_mut(f);
        self.0.appearance.visit_mut(f);
    }
}

impl<T: Real> Module<T> for FieldNetworks<'_, T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.0.basis);
        self.0.decoder.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.0.basis);
        self.0.decoder.visit_params_mut(f);
    }
}
