//! Small fixed-size vector helpers for camera and scene geometry.

pub type Vec3 = [f64; 3];
pub type Mat4 = [[f64; 4]; 4];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Applies the rotation block of `m` to `v`.
#[inline]
pub fn rotate(m: &Mat4, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Applies the transpose of the rotation block of `m` to `v`.
#[inline]
pub fn rotate_inv(m: &Mat4, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

#[inline]
pub fn translation(m: &Mat4) -> Vec3 {
    [m[0][3], m[1][3], m[2][3]]
}

pub fn identity() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

/// Camera-to-world matrix for an OpenGL-style camera at `eye` looking at
/// `target` (camera looks along -z, y up).
pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Mat4 {
    let forward = normalize(sub(target, eye));
    let right = normalize(cross(forward, up));
    let true_up = cross(right, forward);
    let back = scale(forward, -1.0);
    [
        [right[0], true_up[0], back[0], eye[0]],
        [right[1], true_up[1], back[1], eye[1]],
        [right[2], true_up[2], back[2], eye[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// Axis-aligned bounding box in world units.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn extent(&self) -> Vec3 {
        sub(self.max, self.min)
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0].max(0.0) * e[1].max(0.0) * e[2].max(0.0)
    }

    pub fn center(&self) -> Vec3 {
        scale(add(self.min, self.max), 0.5)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            for (axis, v) in c.iter_mut().enumerate() {
                *v = if (i >> axis) & 1 == 0 { self.min[axis] } else { self.max[axis] };
            }
        }
        out
    }

    /// Grows the box to include `p`.
    pub fn include(&mut self, p: Vec3) {
        for i in 0..3 {
            self.min[i] = self.min[i].min(p[i]);
            self.max[i] = self.max[i].max(p[i]);
        }
    }

    pub fn empty() -> Self {
        Self { min: [f64::INFINITY; 3], max: [f64::NEG_INFINITY; 3] }
    }

    pub fn padded(&self, fraction: f64) -> Self {
        let e = self.extent();
        let pad = [e[0] * fraction, e[1] * fraction, e[2] * fraction];
        Self { min: sub(self.min, pad), max: add(self.max, pad) }
    }

    /// Slab intersection of a ray with the box; returns the entry and exit
    /// distances when the ray hits.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-12 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (a, b) = {
                let a = (self.min[i] - origin[i]) * inv;
                let b = (self.max[i] - origin[i]) * inv;
                if a < b { (a, b) } else { (b, a) }
            };
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t1 > t0.max(0.0)).then_some((t0.max(0.0), t1))
    }
}
