//! Camera intrinsics and per-frame camera-to-world poses (`poses.json`).
//!
//! Convention is OpenGL: right-handed, camera looks along -z with +y up.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geom::{self, Mat4, Vec3};
use crate::{Error, Result};

pub const ROTATION_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraTrajectory {
    pub intrinsics: Intrinsics,
    pub poses: Vec<Mat4>,
}

#[derive(Serialize, Deserialize)]
struct PosesFile {
    intrinsics: Intrinsics,
    convention: String,
    frames: Vec<FrameEntry>,
}

#[derive(Serialize, Deserialize)]
struct FrameEntry {
    index: usize,
    c2w: Mat4,
}

impl CameraTrajectory {
    pub fn new(intrinsics: Intrinsics, poses: Vec<Mat4>) -> Result<Self> {
        let traj = Self { intrinsics, poses };
        traj.validate()?;
        Ok(traj)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn center(&self, t: usize) -> Vec3 {
        geom::translation(&self.poses[t])
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0 && k.width > 0 && k.height > 0) {
            return Err(Error::InvalidInput(format!("bad intrinsics {k:?}")));
        }
        for (frame, pose) in self.poses.iter().enumerate() {
            validate_pose(pose).map_err(|reason| Error::InvalidPose { frame, reason })?;
        }
        Ok(())
    }

    /// Projects a world point into frame `t`; returns pixel coordinates in
    /// the index convention (pixel `x` has its center at `x`) and the
    /// camera-space depth along -z.
    pub fn project(&self, t: usize, p: Vec3) -> Option<([f64; 2], f64)> {
        let pose = &self.poses[t];
        let c = geom::rotate_inv(pose, geom::sub(p, geom::translation(pose)));
        let depth = -c[2];
        if depth <= 1e-9 {
            return None;
        }
        let k = &self.intrinsics;
        let x = k.fx * c[0] / depth + k.cx - 0.5;
        let y = -k.fy * c[1] / depth + k.cy - 0.5;
        Some(([x, y], depth))
    }

    /// Unit world-space direction of the ray through the center of pixel
    /// `(x, y)` in frame `t`.
    pub fn pixel_direction(&self, t: usize, x: f64, y: f64) -> Vec3 {
        let k = &self.intrinsics;
        let d = geom::normalize([(x + 0.5 - k.cx) / k.fx, -(y + 0.5 - k.cy) / k.fy, -1.0]);
        geom::rotate(&self.poses[t], d)
    }
}

fn validate_pose(m: &Mat4) -> std::result::Result<(), String> {
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err("non-finite entry".into());
    }
    if m[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(format!("last row must be (0,0,0,1), got {:?}", m[3]));
    }
    for i in 0..3 {
        for j in 0..3 {
            let d: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (d - want).abs() > ROTATION_TOLERANCE {
                return Err(format!("rotation not orthonormal (R R^T[{i}][{j}] = {d})"));
            }
        }
    }
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(format!("rotation determinant {det}"));
    }
    Ok(())
}

pub fn cameras_to_json(traj: &CameraTrajectory) -> Result<String> {
    let file = PosesFile {
        intrinsics: traj.intrinsics,
        convention: "opengl".into(),
        frames: traj
            .poses
            .iter()
            .enumerate()
            .map(|(index, c2w)| FrameEntry { index, c2w: *c2w })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn cameras_from_json(text: &str) -> Result<CameraTrajectory> {
    let mut file: PosesFile = serde_json::from_str(text)?;
    if file.convention != "opengl" {
        return Err(Error::UnsupportedFormat(format!(
            "camera convention {:?}",
            file.convention
        )));
    }
    file.frames.sort_by_key(|f| f.index);
    if file.frames.iter().enumerate().any(|(i, f)| f.index != i) {
        return Err(Error::InconsistentDataset("pose indices are not 0..T".into()));
    }
    CameraTrajectory::new(file.intrinsics, file.frames.into_iter().map(|f| f.c2w).collect())
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<CameraTrajectory> {
    cameras_from_json(&fs::read_to_string(path)?)
}

pub fn save_cameras(path: impl AsRef<Path>, traj: &CameraTrajectory) -> Result<()> {
    fs::write(path, cameras_to_json(traj)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> Intrinsics {
        Intrinsics { fx: 100.0, fy: 100.0, cx: 32.0, cy: 32.0, width: 64, height: 64 }
    }

    #[test]
    fn identity_pose_loads() {
        let t = CameraTrajectory::new(intr(), vec![geom::identity()]).unwrap();
        let back = cameras_from_json(&cameras_to_json(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.len(), 1);
    }

    #[test]
    fn scaled_rotation_rejected() {
        let mut m = geom::identity();
        for row in m.iter_mut().take(3) {
            for v in row.iter_mut().take(3) {
                *v *= 1.1;
            }
        }
        let err = CameraTrajectory::new(intr(), vec![geom::identity(), m]).unwrap_err();
        assert!(matches!(err, Error::InvalidPose { frame: 1, .. }));
    }

    #[test]
    fn reflection_rejected() {
        let mut m = geom::identity();
        m[0][0] = -1.0;
        assert!(matches!(
            CameraTrajectory::new(intr(), vec![m]),
            Err(Error::InvalidPose { .. })
        ));
    }

    #[test]
    fn projection_inverts_pixel_direction() {
        let pose = geom::look_at([0.3, 1.0, 2.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]);
        let t = CameraTrajectory::new(intr(), vec![pose]).unwrap();
        let d = t.pixel_direction(0, 10.0, 50.0);
        let p = geom::add(t.center(0), geom::scale(d, 3.7));
        let (px, _) = t.project(0, p).unwrap();
        assert!((px[0] - 10.0).abs() < 1e-9 && (px[1] - 50.0).abs() < 1e-9);
    }
}
