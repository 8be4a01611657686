//! Pinhole camera: projection, unprojection, depth-map lifting and the
//! ground-relative height feature.
//!
//! Camera frame convention: +x right, +y down, +z forward (depth). World
//! frame: +z up. Pixel coordinates are continuous; only the final raster
//! write anywhere in the crate uses `floor()` to select a cell, and depth
//! maps are unprojected at integer pixel coordinates so lift/project
//! round-trips land in the same cell.

use crate::cloud::{PixelRef, PointCloud};
use crate::scalar::Real;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::geom3d::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

/// Rigid world-to-camera transform: `p_cam = r * p_world + t`.
/// `r` is row-major orthonormal with determinant +1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose<T> {
    pub r: [[T; 3]; 3],
    pub t: [T; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection<T> {
    pub u: T,
    pub v: T,
    /// Camera-frame depth (z), always positive for a successful projection.
    pub depth: T,
    /// False when the continuous coordinates fall outside the image bounds;
    /// the coordinates are still returned.
    pub in_frame: bool,
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        let o = T::one();
        let z = T::zero();
        Pose { r: [[o, z, z], [z, o, z], [z, z, o]], t: [z, z, z] }
    }

    /// Camera at `eye` looking toward `target` with the given up hint.
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>) -> Self {
        let f = normalize(target.sub(eye));
        let right = normalize(cross(f, up));
        let down = cross(f, right);
        let r = [
            [right.x, right.y, right.z],
            [down.x, down.y, down.z],
            [f.x, f.y, f.z],
        ];
        let re = Vec3::new(
            -(right.x * eye.x + right.y * eye.y + right.z * eye.z),
            -(down.x * eye.x + down.y * eye.y + down.z * eye.z),
            -(f.x * eye.x + f.y * eye.y + f.z * eye.z),
        );
        Pose { r, t: [re.x, re.y, re.z] }
    }

    pub fn to_camera(&self, p: Vec3<T>) -> Vec3<T> {
        Vec3::new(
            self.r[0][0] * p.x + self.r[0][1] * p.y + self.r[0][2] * p.z + self.t[0],
            self.r[1][0] * p.x + self.r[1][1] * p.y + self.r[1][2] * p.z + self.t[1],
            self.r[2][0] * p.x + self.r[2][1] * p.y + self.r[2][2] * p.z + self.t[2],
        )
    }

    pub fn to_world(&self, p: Vec3<T>) -> Vec3<T> {
        let q = Vec3::new(p.x - self.t[0], p.y - self.t[1], p.z - self.t[2]);
        Vec3::new(
            self.r[0][0] * q.x + self.r[1][0] * q.y + self.r[2][0] * q.z,
            self.r[0][1] * q.x + self.r[1][1] * q.y + self.r[2][1] * q.z,
            self.r[0][2] * q.x + self.r[1][2] * q.y + self.r[2][2] * q.z,
        )
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Pose<T>) -> Pose<T> {
        let mut r = [[T::zero(); 3]; 3];
        let mut t = [T::zero(); 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    r[i][j] += self.r[i][k] * first.r[k][j];
                }
            }
            t[i] = self.t[i];
            for k in 0..3 {
                t[i] += self.r[i][k] * first.t[k];
            }
        }
        Pose { r, t }
    }

    /// Camera center expressed in world coordinates.
    pub fn camera_center(&self) -> Vec3<T> {
        self.to_world(Vec3::zero())
    }

    /// World-space direction of the ray through continuous pixel (u, v),
    /// scaled so that one unit of ray parameter equals one unit of depth.
    pub fn pixel_ray(&self, k: &Intrinsics<T>, u: T, v: T) -> Vec3<T> {
        let d_cam = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, T::one());
        Vec3::new(
            self.r[0][0] * d_cam.x + self.r[1][0] * d_cam.y + self.r[2][0] * d_cam.z,
            self.r[0][1] * d_cam.x + self.r[1][1] * d_cam.y + self.r[2][1] * d_cam.z,
            self.r[0][2] * d_cam.x + self.r[1][2] * d_cam.y + self.r[2][2] * d_cam.z,
        )
    }
}

fn cross<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    Vec3::new(a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x)
}

fn normalize<T: Real>(v: Vec3<T>) -> Vec3<T> {
    let n = v.norm();
    assert!(n > T::zero(), "cannot normalize a zero vector");
    v.scale(T::one() / n)
}

/// Projects a world point. Points at or behind the camera plane error out;
/// points outside the image are flagged but still returned.
pub fn project<T: Real>(k: &Intrinsics<T>, pose: &Pose<T>, p: Vec3<T>) -> Result<Projection<T>> {
    let c = pose.to_camera(p);
    if c.z <= T::zero() {
        return Err(Error::BehindCamera);
    }
    let u = k.fx * c.x / c.z + k.cx;
    let v = k.fy * c.y / c.z + k.cy;
    let in_frame = u >= T::zero()
        && v >= T::zero()
        && u < T::from_u32(k.width).unwrap()
        && v < T::from_u32(k.height).unwrap();
    Ok(Projection { u, v, depth: c.z, in_frame })
}

/// Lifts continuous pixel (u, v) at camera depth `depth` back to the world.
pub fn unproject<T: Real>(k: &Intrinsics<T>, pose: &Pose<T>, u: T, v: T, depth: T) -> Result<Vec3<T>> {
    if depth <= T::zero() {
        return Err(Error::NonPositiveDepth);
    }
    let cam = Vec3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
    Ok(pose.to_world(cam))
}

/// Lifts every valid pixel of a row-major depth plane (values <= 0 mean
/// absent) into a world-frame cloud, recording each point's source pixel.
pub fn depth_to_cloud(k: &crate::Intrinsics, pose: &crate::Pose, depth: &[f32]) -> PointCloud {
    let (w, h) = (k.width as usize, k.height as usize);
    assert_eq!(depth.len(), w * h, "depth plane size mismatch");
    let mut positions = Vec::new();
    let mut pixel = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let d = depth[v * w + u] as f64;
            if d <= 0.0 {
                continue;
            }
            let p = unproject(k, pose, u as f64, v as f64, d).expect("positive depth");
            positions.push(p);
            pixel.push(Some(PixelRef { u: u as u32, v: v as u32, depth: d }));
        }
    }
    PointCloud::new(positions, pixel)
}

/// Height of every point above the estimated ground plane. Ground is the
/// nearest-rank 1st percentile of the z values (rank = ceil(0.01 n)).
pub fn height_feature(cloud: &PointCloud) -> Result<Vec<f64>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut zs: Vec<f64> = cloud.positions.iter().map(|p| p.z).collect();
    zs.sort_by(|a, b| a.total_cmp(b));
    let n = zs.len();
    let rank = ((0.01 * n as f64).ceil() as usize).max(1);
    let ground = zs[rank - 1];
    Ok(cloud.positions.iter().map(|p| p.z - ground).collect())
}
