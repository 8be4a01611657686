//! Oriented 3D boxes and the geometry used everywhere else: canonical-frame
//! transforms, containment, per-point geometric features (with the analytic
//! Jacobian needed to backpropagate through them), rotated IoU and NMS.
//!
//! Conventions: the world up axis is +z. A box stores its center, extents
//! `l`/`h`/`w` measured along its canonical x/z/y axes, and a yaw angle
//! around +z normalized to [-pi, pi). The canonical frame of a box maps a
//! world point p to `R(-yaw) * (p - center)`.

mod iou;

pub use iou::{bev_corners, bev_iou, convex_clip, iou3d, nms3d, polygon_area};

use crate::scalar::Real;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Vec3 { x, y, z }
    }

    pub fn zero() -> Self {
        Vec3 { x: T::zero(), y: T::zero(), z: T::zero() }
    }

    pub fn add(self, o: Self) -> Self {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Self) -> Self {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: T) -> Self {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Self) -> T {
        self.sub(o).norm()
    }

    pub fn dist_sq(self, o: Self) -> T {
        let d = self.sub(o);
        d.dot(d)
    }

    /// Rotation by `angle` around +z (counter-clockwise seen from above).
    pub fn rot_z(self, angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        Vec3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }
}

/// Wraps an angle to [-pi, pi). Values already in range pass through
/// untouched (bitwise), which keeps serialized boxes stable.
pub fn wrap_angle<T: Real>(a: T) -> T {
    let pi = T::c(std::f64::consts::PI);
    if -pi <= a && a < pi {
        return a;
    }
    let two_pi = pi + pi;
    let mut r = (a + pi) % two_pi;
    if r < T::zero() {
        r += two_pi;
    }
    r - pi
}

/// Oriented box: center, extents l/h/w along canonical x/z/y, yaw about +z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D<T> {
    pub center: Vec3<T>,
    pub l: T,
    pub h: T,
    pub w: T,
    pub yaw: T,
}

impl<T: Real> Box3D<T> {
    /// Builds a box, normalizing yaw to [-pi, pi). Extents must be positive.
    pub fn new(center: Vec3<T>, l: T, h: T, w: T, yaw: T) -> Self {
        assert!(
            l > T::zero() && h > T::zero() && w > T::zero(),
            "box extents must be positive"
        );
        Box3D { center, l, h, w, yaw: wrap_angle(yaw) }
    }

    pub fn from_params(p: [T; 7]) -> Self {
        Box3D::new(Vec3::new(p[0], p[1], p[2]), p[3], p[4], p[5], p[6])
    }

    pub fn params(&self) -> [T; 7] {
        [self.center.x, self.center.y, self.center.z, self.l, self.h, self.w, self.yaw]
    }

    pub fn volume(&self) -> T {
        self.l * self.h * self.w
    }

    /// World point into this box's canonical frame: R(-yaw) * (p - center).
    pub fn to_canonical(&self, p: Vec3<T>) -> Vec3<T> {
        p.sub(self.center).rot_z(-self.yaw)
    }

    /// Inverse of [`Box3D::to_canonical`].
    pub fn from_canonical(&self, q: Vec3<T>) -> Vec3<T> {
        q.rot_z(self.yaw).add(self.center)
    }

    /// Boundary-inclusive containment test in the canonical frame.
    pub fn contains(&self, p: Vec3<T>) -> bool {
        self.contains_eps(p, T::zero())
    }

    /// Containment with a slack margin (used when points sit exactly on
    /// rendered faces and round-trip through the camera with rounding).
    pub fn contains_eps(&self, p: Vec3<T>, eps: T) -> bool {
        let half = T::c(0.5);
        let q = self.to_canonical(p);
        q.x.abs() <= self.l * half + eps
            && q.y.abs() <= self.w * half + eps
            && q.z.abs() <= self.h * half + eps
    }

    /// Same pose, extents scaled by `factor` (>= 1).
    pub fn enlarge(&self, factor: T) -> crate::Result<Self> {
        if factor < T::one() {
            return Err(crate::Error::BadEnlargeFactor(
                factor.to_f64().unwrap_or(f64::NAN),
            ));
        }
        Ok(Box3D { center: self.center, l: self.l * factor, h: self.h * factor, w: self.w * factor, yaw: self.yaw })
    }

    /// The eight corners, canonical sign order (+++, -++, --+, +-+, ++-, ...).
    pub fn corners(&self) -> [Vec3<T>; 8] {
        let half = T::c(0.5);
        let (hl, hw, hh) = (self.l * half, self.w * half, self.h * half);
        let mut out = [Vec3::zero(); 8];
        let signs = [
            (T::one(), T::one()),
            (-T::one(), T::one()),
            (-T::one(), -T::one()),
            (T::one(), -T::one()),
        ];
        for (i, &(sx, sy)) in signs.iter().enumerate() {
            for (j, sz) in [T::one(), -T::one()].into_iter().enumerate() {
                out[i + 4 * j] = self.from_canonical(Vec3::new(sx * hl, sy * hw, sz * hh));
            }
        }
        out
    }
}

/// Per-point geometric feature: canonical coordinates plus the six signed
/// face offsets, ordered (+x, -x, +y, -y, +z, -z). Offsets on opposite faces
/// sum to the extent along that axis; the pair is computed complement-first
/// so the sum is exact in floating point for points up to ~1.5 extents out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeomFeature<T> {
    pub canonical: Vec3<T>,
    pub face_offsets: [T; 6],
}

impl<T: Real> GeomFeature<T> {
    pub fn as_array(&self) -> [T; 9] {
        let c = self.canonical;
        let o = self.face_offsets;
        [c.x, c.y, c.z, o[0], o[1], o[2], o[3], o[4], o[5]]
    }
}

/// Offset pair (+face, -face) for one axis: extent/2 -/+ coordinate. The
/// larger of the two is computed directly and the other as `extent - larger`,
/// which by Sterbenz's lemma keeps `o+ + o- == extent` exact while the point
/// stays within moderately enlarged bounds.
fn offset_pair<T: Real>(extent: T, coord: T) -> (T, T) {
    let half = T::c(0.5);
    if coord >= T::zero() {
        let neg = extent * half + coord;
        (extent - neg, neg)
    } else {
        let pos = extent * half - coord;
        (pos, extent - pos)
    }
}

/// Geometric feature of `p` with respect to `b` (canonical coords + signed
/// face offsets). Positive offsets mean the point is inside that face.
pub fn geometric_features<T: Real>(b: &Box3D<T>, p: Vec3<T>) -> GeomFeature<T> {
    let q = b.to_canonical(p);
    let (px, nx) = offset_pair(b.l, q.x);
    let (py, ny) = offset_pair(b.w, q.y);
    let (pz, nz) = offset_pair(b.h, q.z);
    GeomFeature { canonical: q, face_offsets: [px, nx, py, ny, pz, nz] }
}

/// Jacobian of the 9-dim geometric feature with respect to the box
/// parameters (cx, cy, cz, l, h, w, yaw), rows in feature order. Used to
/// backpropagate refinement losses through the sampled point features into
/// the proposal parameters.
pub fn feature_jacobian(b: &Box3D<f64>, p: Vec3<f64>) -> [[f64; 7]; 9] {
    let (s, c) = b.yaw.sin_cos();
    let q = b.to_canonical(p);
    let mut j = [[0.0; 7]; 9];
    // canonical coords: q = R(-yaw) (p - center)
    j[0] = [-c, -s, 0.0, 0.0, 0.0, 0.0, q.y];
    j[1] = [s, -c, 0.0, 0.0, 0.0, 0.0, -q.x];
    j[2] = [0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0];
    // offsets: extent/2 -/+ canonical coordinate
    let axes = [(0usize, 3usize), (1, 5), (2, 4)]; // (canonical row, extent column): l->x, w->y, h->z
    for (a, &(crow, ecol)) in axes.iter().enumerate() {
        let plus = 3 + 2 * a;
        for k in 0..7 {
            j[plus][k] = -j[crow][k];
            j[plus + 1][k] = j[crow][k];
        }
        j[plus][ecol] = 0.5;
        j[plus + 1][ecol] = 0.5;
    }
    j
}

/// A first-stage box hypothesis with its scores.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub box3: Box3D<f64>,
    pub objectness: f64,
    /// Distribution over the object classes (sums to 1).
    pub class_probs: Vec<f64>,
    /// Filled by the refinement stage.
    pub pred_iou: Option<f64>,
}

impl Proposal {
    pub fn new(box3: Box3D<f64>, objectness: f64, class_probs: Vec<f64>) -> Self {
        debug_assert!((0.0..=1.0).contains(&objectness));
        debug_assert!((class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        Proposal { box3, objectness, class_probs, pred_iou: None }
    }
}

/// Final scored detection.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub box3: Box3D<f64>,
    pub class: u32,
    pub score: f64,
}
