//! RGB-D 3D object detection built as a cascade of cross-modal stages:
//! a voting-based 3D proposal network, a 2D segmentation network fed with
//! projected 3D features, and a point-based 3D box refiner fed with the 2D
//! predictions. The cascade can be recursed, ensembling the refined boxes
//! from every pass. Everything runs on synthetic RGB-D scenes at desk scale
//! with deterministic, seedable numerics (f64 end to end in the networks).
//!
//! Module map:
//! - [`geom3d`]: oriented boxes, canonical transforms, rotated IoU, NMS
//! - [`camera`]: pinhole projection, unprojection, depth-to-cloud, height
//! - [`data`]: synthetic scene generation, 2D ground truth, augmentation, I/O
//! - [`fusion`]: 3D-to-2D feature maps, point painting, refine-stage features
//! - [`nncore`]: dense/conv layers with manual backprop, losses, AdamW
//! - [`proposer`]: point-set sampling/grouping, voting, proposal heads
//! - [`seg2d`]: dual-head segmentation trunk and loss
//! - [`refiner`]: per-box point network, residual heads, IoU scoring
//! - [`pipeline`]: cascade assembly, joint training loop, recursion
//! - [`eval`]: AP sweeps over rotated-IoU thresholds, segmentation mIoU

pub mod camera;
pub mod cloud;
pub mod data;
pub mod geom3d;
pub mod nncore;
pub mod scalar;
// modules still under construction in this pass:
pub mod cli;
pub mod eval;
pub mod fusion;
pub mod pipeline;
pub mod proposer;
pub mod refiner;
pub mod render;
pub mod seg2d;

/// Concrete double-precision aliases for the scalar-generic geometry core.
/// The rest of the pipeline (data, networks, training) works in f64.
pub type Vec3 = geom3d::Vec3<f64>;
pub type Box3D = geom3d::Box3D<f64>;
pub type GeomFeature = geom3d::GeomFeature<f64>;
pub type Intrinsics = camera::Intrinsics<f64>;
pub type Pose = camera::Pose<f64>;

pub use cloud::PointCloud;
pub use geom3d::{Detection, Proposal};

use std::path::PathBuf;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Invalid configuration (bad stage grammar, out-of-range values, bad flags).
    #[error("config error: {0}")]
    Config(String),
    /// Filesystem failure, tagged with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Structurally invalid data file (bad header, wrong plane sizes, bad base64).
    #[error("format error: {0}")]
    Format(String),
    /// Projection of a point at or behind the camera plane.
    #[error("point is behind the camera (z <= 0)")]
    BehindCamera,
    /// Unprojection with a non-positive depth.
    #[error("depth must be positive")]
    NonPositiveDepth,
    /// An operation that needs at least one point got none.
    #[error("point cloud is empty")]
    EmptyCloud,
    /// Box enlargement factors below 1 are not meaningful.
    #[error("enlargement factor must be >= 1, got {0}")]
    BadEnlargeFactor(f64),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 for configuration errors, 3 for I/O
    /// and malformed files.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format(_) => 3,
            _ => 2,
        }
    }
}

/// Splitmix64 step, used to derive independent sub-seeds from a master seed.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a deterministic sub-seed from a base seed and a list of tags
/// (scene index, epoch, stage id, ...). Same inputs always give the same
/// output, and distinct tag paths decorrelate.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = base ^ 0x6a09e667f3bcc909;
    let mut out = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0x9e3779b97f4a7c15);
        out ^= splitmix64(&mut state).rotate_left(17);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_deterministic_and_tag_sensitive() {
        let a = derive_seed(7, &[1, 2, 3]);
        let b = derive_seed(7, &[1, 2, 3]);
        let c = derive_seed(7, &[1, 2, 4]);
        let d = derive_seed(8, &[1, 2, 3]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn exit_codes_split_config_from_io() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        let io = Error::io("/nope", std::io::Error::new(std::io::ErrorKind::NotFound, "x"));
        assert_eq!(io.exit_code(), 3);
        assert_eq!(Error::Format("bad".into()).exit_code(), 3);
    }
}
