//! Point cloud with optional per-point image correspondences. The pixel a
//! point was lifted from is captured at unprojection time and kept through
//! 3D augmentation, so projection-based fusion stays valid even though the
//! image itself is never warped.

use crate::Vec3;

/// Source pixel of a point: integer raster cell plus the camera-frame depth
/// it was captured at (used to break fusion write conflicts).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelRef {
    pub u: u32,
    pub v: u32,
    pub depth: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    /// Same length as `positions`; `None` for points without a source pixel.
    pub pixel: Vec<Option<PixelRef>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>, pixel: Vec<Option<PixelRef>>) -> Self {
        assert_eq!(positions.len(), pixel.len());
        PointCloud { positions, pixel }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Sub-cloud at the given indices (correspondences carried along).
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            pixel: idx.iter().map(|&i| self.pixel[i]).collect(),
        }
    }
}
