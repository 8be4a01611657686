//! The three cross-modal feature constructions: the 3D-to-2D feature map
//! (projected proposal semantics + per-point box geometry stacked on RGB-D),
//! point painting (2D class distributions appended to 3D points), and the
//! per-box feature rows consumed by the 3D refinement stage.

use crate::camera::height_feature;
use crate::cloud::PixelRef;
use crate::data::{LabelMap, IGNORE_LABEL};
use crate::geom3d::geometric_features;
use crate::nncore::Mat;
use crate::{Box3D, PointCloud, Proposal, Result, Vec3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A dense per-pixel class distribution (the 2D segmenter's output view
/// consumed by fusion). Pixel-major storage, `num_classes` floats per pixel.
#[derive(Clone, Debug)]
pub struct SegMap {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub data: Vec<f64>,
}

impl SegMap {
    pub fn uniform(width: usize, height: usize, num_classes: usize) -> SegMap {
        let p = 1.0 / num_classes as f64;
        SegMap { width, height, num_classes, data: vec![p; width * height * num_classes] }
    }

    pub fn zeros(width: usize, height: usize, num_classes: usize) -> SegMap {
        SegMap { width, height, num_classes, data: vec![0.0; width * height * num_classes] }
    }

    /// Oracle map from ground-truth labels: one-hot at class pixels, uniform
    /// at background and ignored pixels (no object evidence either way).
    pub fn from_labels(labels: &LabelMap) -> SegMap {
        let c = labels.num_classes as usize;
        let mut map = SegMap::uniform(labels.width, labels.height, c);
        for (pix, &lab) in labels.labels.iter().enumerate() {
            if lab != IGNORE_LABEL && (lab as usize) < c {
                for k in 0..c {
                    map.data[pix * c + k] = if k == lab as usize { 1.0 } else { 0.0 };
                }
            }
        }
        map
    }

    pub fn at(&self, u: usize, v: usize) -> &[f64] {
        let pix = v * self.width + u;
        &self.data[pix * self.num_classes..(pix + 1) * self.num_classes]
    }
}

/// RGB-D stacked with projected 3D features: channel-major planes in the
/// order [R, G, B, depth, semantic x C, geometric x 9]. `validity` marks
/// pixels that received any 3D feature; everything else keeps zeros there.
#[derive(Clone, Debug)]
pub struct FusionMap {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub data: Vec<f64>,
    pub validity: Vec<bool>,
}

impl FusionMap {
    pub fn channels(&self) -> usize {
        self.num_classes + 13
    }

    fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.width * self.height..(c + 1) * self.width * self.height]
    }

    pub fn at(&self, c: usize, u: usize, v: usize) -> f64 {
        self.plane(c)[v * self.width + u]
    }

    /// RGB-D only, all projected channels zero (also the "no proposals" and
    /// the 2D-only ablation input).
    pub fn rgbd_only(
        width: usize,
        height: usize,
        num_classes: usize,
        rgb: &[f32],
        depth: &[f32],
    ) -> FusionMap {
        assert_eq!(rgb.len(), width * height * 3);
        assert_eq!(depth.len(), width * height);
        let n = width * height;
        let mut data = vec![0.0; (num_classes + 13) * n];
        for pix in 0..n {
            for c in 0..3 {
                data[c * n + pix] = rgb[pix * 3 + c] as f64;
            }
            data[3 * n + pix] = depth[pix].max(0.0) as f64;
        }
        FusionMap { width, height, num_classes, data, validity: vec![false; n] }
    }
}

/// Projects proposal features into the image. Every cloud point inside some
/// proposal is assigned to the highest-objectness proposal containing it; up
/// to `n_per_box` assigned points per proposal (seeded subsample) then write
/// their proposal's class distribution and their own canonical-frame
/// geometric features at their source pixel. Raster collisions resolve by
/// higher objectness, then nearer depth, then lower point index.
#[allow(clippy::too_many_arguments)]
pub fn build_3d_to_2d_map(
    proposals: &[Proposal],
    cloud: &PointCloud,
    n_per_box: usize,
    rgb: &[f32],
    depth: &[f32],
    width: usize,
    height: usize,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> FusionMap {
    assert!(n_per_box >= 1);
    let mut map = FusionMap::rgbd_only(width, height, num_classes, rgb, depth);
    if proposals.is_empty() {
        return map;
    }
    for p in proposals {
        assert_eq!(p.class_probs.len(), num_classes, "proposal class width mismatch");
    }

    // Point -> proposal assignment.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); proposals.len()];
    for (i, pos) in cloud.positions.iter().enumerate() {
        if cloud.pixel[i].is_none() {
            continue;
        }
        let mut best: Option<usize> = None;
        for (j, prop) in proposals.iter().enumerate() {
            if prop.box3.contains(*pos) {
                let better = match best {
                    None => true,
                    Some(b) => proposals[j].objectness > proposals[b].objectness,
                };
                if better {
                    best = Some(j);
                }
            }
        }
        if let Some(j) = best {
            members[j].push(i);
        }
    }

    let n_pix = width * height;
    // (objectness, depth, point index) of the current writer per pixel.
    let mut writer: Vec<Option<(f64, f64, usize)>> = vec![None; n_pix];
    for (j, prop) in proposals.iter().enumerate() {
        let mut chosen = std::mem::take(&mut members[j]);
        if chosen.len() > n_per_box {
            for i in 0..n_per_box {
                let k = rng.gen_range(i..chosen.len());
                chosen.swap(i, k);
            }
            chosen.truncate(n_per_box);
        }
        for &i in &chosen {
            let PixelRef { u, v, depth: d } = cloud.pixel[i].expect("filtered above");
            let pix = v as usize * width + u as usize;
            let take = match writer[pix] {
                None => true,
                Some((obj, dep, idx)) => {
                    prop.objectness > obj
                        || (prop.objectness == obj && d < dep)
                        || (prop.objectness == obj && d == dep && i < idx)
                }
            };
            if !take {
                continue;
            }
            writer[pix] = Some((prop.objectness, d, i));
            let g = geometric_features(&prop.box3, cloud.positions[i]).as_array();
            for (k, &s) in prop.class_probs.iter().enumerate() {
                map.data[(4 + k) * n_pix + pix] = s;
            }
            for (k, &gv) in g.iter().enumerate() {
                map.data[(4 + num_classes + k) * n_pix + pix] = gv;
            }
            map.validity[pix] = true;
        }
    }
    map
}

/// A cloud with per-point features ready for the proposal network:
/// position, height above ground, and an appended per-class distribution
/// (zeros when no 2D source is available yet).
#[derive(Clone, Debug)]
pub struct PaintedCloud {
    pub positions: Vec<Vec3>,
    pub pixel: Vec<Option<PixelRef>>,
    pub height: Vec<f64>,
    pub num_classes: usize,
    /// n x C, row per point.
    pub sem: Vec<f64>,
    /// Points that projected outside the frame and got a uniform fill.
    pub uncorresponded: Vec<bool>,
}

impl PaintedCloud {
    /// XYZ + height + C.
    pub fn feature_width(&self) -> usize {
        4 + self.num_classes
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sem_row(&self, i: usize) -> &[f64] {
        &self.sem[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// No 2D input yet: the semantic block stays zero, matching the "2D
    /// dropped" convention used during fusion dropout.
    pub fn unpainted(cloud: &PointCloud, num_classes: usize) -> Result<PaintedCloud> {
        let height = height_feature(cloud)?;
        Ok(PaintedCloud {
            positions: cloud.positions.clone(),
            pixel: cloud.pixel.clone(),
            height,
            num_classes,
            sem: vec![0.0; cloud.len() * num_classes],
            uncorresponded: vec![false; cloud.len()],
        })
    }

    /// Replaces the semantic block with zeros (sample-level fusion dropout).
    pub fn drop_sem(&mut self) {
        self.sem.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Appends the 2D class distribution at each point's source pixel. Points
/// without a pixel correspondence get a uniform distribution and a flag.
pub fn paint(cloud: &PointCloud, segmap: &SegMap) -> Result<PaintedCloud> {
    let c = segmap.num_classes;
    let mut painted = PaintedCloud::unpainted(cloud, c)?;
    for i in 0..cloud.len() {
        match cloud.pixel[i] {
            Some(PixelRef { u, v, .. }) => {
                let row = segmap.at(u as usize, v as usize);
                painted.sem[i * c..(i + 1) * c].copy_from_slice(row);
            }
            None => {
                painted.sem[i * c..(i + 1) * c].fill(1.0 / c as f64);
                painted.uncorresponded[i] = true;
            }
        }
    }
    Ok(painted)
}

/// Per-box rows for the refinement network: canonical geometry in the
/// (already enlarged) box frame plus the 2D distribution at the point's
/// pixel. Boxes that contain no points yield one all-zero row and a flag;
/// callers that need rectangular batches can replicate it freely, since
/// duplicated rows do not change a pooled set function.
#[derive(Clone, Debug)]
pub struct RefineFeatures {
    /// n x (9 + C).
    pub rows: Mat,
    /// World positions of the sampled points, aligned with `rows`.
    pub points: Vec<Vec3>,
    pub degenerate: bool,
}

pub fn assemble_refine_features(
    bx: &Box3D,
    cloud: &PointCloud,
    segmap: &SegMap,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> RefineFeatures {
    assert!(n >= 1);
    let c = segmap.num_classes;
    let inside: Vec<usize> =
        (0..cloud.len()).filter(|&i| bx.contains(cloud.positions[i])).collect();
    if inside.is_empty() {
        return RefineFeatures { rows: Mat::zeros(1, 9 + c), points: Vec::new(), degenerate: true };
    }
    let chosen: Vec<usize> = if inside.len() >= n {
        let mut pool = inside.clone();
        for i in 0..n {
            let k = rng.gen_range(i..pool.len());
            pool.swap(i, k);
        }
        pool.truncate(n);
        pool
    } else {
        (0..n).map(|_| inside[rng.gen_range(0..inside.len())]).collect()
    };
    let mut rows = Mat::zeros(n, 9 + c);
    let mut points = Vec::with_capacity(n);
    for (r, &i) in chosen.iter().enumerate() {
        let p = cloud.positions[i];
        points.push(p);
        let g = geometric_features(bx, p).as_array();
        let row = rows.row_mut(r);
        row[..9].copy_from_slice(&g);
        match cloud.pixel[i] {
            Some(PixelRef { u, v, .. }) => {
                row[9..].copy_from_slice(segmap.at(u as usize, v as usize))
            }
            None => row[9..].fill(1.0 / c as f64),
        }
    }
    RefineFeatures { rows, points, degenerate: false }
}
