//! Synthetic RGB-D scenes: generation, 2D label maps derived from 3D boxes,
//! point sampling, and train-time augmentation.

use crate::camera::{depth_to_cloud, unproject};
use crate::geom3d::{iou3d, wrap_angle};
use crate::{Box3D, Error, Intrinsics, PointCloud, Pose, Result, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{FRAC_PI_2, PI};

pub mod io;
mod synth;

pub use synth::synth_scene;

/// Label value for pixels excluded from 2D supervision and metrics.
pub const IGNORE_LABEL: u32 = u32::MAX;

/// Per-pixel labels: `0..C-1` object classes, `C` background, [`IGNORE_LABEL`]
/// for pixels without depth or inside multiple boxes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub num_classes: u32,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn background(&self) -> u32 {
        self.num_classes
    }

    pub fn at(&self, u: usize, v: usize) -> u32 {
        self.labels[v * self.width + u]
    }
}

/// An annotated ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub box3: Box3D,
    pub class: u32,
}

/// One RGB-D frame with ground truth, plus the cloud and label map derived
/// from it at construction time. Depth values <= 0 mean "absent".
#[derive(Clone, Debug)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub num_classes: u32,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub boxes: Vec<GtBox>,
    pub cloud: PointCloud,
    pub seg_gt: LabelMap,
}

impl Scene {
    /// Builds a scene from raw planes and derives the cloud and label map.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        width: usize,
        height: usize,
        num_classes: u32,
        rgb: Vec<f32>,
        depth: Vec<f32>,
        intrinsics: Intrinsics,
        pose: Pose,
        boxes: Vec<GtBox>,
    ) -> Scene {
        assert_eq!(rgb.len(), width * height * 3);
        assert_eq!(depth.len(), width * height);
        let boxes: Vec<GtBox> =
            boxes.into_iter().map(|g| GtBox { box3: canonical_gt_box(&g.box3), ..g }).collect();
        let cloud = depth_to_cloud(&intrinsics, &pose, &depth);
        let seg_gt = gen_labels(width, height, num_classes, &depth, &intrinsics, &pose, &boxes);
        Scene { width, height, num_classes, rgb, depth, intrinsics, pose, boxes, cloud, seg_gt }
    }
}

/// Generation parameters for synthetic scenes.
#[derive(Clone, Debug)]
pub struct DataConfig {
    pub num_classes: u32,
    pub width: u32,
    pub height: u32,
    pub min_boxes: u32,
    pub max_boxes: u32,
    /// Fraction of rendered pixels whose depth is knocked out.
    pub depth_dropout: f64,
    /// Gaussian sigma added to each RGB channel.
    pub rgb_noise: f64,
    /// Placement attempts per box before giving up on it.
    pub place_tries: u32,
    /// Sensor range: hits beyond this distance report no depth, which keeps
    /// near-horizon ground rays from producing points hundreds of meters out.
    pub max_depth: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 3,
            width: 128,
            height: 96,
            min_boxes: 2,
            max_boxes: 6,
            depth_dropout: 0.05,
            rgb_noise: 0.08,
            place_tries: 40,
            max_depth: 10.0,
        }
    }
}

impl DataConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: 110.0 * self.width as f64 / 128.0,
            fy: 110.0 * self.width as f64 / 128.0,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::look_at(Vec3::new(0.0, 0.0, 1.4), Vec3::new(0.0, 3.0, 0.4), Vec3::new(0.0, 0.0, 1.0))
    }
}

/// Normalizes a ground-truth box to the symmetry gauge used for heading
/// regression: the long side along the local x axis (l >= w) and yaw in
/// [-pi/2, pi/2). A 90-degree yaw shift with swapped l/w is the same box.
pub fn canonical_gt_box(b: &Box3D) -> Box3D {
    let (mut l, mut w, mut yaw) = (b.l, b.w, b.yaw);
    if l < w {
        std::mem::swap(&mut l, &mut w);
        yaw += FRAC_PI_2;
    }
    if !(-FRAC_PI_2..FRAC_PI_2).contains(&yaw) {
        yaw = wrap_angle(yaw);
        while yaw >= FRAC_PI_2 {
            yaw -= PI;
        }
        while yaw < -FRAC_PI_2 {
            yaw += PI;
        }
    }
    Box3D::new(b.center, l, b.h, w, yaw)
}

/// Labels every pixel by unprojecting its depth: absent depth -> IGNORE,
/// inside exactly one box -> that class, several boxes -> IGNORE, none ->
/// background.
pub fn gen_2d_gt(scene: &Scene) -> LabelMap {
    gen_labels(
        scene.width,
        scene.height,
        scene.num_classes,
        &scene.depth,
        &scene.intrinsics,
        &scene.pose,
        &scene.boxes,
    )
}

fn gen_labels(
    width: usize,
    height: usize,
    num_classes: u32,
    depth: &[f32],
    k: &Intrinsics,
    pose: &Pose,
    boxes: &[GtBox],
) -> LabelMap {
    let mut labels = vec![IGNORE_LABEL; width * height];
    for v in 0..height {
        for u in 0..width {
            let d = depth[v * width + u] as f64;
            if d <= 0.0 {
                continue;
            }
            let p = unproject(k, pose, u as f64, v as f64, d).expect("positive depth");
            let mut hit: Option<u32> = None;
            let mut count = 0;
            for g in boxes {
                if g.box3.contains(p) {
                    count += 1;
                    hit = Some(g.class);
                }
            }
            labels[v * width + u] = match count {
                0 => num_classes,
                1 => hit.unwrap(),
                _ => IGNORE_LABEL,
            };
        }
    }
    LabelMap { width, height, num_classes, labels }
}

/// Uniform point sample: without replacement when the cloud is large enough,
/// with replacement otherwise. Pixel correspondences ride along.
pub fn sample_points(cloud: &PointCloud, n: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let m = cloud.len();
    let idx: Vec<usize> = if m >= n {
        let mut pool: Vec<usize> = (0..m).collect();
        for i in 0..n {
            let j = rng.gen_range(i..m);
            pool.swap(i, j);
        }
        pool.truncate(n);
        pool
    } else {
        (0..n).map(|_| rng.gen_range(0..m)).collect()
    };
    Ok(cloud.select(&idx))
}

/// One draw of the train-time augmentation: a mirror across the camera's
/// vertical plane, a rotation about the camera's vertical axis, a uniform
/// scale about the camera center, and photometric jitter.
#[derive(Clone, Copy, Debug)]
pub struct AugmentParams {
    pub flip: bool,
    pub rot: f64,
    pub scale: f64,
    pub contrast: f64,
    pub brightness: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { flip: false, rot: 0.0, scale: 1.0, contrast: 1.0, brightness: 0.0 }
    }

    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        AugmentParams {
            flip: rng.gen_bool(0.5),
            rot: rng.gen_range(-PI / 6.0..PI / 6.0),
            scale: rng.gen_range(0.85..1.15),
            contrast: rng.gen_range(0.9..1.1),
            brightness: rng.gen_range(-0.1..0.1),
        }
    }
}

/// Applies a fresh augmentation draw seeded by `seed`.
pub fn augment(scene: &Scene, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    augment_with(scene, &AugmentParams::draw(&mut rng))
}

/// Applies fixed augmentation parameters. Points and boxes get the same 3D
/// map, so point-in-box memberships and pairwise box IoUs are preserved; the
/// image itself is only jittered photometrically, and the pixel
/// correspondences captured at construction stay attached to the points.
pub fn augment_with(scene: &Scene, p: &AugmentParams) -> Scene {
    let mut out = scene.clone();
    let eye = scene.pose.camera_center();
    // Camera right axis in world coordinates (first row of the rotation).
    let right = Vec3::new(scene.pose.r[0][0], scene.pose.r[0][1], scene.pose.r[0][2]);
    let eye_xy = Vec3::new(eye.x, eye.y, 0.0);

    // Each op is skipped at its identity value so an identity draw is a
    // bitwise no-op.
    let map_point = |q: Vec3| -> Vec3 {
        let mut q = q;
        if p.flip {
            let d = q.sub(eye).dot(right);
            q = q.sub(right.scale(2.0 * d));
        }
        if p.rot != 0.0 {
            q = q.sub(eye_xy).rot_z(p.rot).add(eye_xy);
        }
        if p.scale != 1.0 {
            q = eye.add(q.sub(eye).scale(p.scale));
        }
        q
    };

    for pos in &mut out.cloud.positions {
        *pos = map_point(*pos);
    }
    for g in &mut out.boxes {
        let b = g.box3;
        let mut yaw = b.yaw;
        if p.flip {
            let dir = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
            let d = dir.dot(right);
            let m = dir.sub(right.scale(2.0 * d));
            yaw = m.y.atan2(m.x);
        }
        yaw += p.rot;
        let nb = Box3D::new(
            map_point(b.center),
            b.l * p.scale,
            b.h * p.scale,
            b.w * p.scale,
            wrap_angle(yaw),
        );
        g.box3 = canonical_gt_box(&nb);
    }
    for c in &mut out.rgb {
        *c = ((*c as f64 * p.contrast + p.brightness).clamp(0.0, 1.0)) as f32;
    }
    out
}

/// GT-box IoU matrix helper used by tests and evaluation.
pub fn pairwise_iou(boxes: &[GtBox]) -> Vec<Vec<f64>> {
    boxes
        .iter()
        .map(|a| boxes.iter().map(|b| iou3d(&a.box3, &b.box3)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::project;
    use crate::geom3d::bev_iou;

    fn tiny_scene(boxes: Vec<GtBox>, drop_pixel: Option<(usize, usize)>) -> Scene {
        // 4x4 image, identity pose, every pixel at depth 2.
        let k = Intrinsics { fx: 10.0, fy: 10.0, cx: 2.0, cy: 2.0, width: 4, height: 4 };
        let mut depth = vec![2.0_f32; 16];
        if let Some((u, v)) = drop_pixel {
            depth[v * 4 + u] = 0.0;
        }
        Scene::assemble(4, 4, 3, vec![0.2; 48], depth, k, Pose::identity(), boxes)
    }

    fn cube_at(x: f64, y: f64, z: f64, class: u32) -> GtBox {
        GtBox { box3: Box3D::new(Vec3::new(x, y, z), 0.5, 0.5, 0.5, 0.0), class }
    }

    #[test]
    fn label_rules_single_overlap_background_and_missing_depth() {
        // Pixel (2,2) unprojects to (0,0,2); pixel (3,3) to (0.2,0.2,2).
        let scene = tiny_scene(
            vec![cube_at(0.0, 0.0, 2.0, 1), cube_at(0.3, 0.3, 2.0, 2)],
            Some((0, 1)),
        );
        let gt = &scene.seg_gt;
        assert_eq!(gt.at(2, 2), 1, "inside exactly the first box");
        assert_eq!(gt.at(3, 3), IGNORE_LABEL, "inside both boxes");
        assert_eq!(gt.at(0, 0), gt.background(), "outside all boxes");
        assert_eq!(gt.at(0, 1), IGNORE_LABEL, "absent depth");
        // Pixel (3,2) -> (0.2, 0.0, 2): inside box 1 only.
        assert_eq!(gt.at(3, 2), 1);
    }

    #[test]
    fn labelled_pixels_unproject_into_exactly_one_box() {
        for seed in 0..3u64 {
            let scene = synth_scene(seed, &DataConfig::default());
            for v in 0..scene.height {
                for u in 0..scene.width {
                    let lab = scene.seg_gt.at(u, v);
                    let d = scene.depth[v * scene.width + u] as f64;
                    if d <= 0.0 {
                        assert_eq!(lab, IGNORE_LABEL);
                        continue;
                    }
                    let p = unproject(&scene.intrinsics, &scene.pose, u as f64, v as f64, d)
                        .unwrap();
                    let inside = scene.boxes.iter().filter(|g| g.box3.contains(p)).count();
                    match inside {
                        0 => assert_eq!(lab, scene.seg_gt.background()),
                        1 => assert!(lab < scene.num_classes),
                        _ => assert_eq!(lab, IGNORE_LABEL),
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_boxes_rest_on_ground() {
        let cfg = DataConfig::default();
        let a = synth_scene(11, &cfg);
        let b = synth_scene(11, &cfg);
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.boxes.len(), b.boxes.len());
        for (x, y) in a.boxes.iter().zip(&b.boxes) {
            assert_eq!(x.box3.params(), y.box3.params());
            assert_eq!(x.class, y.class);
        }
        assert!(a.boxes.len() >= 2 && a.boxes.len() <= 6);
        for g in &a.boxes {
            assert!((g.box3.center.z - g.box3.h / 2.0).abs() < 1e-12);
            assert!(g.box3.l >= g.box3.w);
            assert!((-FRAC_PI_2..FRAC_PI_2).contains(&g.box3.yaw));
            // In front of the camera and projectable.
            assert!(project(&a.intrinsics, &a.pose, g.box3.center).unwrap().in_frame);
        }
        for i in 0..a.boxes.len() {
            for j in 0..i {
                assert!(bev_iou(&a.boxes[i].box3, &a.boxes[j].box3) < 0.05);
            }
        }
    }

    #[test]
    fn zero_box_config_leaves_only_background_and_ignore() {
        let cfg = DataConfig { min_boxes: 0, max_boxes: 0, ..DataConfig::default() };
        let scene = synth_scene(3, &cfg);
        assert!(scene.boxes.is_empty());
        for &l in &scene.seg_gt.labels {
            assert!(l == scene.seg_gt.background() || l == IGNORE_LABEL);
        }
        // The ground must still produce plenty of valid depth.
        assert!(scene.cloud.len() > 1000);
    }

    #[test]
    fn front_face_depth_matches_ray_plane_oracle() {
        // Level camera looking straight down +y at a yaw-0 box: the front
        // face lies in the plane y = c.y - w/2, so its analytic depth is the
        // same for every pixel.
        let cfg = DataConfig { rgb_noise: 0.0, depth_dropout: 0.0, ..DataConfig::default() };
        let k = cfg.intrinsics();
        let pose = Pose::look_at(
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(0.0, 5.0, 1.0),
            Vec3::new(0.0, 0.0, 1.0),
        );
        let b = Box3D::new(Vec3::new(0.0, 3.0, 1.0), 1.2, 1.2, 0.8, 0.0);
        let boxes = vec![GtBox { box3: b, class: 0 }];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, depth) =
            synth::render_scene(&boxes, &k, &pose, cfg.num_classes, &cfg, &mut rng);
        let plane_y = 3.0 - 0.4;
        let mut face_pixels = 0;
        for v in 0..cfg.height as usize {
            for u in 0..cfg.width as usize {
                let d = depth[v * cfg.width as usize + u] as f64;
                if d <= 0.0 {
                    continue;
                }
                let p = unproject(&k, &pose, u as f64, v as f64, d).unwrap();
                let central = (p.z - 1.0).abs() < 0.5 && p.x.abs() < 0.55;
                if b.contains(p) && central && (p.y - plane_y).abs() < 1e-3 {
                    face_pixels += 1;
                    assert!(
                        (d - plane_y).abs() < 1e-6,
                        "front-face depth {d} vs analytic {plane_y}"
                    );
                }
            }
        }
        assert!(face_pixels > 100, "only {face_pixels} front-face pixels");
    }

    #[test]
    fn sampling_is_a_permutation_at_full_size_and_pads_when_short() {
        let scene = synth_scene(5, &DataConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = scene.cloud.len();
        let full = sample_points(&scene.cloud, n, &mut rng).unwrap();
        let mut zs: Vec<u64> = full.positions.iter().map(|p| p.z.to_bits()).collect();
        let mut ref_zs: Vec<u64> = scene.cloud.positions.iter().map(|p| p.z.to_bits()).collect();
        zs.sort_unstable();
        ref_zs.sort_unstable();
        assert_eq!(zs, ref_zs, "full-size sample must be a permutation");

        let over = sample_points(&scene.cloud, n + 100, &mut rng).unwrap();
        assert_eq!(over.len(), n + 100);

        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let s1 = sample_points(&scene.cloud, 256, &mut r1).unwrap();
        let s2 = sample_points(&scene.cloud, 256, &mut r2).unwrap();
        assert_eq!(s1.positions, s2.positions);

        let empty = PointCloud::new(vec![], vec![]);
        assert!(sample_points(&empty, 4, &mut rng).is_err());
    }

    #[test]
    fn identity_augmentation_is_a_noop() {
        let scene = synth_scene(21, &DataConfig::default());
        let same = augment_with(&scene, &AugmentParams::identity());
        assert_eq!(scene.rgb, same.rgb);
        assert_eq!(scene.cloud.positions, same.cloud.positions);
        for (a, b) in scene.boxes.iter().zip(&same.boxes) {
            assert_eq!(a.box3.params(), b.box3.params());
        }
    }

    #[test]
    fn augmentation_preserves_memberships_and_pairwise_ious() {
        let scene = synth_scene(33, &DataConfig::default());
        let before = pairwise_iou(&scene.boxes);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let p = AugmentParams::draw(&mut rng);
            let aug = augment_with(&scene, &p);
            let after = pairwise_iou(&aug.boxes);
            for (ra, rb) in before.iter().zip(&after) {
                for (a, b) in ra.iter().zip(rb) {
                    assert!((a - b).abs() < 1e-9, "iou changed {a} -> {b}");
                }
            }
            // Membership check away from box boundaries.
            for (i, q) in scene.cloud.positions.iter().enumerate() {
                for (g_old, g_new) in scene.boxes.iter().zip(&aug.boxes) {
                    let c = g_old.box3.to_canonical(*q);
                    let margin = (g_old.box3.l / 2.0 - c.x.abs())
                        .min(g_old.box3.w / 2.0 - c.y.abs())
                        .min(g_old.box3.h / 2.0 - c.z.abs());
                    if margin.abs() < 1e-6 {
                        continue;
                    }
                    assert_eq!(
                        g_old.box3.contains(*q),
                        g_new.box3.contains(aug.cloud.positions[i]),
                    );
                }
            }
        }
    }

    #[test]
    fn scale_parameter_scales_extents() {
        let scene = synth_scene(2, &DataConfig::default());
        let p = AugmentParams { scale: 1.15, ..AugmentParams::identity() };
        let aug = augment_with(&scene, &p);
        for (a, b) in scene.boxes.iter().zip(&aug.boxes) {
            assert!((b.box3.l - a.box3.l * 1.15).abs() < 1e-12);
            assert!((b.box3.h - a.box3.h * 1.15).abs() < 1e-12);
            assert!((b.box3.w - a.box3.w * 1.15).abs() < 1e-12);
        }
    }

    #[test]
    fn canonical_gauge_swaps_axes_and_halves_the_circle() {
        let b = Box3D::new(Vec3::new(0.0, 0.0, 0.0), 0.5, 1.0, 0.9, 0.3);
        let c = canonical_gt_box(&b);
        assert!(c.l >= c.w);
        assert!((c.l - 0.9).abs() < 1e-12 && (c.w - 0.5).abs() < 1e-12);
        assert!((-FRAC_PI_2..FRAC_PI_2).contains(&c.yaw));
        // Same solid: containment agrees on a grid.
        for i in -4..=4 {
            for j in -4..=4 {
                let p = Vec3::new(i as f64 * 0.15, j as f64 * 0.15, 0.1);
                assert_eq!(b.contains(p), c.contains(p));
            }
        }
        // Already-canonical boxes pass through bitwise.
        let d = canonical_gt_box(&c);
        assert_eq!(c.params().map(f64::to_bits), d.params().map(f64::to_bits));
    }
}
