//! Scene synthesis: box placement on a ground plane and a small ray-cast
//! z-buffer renderer producing the RGB and depth planes.

use super::{canonical_gt_box, DataConfig, GtBox, Scene};
use crate::geom3d::bev_iou;
use crate::{Box3D, Intrinsics, Pose, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::FRAC_PI_2;

const GROUND_ALBEDO: [f64; 3] = [0.45, 0.42, 0.40];
const SKY_ALBEDO: [f64; 3] = [0.85, 0.90, 0.95];

/// Generates one scene: places boxes, renders RGB-D, derives cloud + labels.
pub fn synth_scene(seed: u64, cfg: &DataConfig) -> Scene {
    assert!(cfg.min_boxes <= cfg.max_boxes, "invalid box count range");
    assert!(cfg.width >= 4 && cfg.height >= 4, "image too small");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.intrinsics();
    let pose = cfg.pose();

    let want = rng.gen_range(cfg.min_boxes..=cfg.max_boxes) as usize;
    let mut boxes: Vec<GtBox> = Vec::new();
    for _ in 0..want {
        for _try in 0..cfg.place_tries {
            let class = rng.gen_range(0..cfg.num_classes);
            let b = sample_box(class, &mut rng);
            if boxes.iter().all(|g| bev_iou(&g.box3, &b) < 0.05) {
                boxes.push(GtBox { box3: b, class });
                break;
            }
        }
    }

    let (rgb, depth) = render_scene(&boxes, &k, &pose, cfg.num_classes, cfg, &mut rng);
    Scene::assemble(
        cfg.width as usize,
        cfg.height as usize,
        cfg.num_classes,
        rgb,
        depth,
        k,
        pose,
        boxes,
    )
}

/// Class-conditioned box: overlapping size ranges (so geometry alone does not
/// identify the class), resting on the ground plane, in front of the camera.
fn sample_box(class: u32, rng: &mut ChaCha8Rng) -> Box3D {
    let tier = (class % 3) as f64 + (class / 3) as f64 * 0.15;
    let l = rng.gen_range(0.45 + 0.12 * tier..0.80 + 0.12 * tier);
    let w = l * rng.gen_range(0.55..0.95);
    let h = rng.gen_range(0.35 + 0.12 * tier..0.65 + 0.12 * tier);
    let yaw = rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
    let y = rng.gen_range(2.0..5.5);
    let x = rng.gen_range(-0.4 * y..0.4 * y);
    canonical_gt_box(&Box3D::new(Vec3::new(x, y, h / 2.0), l, h, w, yaw))
}

/// Casts one ray per pixel against every box plus the ground plane (z = 0),
/// keeping the nearest hit. Depth is the camera-frame z of the hit; box hits
/// are nudged just past the entry face so the stored f32 depth unprojects to
/// a point strictly inside the box. Pixels that hit nothing get no depth,
/// and a configured fraction of depths is knocked out afterwards.
pub(crate) fn render_scene(
    boxes: &[GtBox],
    k: &Intrinsics,
    pose: &Pose,
    num_classes: u32,
    cfg: &DataConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, Vec<f32>) {
    let (w, h) = (cfg.width as usize, cfg.height as usize);
    let eye = pose.camera_center();
    let light = normalize(Vec3::new(0.3, -0.5, 0.8));
    let palette: Vec<[f64; 3]> = (0..num_classes).map(|c| class_albedo(c, num_classes)).collect();

    let mut rgb = vec![0.0_f32; w * h * 3];
    let mut depth = vec![0.0_f32; w * h];
    for v in 0..h {
        for u in 0..w {
            let dir = pose.pixel_ray(k, u as f64, v as f64);
            let mut best_t = f64::INFINITY;
            let mut albedo = SKY_ALBEDO;
            let mut normal = Vec3::new(0.0, 0.0, 1.0);
            let mut is_box = false;
            if dir.z < -1e-12 {
                let t = -eye.z / dir.z;
                if t > 0.0 {
                    best_t = t;
                    albedo = GROUND_ALBEDO;
                }
            }
            for g in boxes {
                if let Some((t, n)) = ray_box_entry(eye, dir, &g.box3) {
                    if t < best_t {
                        best_t = t;
                        albedo = palette[g.class as usize];
                        normal = n;
                        is_box = true;
                    }
                }
            }

            let idx = v * w + u;
            if best_t.is_finite() && best_t <= cfg.max_depth {
                depth[idx] = if is_box { f32_above(best_t) } else { best_t as f32 };
            }
            let shade = if best_t.is_finite() {
                0.55 + 0.45 * normal.dot(light).max(0.0)
            } else {
                1.0
            };
            for c in 0..3 {
                let value = albedo[c] * shade + cfg.rgb_noise * randn(rng);
                rgb[idx * 3 + c] = value.clamp(0.0, 1.0) as f32;
            }
            if depth[idx] > 0.0 && cfg.depth_dropout > 0.0 && rng.gen::<f64>() < cfg.depth_dropout
            {
                depth[idx] = 0.0;
            }
        }
    }
    (rgb, depth)
}

/// Slab test in the box's canonical frame. Returns the entry ray parameter
/// and the world-frame normal of the entry face, or None on a miss. Assumes
/// the ray origin is outside the box.
fn ray_box_entry(o: Vec3, d: Vec3, b: &Box3D) -> Option<(f64, Vec3)> {
    let oc = o.sub(b.center).rot_z(-b.yaw);
    let dc = d.rot_z(-b.yaw);
    let half = [b.l / 2.0, b.w / 2.0, b.h / 2.0];
    let os = [oc.x, oc.y, oc.z];
    let ds = [dc.x, dc.y, dc.z];
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut axis = 0usize;
    for i in 0..3 {
        if ds[i].abs() < 1e-15 {
            if os[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let mut t0 = (-half[i] - os[i]) / ds[i];
        let mut t1 = (half[i] - os[i]) / ds[i];
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_enter {
            t_enter = t0;
            axis = i;
        }
        t_exit = t_exit.min(t1);
    }
    if t_enter > t_exit || t_enter <= 1e-9 {
        return None;
    }
    let mut n = [0.0; 3];
    n[axis] = -ds[axis].signum();
    let nc = Vec3::new(n[0], n[1], n[2]);
    Some((t_enter, nc.rot_z(b.yaw)))
}

/// Smallest f32 whose value is strictly greater than `t` (t > 0).
fn f32_above(t: f64) -> f32 {
    let mut x = t as f32;
    while (x as f64) <= t {
        x = f32::from_bits(x.to_bits() + 1);
    }
    x
}

/// Distinct hue per class, fixed saturation/value.
fn class_albedo(class: u32, num_classes: u32) -> [f64; 3] {
    hsv_to_rgb((class as f64 + 0.2) / num_classes.max(1) as f64, 0.75, 0.8)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i64;
    let f = h - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i.rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Standard normal via Box-Muller.
fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn normalize(v: Vec3) -> Vec3 {
    v.scale(1.0 / v.norm())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slab_test_hits_the_near_face() {
        let b = Box3D::new(Vec3::new(0.0, 3.0, 0.5), 1.0, 1.0, 1.0, 0.0);
        let (t, n) = ray_box_entry(Vec3::new(0.0, 0.0, 0.5), Vec3::new(0.0, 1.0, 0.0), &b)
            .expect("straight-on ray must hit");
        assert!((t - 2.5).abs() < 1e-12);
        assert!((n.y + 1.0).abs() < 1e-12 && n.x.abs() < 1e-12 && n.z.abs() < 1e-12);
        // Miss to the side.
        assert!(ray_box_entry(Vec3::new(2.0, 0.0, 0.5), Vec3::new(0.0, 1.0, 0.0), &b).is_none());
        // Ray pointing away.
        assert!(ray_box_entry(Vec3::new(0.0, 0.0, 0.5), Vec3::new(0.0, -1.0, 0.0), &b).is_none());
    }

    #[test]
    fn f32_nudge_is_tiny_but_strict() {
        for &t in &[0.37, 1.0, 2.6, 77.7] {
            let x = f32_above(t);
            assert!((x as f64) > t);
            assert!((x as f64 - t) < 1e-5 * t);
        }
    }

    #[test]
    fn rotated_box_entry_matches_containment_probe() {
        let b = Box3D::new(Vec3::new(0.4, 2.5, 0.4), 0.9, 0.8, 0.6, 0.7);
        let o = Vec3::new(0.0, 0.0, 1.2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hits = 0;
        for _ in 0..2000 {
            let dir = Vec3::new(
                rng.gen_range(-0.4..0.7),
                1.0,
                rng.gen_range(-0.6..0.2),
            );
            if let Some((t, _)) = ray_box_entry(o, dir, &b) {
                hits += 1;
                let just_inside = o.add(dir.scale(t * (1.0 + 1e-12)));
                assert!(b.contains_eps(just_inside, 1e-9));
                let well_before = o.add(dir.scale(t * 0.99));
                assert!(!b.contains(well_before));
            }
        }
        assert!(hits > 100, "sampler found only {hits} hits");
    }
}
