//! Flat-file visualization: binary PPM writes, a deterministic class
//! palette, segmentation overlays, and projected box wireframes, for
//! step-by-step inspection of cascade outputs.

use crate::camera::project;
use crate::data::{Scene, IGNORE_LABEL};
use crate::{Box3D, Error, Intrinsics, Pose, Result};
use std::io::Write;
use std::path::Path;

/// 8-bit RGB canvas, row-major.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn from_scene(scene: &Scene) -> Canvas {
        let rgb = scene
            .rgb
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Canvas { width: scene.width, height: scene.height, rgb }
    }

    fn blend(&mut self, x: usize, y: usize, color: [u8; 3], alpha: f64) {
        let base = (y * self.width + x) * 3;
        for (k, &c) in color.iter().enumerate() {
            let old = self.rgb[base + k] as f64;
            self.rgb[base + k] = (old + (c as f64 - old) * alpha).round() as u8;
        }
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.blend(x as usize, y as usize, color, 1.0);
        }
    }

    /// Bresenham segment, silently clipped at the frame.
    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
        let (mut x0, mut y0) = (a.0.round() as i64, a.1.round() as i64);
        let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, color);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    /// Tints pixels by their class color; background and IGNORE stay bare.
    pub fn overlay_labels(&mut self, labels: &[u32], num_classes: u32, alpha: f64) {
        assert_eq!(labels.len(), self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let l = labels[y * self.width + x];
                if l < num_classes {
                    self.blend(x, y, class_color(l), alpha);
                } else if l == IGNORE_LABEL {
                    self.blend(x, y, [32, 32, 32], alpha * 0.5);
                }
            }
        }
    }

    /// Draws a box as a 12-edge wireframe; edges with an endpoint behind
    /// the camera are dropped.
    pub fn overlay_box(
        &mut self,
        bx: &Box3D,
        intr: &Intrinsics,
        pose: &Pose,
        color: [u8; 3],
    ) {
        let corners = bx.corners();
        let projected: Vec<Option<(f64, f64)>> = corners
            .iter()
            .map(|&p| project(intr, pose, p).ok().map(|pr| (pr.u, pr.v)))
            .collect();
        // Corner sign order is (+++, -++, --+, +-+) then the same with -z.
        const EDGES: [(usize, usize); 12] = [
            (0, 1),
            (1, 2),
            (2, 3),
            (3, 0),
            (4, 5),
            (5, 6),
            (6, 7),
            (7, 4),
            (0, 4),
            (1, 5),
            (2, 6),
            (3, 7),
        ];
        for (i, j) in EDGES {
            if let (Some(a), Some(b)) = (projected[i], projected[j]) {
                self.line(a, b, color);
            }
        }
    }

    /// Binary PPM (P6).
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        file.write_all(header.as_bytes())
            .and_then(|()| file.write_all(&self.rgb))
            .map_err(|e| Error::io(path, e))
    }
}

/// Fixed, well-separated palette: hue steps by the golden angle per class.
pub fn class_color(class: u32) -> [u8; 3] {
    let h = (class as f64 * 137.50776405) % 360.0;
    let (r, g, b) = hsv_to_rgb(h, 0.85, 0.95);
    [r, g, b]
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to8 = |f: f64| ((f + m) * 255.0).round() as u8;
    (to8(r), to8(g), to8(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, DataConfig};
    use crate::Vec3;

    fn small_scene() -> Scene {
        let dc = DataConfig { width: 32, height: 24, ..DataConfig::default() };
        synth_scene(3, &dc)
    }

    #[test]
    fn ppm_has_correct_header_and_size() {
        let scene = small_scene();
        let canvas = Canvas::from_scene(&scene);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.ppm");
        canvas.write_ppm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P6\n32 24\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 32 * 24 * 3);
    }

    #[test]
    fn box_overlay_touches_pixels_near_the_object() {
        let scene = small_scene();
        let mut canvas = Canvas::from_scene(&scene);
        let before = canvas.rgb.clone();
        for g in &scene.boxes {
            canvas.overlay_box(&g.box3, &scene.intrinsics, &scene.pose, [255, 0, 255]);
        }
        assert!(!scene.boxes.is_empty());
        assert_ne!(canvas.rgb, before, "wireframes must change pixels");
    }

    #[test]
    fn behind_camera_boxes_draw_nothing() {
        let scene = small_scene();
        let mut canvas = Canvas::from_scene(&scene);
        let before = canvas.rgb.clone();
        // Center sits at camera depth -3, so every corner has depth < 0.
        let center = scene.pose.to_world(Vec3::new(0.0, 0.0, -3.0));
        let behind = Box3D::new(center, 1.0, 1.0, 1.0, 0.0);
        canvas.overlay_box(&behind, &scene.intrinsics, &scene.pose, [255, 255, 255]);
        assert_eq!(canvas.rgb, before);
    }

    #[test]
    fn label_overlay_blends_class_pixels_only() {
        let scene = small_scene();
        let mut canvas = Canvas::from_scene(&scene);
        let before = canvas.rgb.clone();
        let labels = scene.seg_gt.labels.clone();
        canvas.overlay_labels(&labels, scene.num_classes, 0.5);
        let bg = scene.seg_gt.background();
        for (i, &l) in labels.iter().enumerate() {
            let same = canvas.rgb[i * 3..i * 3 + 3] == before[i * 3..i * 3 + 3];
            if l == bg {
                assert!(same, "background pixel {i} must stay untouched");
            }
        }
        assert_ne!(canvas.rgb, before);
    }

    #[test]
    fn palette_is_distinct_for_nearby_classes() {
        for a in 0..10u32 {
            for b in (a + 1)..10 {
                assert_ne!(class_color(a), class_color(b));
            }
        }
    }
}
