//! Rotated-box IoU: exact bird's-eye-view polygon intersection via
//! Sutherland-Hodgman clipping, times the vertical overlap, plus greedy NMS.

use super::Box3D;
use crate::scalar::Real;

/// Half-plane side tolerance for clipping.
const CLIP_EPS: f64 = 1e-9;
/// Intersections below this BEV area count as empty.
const AREA_EPS: f64 = 1e-12;

/// Bird's-eye-view footprint corners in counter-clockwise order.
pub fn bev_corners<T: Real>(b: &Box3D<T>) -> [[T; 2]; 4] {
    let half = T::c(0.5);
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.l * half, b.w * half);
    let mut out = [[T::zero(); 2]; 4];
    for (i, (sx, sy)) in [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].into_iter().enumerate() {
        out[i] = [b.center.x + c * sx - s * sy, b.center.y + s * sx + c * sy];
    }
    out
}

/// Signed shoelace area; positive for counter-clockwise rings.
pub fn polygon_area<T: Real>(poly: &[[T; 2]]) -> T {
    if poly.len() < 3 {
        return T::zero();
    }
    let mut acc = T::zero();
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    acc * T::c(0.5)
}

/// Clips `subject` against a convex counter-clockwise `clip` polygon
/// (Sutherland-Hodgman). Returns the intersection ring.
pub fn convex_clip<T: Real>(subject: &[[T; 2]], clip: &[[T; 2]]) -> Vec<[T; 2]> {
    let eps = T::c(CLIP_EPS);
    let mut out: Vec<[T; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut out);
        let side = |p: [T; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = side(cur) >= -eps;
            let prev_in = side(prev) >= -eps;
            if cur_in {
                if !prev_in {
                    out.push(line_intersect(prev, cur, a, b));
                }
                out.push(cur);
            } else if prev_in {
                out.push(line_intersect(prev, cur, a, b));
            }
        }
    }
    out
}

fn line_intersect<T: Real>(p0: [T; 2], p1: [T; 2], a: [T; 2], b: [T; 2]) -> [T; 2] {
    let d1 = [p1[0] - p0[0], p1[1] - p0[1]];
    let d2 = [b[0] - a[0], b[1] - a[1]];
    let denom = d1[0] * d2[1] - d1[1] * d2[0];
    if denom.abs() < T::c(1e-30) {
        return p1;
    }
    let t = ((a[0] - p0[0]) * d2[1] - (a[1] - p0[1]) * d2[0]) / denom;
    [p0[0] + d1[0] * t, p0[1] + d1[1] * t]
}

/// Exact rotated IoU: BEV polygon intersection area times vertical overlap,
/// over the union volume. Degenerate overlaps collapse to 0.
pub fn iou3d<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let half = T::c(0.5);
    let (abot, atop) = (a.center.z - a.h * half, a.center.z + a.h * half);
    let (bbot, btop) = (b.center.z - b.h * half, b.center.z + b.h * half);
    let v_overlap = (atop.min(btop) - abot.max(bbot)).max(T::zero());
    if v_overlap <= T::zero() {
        return T::zero();
    }
    let inter_ring = convex_clip(&bev_corners(a), &bev_corners(b));
    let area = polygon_area(&inter_ring).abs();
    if area < T::c(AREA_EPS) {
        return T::zero();
    }
    let inter = area * v_overlap;
    let union = a.volume() + b.volume() - inter;
    inter / union
}

/// Bird's-eye-view IoU of the two footprints, ignoring height.
pub fn bev_iou<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let inter = polygon_area(&convex_clip(&bev_corners(a), &bev_corners(b))).abs();
    if inter < T::c(AREA_EPS) {
        return T::zero();
    }
    let union = a.l * a.w + b.l * b.w - inter;
    inter / union
}

/// Greedy non-maximum suppression on rotated boxes. Candidates are visited
/// in descending score order (ties keep the lower index first); a candidate
/// is dropped when its IoU with an already-kept box exceeds `iou_thresh`.
/// Returns kept indices in visit order.
pub fn nms3d<T: Real>(boxes: &[Box3D<T>], scores: &[T], iou_thresh: T) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j].partial_cmp(&scores[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| iou3d(&boxes[i], &boxes[k]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}
