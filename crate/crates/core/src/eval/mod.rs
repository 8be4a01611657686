//! Detection and segmentation metrics: per-class average precision at a
//! rotated-IoU threshold, the mean over thresholds 0.25:0.05:0.95, and 2D
//! mIoU over a confusion matrix that skips ignored pixels.

use crate::data::{GtBox, IGNORE_LABEL};
use crate::geom3d::iou3d;
use crate::Detection;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Centi-IoU thresholds 25, 30, ..., 95 (exact integers so report keys and
/// threshold values never pick up floating-point dust).
pub fn threshold_grid() -> Vec<u32> {
    (0..15).map(|i| 25 + 5 * i).collect()
}

/// Greedy matcher: per scene and class, detections in descending score order
/// claim the unmatched GT with the highest IoU at or above the threshold.
/// Returns pooled (score, is_tp) pairs plus the GT count for one class.
fn match_class(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    class: u32,
    iou_thresh: f64,
) -> (Vec<(f64, bool)>, usize) {
    assert_eq!(dets.len(), gts.len(), "detection/GT scene counts differ");
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0usize;
    for (scene_dets, scene_gts) in dets.iter().zip(gts) {
        let gt_idx: Vec<usize> =
            (0..scene_gts.len()).filter(|&i| scene_gts[i].class == class).collect();
        n_gt += gt_idx.len();
        let mut order: Vec<usize> =
            (0..scene_dets.len()).filter(|&i| scene_dets[i].class == class).collect();
        order.sort_by(|&a, &b| {
            scene_dets[b]
                .score
                .partial_cmp(&scene_dets[a].score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut taken = vec![false; gt_idx.len()];
        for &di in &order {
            let det = &scene_dets[di];
            let mut best: Option<(f64, usize)> = None;
            for (slot, &gi) in gt_idx.iter().enumerate() {
                if taken[slot] {
                    continue;
                }
                let iou = iou3d(&det.box3, &scene_gts[gi].box3);
                if iou >= iou_thresh && best.map(|(b, _)| iou > b).unwrap_or(true) {
                    best = Some((iou, slot));
                }
            }
            if let Some((_, slot)) = best {
                taken[slot] = true;
                scored.push((det.score, true));
            } else {
                scored.push((det.score, false));
            }
        }
    }
    (scored, n_gt)
}

/// Area under the precision envelope over recall (all-point interpolation).
fn ap_from_scored(mut scored: Vec<(f64, bool)>, n_gt: usize) -> f64 {
    if n_gt == 0 {
        return f64::NAN;
    }
    if scored.is_empty() {
        return 0.0;
    }
    // Stable by construction; sort only by score, keeping pooled order for ties.
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut prec = Vec::with_capacity(scored.len());
    let mut rec = Vec::with_capacity(scored.len());
    let mut tp = 0usize;
    for (i, &(_, hit)) in scored.iter().enumerate() {
        if hit {
            tp += 1;
        }
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..prec.len() {
        ap += (rec[i] - prev_r) * prec[i];
        prev_r = rec[i];
    }
    ap
}

/// Per-class AP at one threshold. Classes without any ground truth are
/// `None` and excluded from means.
pub fn match_and_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    iou_thresh: f64,
    num_classes: u32,
) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|c| {
            let (scored, n_gt) = match_class(dets, gts, c, iou_thresh);
            if n_gt == 0 {
                None
            } else {
                Some(ap_from_scored(scored, n_gt))
            }
        })
        .collect()
}

/// The full threshold sweep.
pub struct MapSweep {
    /// Centi-IoU threshold -> per-class AP.
    pub per_threshold: Vec<(u32, Vec<Option<f64>>)>,
    /// Mean over classes, per threshold (None when no class has GT).
    pub mean_per_threshold: Vec<(u32, Option<f64>)>,
    /// Mean of the per-threshold means.
    pub mean: f64,
}

pub fn map_range(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], num_classes: u32) -> MapSweep {
    let mut per_threshold = Vec::new();
    let mut mean_per_threshold = Vec::new();
    let mut acc = 0.0;
    let mut n = 0usize;
    for t in threshold_grid() {
        let aps = match_and_ap(dets, gts, t as f64 / 100.0, num_classes);
        let present: Vec<f64> = aps.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        };
        if let Some(m) = mean {
            acc += m;
            n += 1;
        }
        per_threshold.push((t, aps));
        mean_per_threshold.push((t, mean));
    }
    MapSweep {
        per_threshold,
        mean_per_threshold,
        mean: if n == 0 { 0.0 } else { acc / n as f64 },
    }
}

/// Pixel confusion over `num_classes + 1` labels (background is the last
/// class). IGNORE pixels never count.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: u32) -> ConfusionMatrix {
        let k = num_classes as usize + 1;
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    /// Adds pixel pairs; entries with IGNORE ground truth are skipped, and
    /// predictions are expected to be valid labels (class or background).
    pub fn update(&mut self, pred: &[u32], gt: &[u32]) {
        assert_eq!(pred.len(), gt.len());
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            assert!(p < self.k && g < self.k, "label out of range");
            self.counts[g * self.k + p] += 1;
        }
    }

    /// Intersection over union per class; None when the class never occurs
    /// in the ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.counts[c * self.k + c];
                let row: u64 = (0..self.k).map(|j| self.counts[c * self.k + j]).sum();
                let col: u64 = (0..self.k).map(|j| self.counts[j * self.k + c]).sum();
                if row == 0 {
                    return None;
                }
                let denom = row + col - tp;
                Some(if denom == 0 { 0.0 } else { tp as f64 / denom as f64 })
            })
            .collect()
    }

    /// Mean IoU over classes present in the ground truth.
    pub fn mean_iou(&self) -> f64 {
        let per = self.per_class_iou();
        let present: Vec<f64> = per.into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Machine-readable evaluation report. Key order is fixed (BTreeMap +
/// struct order) so identical inputs serialize to identical bytes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    /// AP integration rule, recorded so the numbers are self-describing.
    pub interpolation: String,
    /// class id -> "0.25".."0.95" -> AP.
    pub per_class_ap: BTreeMap<String, BTreeMap<String, f64>>,
    pub mean_ap_per_threshold: BTreeMap<String, f64>,
    pub map_range: f64,
    pub per_class_iou: BTreeMap<String, f64>,
    pub miou: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub runtime_s: Option<f64>,
}

fn thresh_key(centi: u32) -> String {
    format!("0.{centi:02}")
}

impl Report {
    pub fn build(
        dets: &[Vec<Detection>],
        gts: &[Vec<GtBox>],
        num_classes: u32,
        confusion: &ConfusionMatrix,
    ) -> Report {
        let sweep = map_range(dets, gts, num_classes);
        let mut per_class_ap: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (t, aps) in &sweep.per_threshold {
            for (c, ap) in aps.iter().enumerate() {
                if let Some(ap) = ap {
                    per_class_ap
                        .entry(c.to_string())
                        .or_default()
                        .insert(thresh_key(*t), *ap);
                }
            }
        }
        let mean_ap_per_threshold = sweep
            .mean_per_threshold
            .iter()
            .filter_map(|(t, m)| m.map(|m| (thresh_key(*t), m)))
            .collect();
        let mut per_class_iou = BTreeMap::new();
        for (c, iou) in confusion.per_class_iou().into_iter().enumerate() {
            if let Some(iou) = iou {
                let name =
                    if c == num_classes as usize { "background".to_string() } else { c.to_string() };
                per_class_iou.insert(name, iou);
            }
        }
        Report {
            interpolation: "all-point".into(),
            per_class_ap,
            mean_ap_per_threshold,
            map_range: sweep.mean,
            per_class_iou,
            miou: confusion.mean_iou(),
            runtime_s: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}
