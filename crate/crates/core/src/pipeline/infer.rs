//! Cascade inference: stage execution in grammar order, recursion with
//! re-painting, cross-iteration ensembling, and dataset-level evaluation.

use super::{nms_per_class, seeds, Models, ENSEMBLE_NMS_IOU};
use crate::cloud::PointCloud;
use crate::data::{sample_points, Scene};
use crate::derive_seed;
use crate::eval::{ConfusionMatrix, Report};
use crate::fusion::{
    assemble_refine_features, build_3d_to_2d_map, paint, FusionMap, PaintedCloud, SegMap,
};
use crate::geom3d::iou3d;
use crate::nncore::{Img, Mat, Phase};
use crate::refiner::{apply_residuals, to_detections};
use crate::seg2d::{argmax_labels, pixel_softmax, select_fusion_output, FusionSource, SegNet};
use crate::{Box3D, Detection, Proposal, Result, Vec3};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Everything one cascade iteration produced, kept for inspection and for
/// the step-by-step visualizations.
pub struct IterTrace {
    pub proposals: Vec<Proposal>,
    /// Fused 2D output (object classes only), when the iteration ran it.
    pub segmap: Option<SegMap>,
    /// Refined, scored boxes of this iteration, aligned with `proposals`.
    pub refined: Vec<Detection>,
}

pub struct CascadeOutput {
    pub initial_segmap: Option<SegMap>,
    pub iterations: Vec<IterTrace>,
    /// Ensemble pool: refined boxes of every iteration, in iteration order.
    pub pooled: Vec<Detection>,
    /// Pool reduced by per-class NMS.
    pub detections: Vec<Detection>,
    /// Hard labels (incl. background) from the last 2D pass under the
    /// test-time head policy; None when the cascade has no 2D stage.
    pub seg_labels: Option<Vec<u32>>,
}

pub(crate) fn fusion_to_img(map: &FusionMap) -> Img {
    Img { c: map.channels(), h: map.height, w: map.width, data: map.data.clone() }
}

/// Per-pixel mix of the two head distributions (full simplex incl.
/// background), for hard-label prediction.
pub(crate) fn blend_probs(main: &Img, aux: &Img, source: FusionSource) -> Img {
    match source {
        FusionSource::Main => main.clone(),
        FusionSource::Aux => aux.clone(),
        FusionSource::Ensemble => {
            let mut out = main.clone();
            for (o, &a) in out.data.iter_mut().zip(&aux.data) {
                *o = 0.5 * (*o + a);
            }
            out
        }
    }
}

/// One test-time segmenter pass: fused C-class map for the 3D stages plus
/// hard labels under the test head policy.
fn seg_test_pass(seg: &mut SegNet, map: &FusionMap, models_policy: crate::seg2d::HeadPolicy) -> (SegMap, Vec<u32>) {
    let img = fusion_to_img(map);
    let (main_logits, aux_logits) = seg.forward(&img, false);
    let main_p = pixel_softmax(&main_logits);
    let aux_p = pixel_softmax(&aux_logits);
    let labels = argmax_labels(&blend_probs(&main_p, &aux_p, models_policy.test_fusion_source));
    let fused = select_fusion_output(&main_p, &aux_p, models_policy, Phase::Test);
    (fused, labels)
}

/// GT labels as predictions for the oracle-segmenter mode (IGNORE pixels
/// mapped to background; they are skipped by the confusion matrix anyway).
fn oracle_labels(scene: &Scene) -> Vec<u32> {
    let bg = scene.seg_gt.background();
    scene.seg_gt.labels.iter().map(|&l| if l == crate::data::IGNORE_LABEL { bg } else { l }).collect()
}

/// Refinement feature rows for a batch of proposals, rectangular at
/// `n` rows per box. Degenerate (point-free) boxes keep their zero rows;
/// `points` is empty for them and the flag is set.
pub(crate) struct RoiRows {
    pub rows: Mat,
    pub enlarged: Vec<Box3D>,
    pub points: Vec<Vec<Vec3>>,
    pub degenerate: Vec<bool>,
}

pub(crate) fn gather_roi_rows(
    proposals: &[Proposal],
    cloud: &PointCloud,
    segmap: &SegMap,
    n: usize,
    factor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RoiRows> {
    let c = segmap.num_classes;
    let mut out = RoiRows {
        rows: Mat::zeros(proposals.len() * n, 9 + c),
        enlarged: Vec::with_capacity(proposals.len()),
        points: Vec::with_capacity(proposals.len()),
        degenerate: Vec::with_capacity(proposals.len()),
    };
    for (t, prop) in proposals.iter().enumerate() {
        let ebox = prop.box3.enlarge(factor)?;
        let feats = assemble_refine_features(&ebox, cloud, segmap, n, rng);
        if feats.degenerate {
            out.points.push(Vec::new());
        } else {
            for r in 0..n {
                out.rows.row_mut(t * n + r).copy_from_slice(feats.rows.row(r));
            }
            out.points.push(feats.points);
        }
        out.degenerate.push(feats.degenerate);
        out.enlarged.push(ebox);
    }
    Ok(out)
}

/// Runs the full cascade on one scene: optional RGB-D segmentation, then R
/// iterations of propose / fuse / refine, where iteration k > 1 re-paints
/// the raw cloud with iteration k-1's fused 2D output. Refined boxes from
/// every iteration are pooled and reduced by per-class NMS.
///
/// All sampling derives from `scene_seed` per iteration (not sequentially),
/// so a run with R iterations reproduces the first R iterations of any
/// longer run exactly.
pub fn run_cascade(models: &mut Models, scene: &Scene, scene_seed: u64) -> Result<CascadeOutput> {
    let cfg = models.cfg.clone();
    let plan = models.plan.clone();
    let c = cfg.num_classes();
    let (w, h) = (scene.width, scene.height);

    // One subsampled view of the cloud serves every iteration, so recursion
    // re-paints the same points it proposed from.
    let sampled;
    let cloud = if scene.cloud.len() > cfg.n_cloud_points {
        let mut cloud_rng = ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, &[seeds::CLOUD]));
        sampled = sample_points(&scene.cloud, cfg.n_cloud_points, &mut cloud_rng)?;
        &sampled
    } else {
        &scene.cloud
    };

    let mut initial_segmap = None;
    let mut seg_labels: Option<Vec<u32>> = None;
    // The segmentation output the next proposal pass paints with.
    let mut paint_src: Option<SegMap> = None;

    if plan.initial_2d {
        let (fused, labels) = if cfg.oracle_seg {
            (SegMap::from_labels(&scene.seg_gt), oracle_labels(scene))
        } else {
            let map = FusionMap::rgbd_only(w, h, c, &scene.rgb, &scene.depth);
            let seg = models.seg.as_mut().expect("2D stage requires a segmenter");
            seg_test_pass(seg, &map, cfg.head_policy)
        };
        seg_labels = Some(labels);
        initial_segmap = Some(fused.clone());
        paint_src = Some(fused);
    }

    let mut iterations = Vec::with_capacity(plan.iters());
    let mut pooled: Vec<Detection> = Vec::new();
    for k in 0..plan.iters() {
        let painted = match &paint_src {
            Some(s) => paint(cloud, s)?,
            None => PaintedCloud::unpainted(cloud, c)?,
        };
        let pout = models.proposer.forward(&painted);

        let segmap = if plan.fused[k] {
            let (fused, labels) = if cfg.oracle_seg {
                (SegMap::from_labels(&scene.seg_gt), oracle_labels(scene))
            } else {
                let mut map_rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, &[seeds::MAP, k as u64]));
                let map = build_3d_to_2d_map(
                    &pout.proposals,
                    cloud,
                    cfg.map_points_per_box,
                    &scene.rgb,
                    &scene.depth,
                    w,
                    h,
                    c,
                    &mut map_rng,
                );
                let seg = models.seg.as_mut().expect("2D stage requires a segmenter");
                seg_test_pass(seg, &map, cfg.head_policy)
            };
            seg_labels = Some(labels);
            Some(fused)
        } else {
            None
        };

        let seg_for_rows = segmap.clone().unwrap_or_else(|| SegMap::zeros(w, h, c));
        let mut roi_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, &[seeds::ROI, k as u64]));
        let roi = gather_roi_rows(
            &pout.proposals,
            cloud,
            &seg_for_rows,
            cfg.n_points_per_roi,
            cfg.enlargement,
            &mut roi_rng,
        )?;
        // Test phase: the head dropout is inert, so the rng is never drawn.
        let mut unused_rng = ChaCha8Rng::seed_from_u64(0);
        let batch =
            models.refiner.forward(&roi.rows, cfg.n_points_per_roi, Phase::Test, &mut unused_rng);
        let refined_boxes: Vec<Box3D> = pout
            .proposals
            .iter()
            .enumerate()
            .map(|(t, p)| apply_residuals(&p.box3, &batch.residuals_of(t)))
            .collect();
        let refined = to_detections(&refined_boxes, &batch, c);
        pooled.extend(refined.iter().cloned());
        if let Some(s) = &segmap {
            paint_src = Some(s.clone());
        }
        iterations.push(IterTrace { proposals: pout.proposals, segmap, refined });
    }

    let detections = nms_per_class(&pooled, ENSEMBLE_NMS_IOU);
    Ok(CascadeOutput { initial_segmap, iterations, pooled, detections, seg_labels })
}

/// Dataset-level evaluation result: the metric report plus the mean
/// max-IoU-to-GT of first-iteration proposals and their refinements
/// (the refinement sanity signal).
pub struct EvalOutcome {
    pub report: Report,
    pub mean_proposal_iou: f64,
    pub mean_refined_iou: f64,
    /// Whether any 2D predictions entered the mIoU part of the report.
    pub seg_scored: bool,
}

/// Runs the cascade over `scenes` and aggregates detection AP, segmentation
/// mIoU (when a 2D stage exists), and the proposal/refined IoU means.
/// Scene i uses the derived seed (cfg.seed, EVAL, i), so reports are a pure
/// function of models + data.
pub fn evaluate(models: &mut Models, scenes: &[Scene]) -> Result<EvalOutcome> {
    let c = models.cfg.num_classes() as u32;
    let mut confusion = ConfusionMatrix::new(c);
    let mut seg_scored = false;
    let mut dets: Vec<Vec<Detection>> = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    let (mut iou_p, mut iou_r, mut n_boxes) = (0.0, 0.0, 0usize);

    for (i, scene) in scenes.iter().enumerate() {
        let seed = derive_seed(models.cfg.seed, &[seeds::EVAL, i as u64]);
        let out = run_cascade(models, scene, seed)?;
        if let Some(labels) = &out.seg_labels {
            confusion.update(labels, &scene.seg_gt.labels);
            seg_scored = true;
        }
        if !scene.boxes.is_empty() {
            let first = &out.iterations[0];
            let best = |b: &Box3D| {
                scene.boxes.iter().map(|g| iou3d(b, &g.box3)).fold(0.0, f64::max)
            };
            for p in &first.proposals {
                iou_p += best(&p.box3);
            }
            for d in &first.refined {
                iou_r += best(&d.box3);
            }
            n_boxes += first.proposals.len();
        }
        dets.push(out.detections);
        gts.push(scene.boxes.clone());
    }

    let report = Report::build(&dets, &gts, c, &confusion);
    let norm = if n_boxes == 0 { 0.0 } else { 1.0 / n_boxes as f64 };
    Ok(EvalOutcome {
        report,
        mean_proposal_iou: iou_p * norm,
        mean_refined_iou: iou_r * norm,
        seg_scored,
    })
}
