//! Joint training: one optimization step couples the proposal loss, the 2D
//! segmentation loss, and the refinement loss; the refinement loss also
//! reaches the proposer through the geometry of the sampled feature rows.

use super::infer::{fusion_to_img, gather_roi_rows};
use super::{seeds, Models, OptimConfig};
use crate::data::{augment, sample_points, Scene};
use crate::derive_seed;
use crate::fusion::{build_3d_to_2d_map, paint, FusionMap, PaintedCloud, SegMap};
use crate::geom3d::feature_jacobian;
use crate::nncore::{clip_grad_norm, AdamW, Mat, ParamSource, ParamTensor, Phase};
use crate::proposer::{rpn_loss, Proposer, ProposerGrads};
use crate::refiner::{fusion_dropout_mask, rcnn_loss, RefinerNet};
use crate::seg2d::{pixel_softmax, select_fusion_output, SegNet};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The three joint-loss parts and their sum, as batch means.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn: f64,
    pub seg: f64,
    pub rcnn: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.rpn += other.rpn * s;
        self.seg += other.seg * s;
        self.rcnn += other.rcnn * s;
        self.total += other.total * s;
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch-mean total loss per optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean of `step_losses` per epoch.
    pub epoch_means: Vec<f64>,
    /// Per-part batch means averaged per epoch.
    pub epoch_parts: Vec<LossBreakdown>,
    /// Parts of the very first batch, before any update.
    pub first_batch: LossBreakdown,
    /// Mean total loss over the last epoch.
    pub final_epoch_mean: f64,
}

/// Proposer + refiner view for the 3D optimizer (they share one weight
/// decay, distinct from the 2D segmenter's).
struct ThreeD<'a> {
    proposer: &'a mut Proposer,
    refiner: &'a mut RefinerNet,
}

impl ParamSource for ThreeD<'_> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        self.proposer.visit(f);
        self.refiner.visit(f);
    }
}

fn lr_at_epoch(o: &OptimConfig, epoch: usize) -> f64 {
    let drops = o
        .lr_drop_fracs
        .iter()
        .filter(|&&f| epoch >= (f * o.epochs as f64).floor() as usize)
        .count();
    o.lr * o.lr_drop_factor.powi(drops as i32)
}

fn scale_proposer_grads(g: &mut ProposerGrads, s: f64) {
    for v in g.d_center.iter_mut().chain(g.d_size.iter_mut()).chain(g.d_votes.iter_mut()) {
        v.iter_mut().for_each(|x| *x *= s);
    }
    g.d_heading.iter_mut().for_each(|x| *x *= s);
    g.d_obj_logit.iter_mut().for_each(|x| *x *= s);
    g.d_class_logits.data.iter_mut().for_each(|x| *x *= s);
}

fn scale_mat(m: &Mat, s: f64) -> Mat {
    let mut out = m.clone();
    out.data.iter_mut().for_each(|x| *x *= s);
    out
}

/// One sub-seeded rng per random role per scene visit.
fn visit_rng(master: u64, tag: u64, epoch: usize, step: usize, slot: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(
        master,
        &[tag, epoch as u64, step as u64, slot as u64],
    ))
}

/// Forward + backward for one scene; gradients are accumulated into the
/// networks scaled by `inv_b` so the optimizer steps on batch means.
/// Returns the scene's (unscaled) loss parts.
fn scene_step(
    models: &mut Models,
    scene: &Scene,
    epoch: usize,
    step: usize,
    slot: usize,
    inv_b: f64,
) -> Result<LossBreakdown> {
    let cfg = models.cfg.clone();
    let plan = models.plan.clone();
    let c = cfg.num_classes();
    let master = cfg.seed;
    let (w, h) = (scene.width, scene.height);

    let augmented;
    let scene = if cfg.augment {
        let aug_seed = derive_seed(master, &[seeds::AUGMENT, epoch as u64, step as u64, slot as u64]);
        augmented = augment(scene, aug_seed);
        &augmented
    } else {
        scene
    };

    // Fresh point budget per visit: the 3D stages never see more than
    // `n_cloud_points` of the (augmented) cloud.
    let sampled;
    let cloud = if scene.cloud.len() > cfg.n_cloud_points {
        let mut cloud_rng = visit_rng(master, seeds::CLOUD, epoch, step, slot);
        sampled = sample_points(&scene.cloud, cfg.n_cloud_points, &mut cloud_rng)?;
        &sampled
    } else {
        &scene.cloud
    };

    // Sample-level fusion dropout: one decision for the scene's entire 2D
    // block (painted semantics and refinement rows alike).
    let mut drop_rng = visit_rng(master, seeds::FUSION_DROP, epoch, step, slot);
    let drop_2d =
        fusion_dropout_mask(1, cfg.fusion_dropout_p, Phase::Train, &mut drop_rng)[0];

    let mut seg_total = 0.0;

    // A training-time 2D pass: forward, loss, immediate backward (so the
    // layer caches are free for a second pass), then the fused output the
    // 3D stages consume — the train-phase head per policy, detached.
    let seg_pass = |seg: &mut SegNet, map: &FusionMap| -> (f64, SegMap) {
        let img = fusion_to_img(map);
        let (main_logits, aux_logits) = seg.forward(&img, true);
        let (loss, mut dmain, mut daux) =
            crate::seg2d::seg_loss(&main_logits, &aux_logits, &scene.seg_gt, cfg.lambda_aux);
        dmain.data.iter_mut().for_each(|v| *v *= inv_b);
        daux.data.iter_mut().for_each(|v| *v *= inv_b);
        seg.backward(&dmain, &daux);
        let fused = select_fusion_output(
            &pixel_softmax(&main_logits),
            &pixel_softmax(&aux_logits),
            cfg.head_policy,
            Phase::Train,
        );
        (loss, fused)
    };

    let mut paint_src: Option<SegMap> = None;
    if plan.initial_2d {
        paint_src = Some(if cfg.oracle_seg {
            SegMap::from_labels(&scene.seg_gt)
        } else {
            let map = FusionMap::rgbd_only(w, h, c, &scene.rgb, &scene.depth);
            let (loss, fused) =
                seg_pass(models.seg.as_mut().expect("2D stage requires a segmenter"), &map);
            seg_total += loss;
            fused
        });
    }

    let mut painted = match &paint_src {
        Some(s) => paint(cloud, s)?,
        None => PaintedCloud::unpainted(cloud, c)?,
    };
    if drop_2d {
        painted.drop_sem();
    }
    let pout = models.proposer.forward(&painted);
    let (rpn_parts, mut pgrads) = rpn_loss(&pout, &scene.boxes, &models.proposer.cfg);
    scale_proposer_grads(&mut pgrads, inv_b);

    // Training runs the first cascade group; recursion reuses these weights
    // at inference.
    let seg_for_rows = if plan.fused[0] {
        if cfg.oracle_seg {
            SegMap::from_labels(&scene.seg_gt)
        } else {
            let mut map_rng = visit_rng(master, seeds::MAP, epoch, step, slot);
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
            let (loss, fused) =
                seg_pass(models.seg.as_mut().expect("2D stage requires a segmenter"), &map);
            seg_total += loss;
            fused
        }
    } else {
        SegMap::zeros(w, h, c)
    };
    let seg_for_rows = if drop_2d { SegMap::zeros(w, h, c) } else { seg_for_rows };

    let mut roi_rng = visit_rng(master, seeds::ROI, epoch, step, slot);
    let roi = gather_roi_rows(
        &pout.proposals,
        cloud,
        &seg_for_rows,
        cfg.n_points_per_roi,
        cfg.enlargement,
        &mut roi_rng,
    )?;
    let mut head_rng = visit_rng(master, seeds::HEAD_DROP, epoch, step, slot);
    let batch =
        models.refiner.forward(&roi.rows, cfg.n_points_per_roi, Phase::Train, &mut head_rng);
    let (rcnn_parts, rgrads) = rcnn_loss(&pout.proposals, &batch, &scene.boxes, &models.refiner.cfg);

    let d_res = scale_mat(&rgrads.d_res, inv_b);
    let d_cls = scale_mat(&rgrads.d_cls, inv_b);
    let d_iou: Vec<f64> = rgrads.d_iou_logit.iter().map(|g| g * inv_b).collect();
    let d_rows = models.refiner.backward(&d_res, &d_cls, &d_iou);

    // Pull the refinement loss back into the proposal parameters through
    // the geometric part of each sampled row (the 2D block is data).
    let n = cfg.n_points_per_roi;
    let gamma = cfg.enlargement;
    for t in 0..pout.proposals.len() {
        if roi.degenerate[t] {
            continue;
        }
        for r in 0..n {
            let grad_row = &d_rows.row(t * n + r)[..9];
            if grad_row.iter().all(|&g| g == 0.0) {
                continue;
            }
            let jac = feature_jacobian(&roi.enlarged[t], roi.points[t][r]);
            let mut dp = [0.0; 7];
            for (i, &gi) in grad_row.iter().enumerate() {
                if gi != 0.0 {
                    for (d, jv) in dp.iter_mut().zip(&jac[i]) {
                        *d += gi * jv;
                    }
                }
            }
            for a in 0..3 {
                pgrads.d_center[t][a] += dp[a];
            }
            // The rows see the enlarged extents; chain through the factor.
            pgrads.d_size[t][0] += dp[3] * gamma;
            pgrads.d_size[t][1] += dp[4] * gamma;
            pgrads.d_size[t][2] += dp[5] * gamma;
            pgrads.d_heading[t] += dp[6];
        }
    }
    models.proposer.backward(&pgrads);

    let total = rpn_parts.total + seg_total + rcnn_parts.total;
    Ok(LossBreakdown { rpn: rpn_parts.total, seg: seg_total, rcnn: rcnn_parts.total, total })
}

/// Joint training over `scenes` with the config embedded in `models`:
/// shuffled batches, one optimizer per weight-decay group, stepped learning
/// rate, global gradient clipping. Fully deterministic given the master seed.
pub fn train_in_place(models: &mut Models, scenes: &[Scene]) -> Result<TrainReport> {
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    for s in scenes {
        if s.width % 4 != 0 || s.height % 4 != 0 {
            return Err(Error::Config(format!(
                "segmenter needs image dims divisible by 4, got {}x{}",
                s.width, s.height
            )));
        }
        if s.num_classes as usize != models.cfg.num_classes() {
            return Err(Error::Config(format!(
                "scene has {} classes, models expect {}",
                s.num_classes,
                models.cfg.num_classes()
            )));
        }
    }

    let optim = models.cfg.optim.clone();
    let master = models.cfg.seed;
    let mut opt3 = AdamW::new(optim.lr, optim.weight_decay_3d);
    let mut opt2 = AdamW::new(optim.lr, optim.weight_decay_2d);
    let mut report = TrainReport::default();

    for epoch in 0..optim.epochs {
        let lr = lr_at_epoch(&optim, epoch);
        opt3.lr = lr;
        opt2.lr = lr;

        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(master, &[seeds::SHUFFLE, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_sum = LossBreakdown::default();
        let mut epoch_steps = 0usize;
        for (step, chunk) in order.chunks(optim.batch_size).enumerate() {
            models.zero_grads();
            let inv_b = 1.0 / chunk.len() as f64;
            let mut batch = LossBreakdown::default();
            for (slot, &si) in chunk.iter().enumerate() {
                let parts = scene_step(models, &scenes[si], epoch, step, slot, inv_b)?;
                batch.add_scaled(&parts, inv_b);
            }
            clip_grad_norm(models, optim.grad_clip);
            {
                let Models { proposer, seg, refiner, .. } = models;
                opt3.step(&mut ThreeD { proposer, refiner });
                if let Some(seg) = seg {
                    opt2.step(seg);
                }
            }
            if epoch == 0 && step == 0 {
                report.first_batch = batch;
            }
            report.step_losses.push(batch.total);
            epoch_sum.add_scaled(&batch, 1.0);
            epoch_steps += 1;
        }
        let inv = 1.0 / epoch_steps as f64;
        let mut parts = LossBreakdown::default();
        parts.add_scaled(&epoch_sum, inv);
        report.epoch_means.push(parts.total);
        report.epoch_parts.push(parts);
    }
    report.final_epoch_mean = *report.epoch_means.last().expect("at least one epoch");
    Ok(report)
}

/// Builds fresh models from `cfg` and trains them on `scenes`.
pub fn train(
    scenes: &[Scene],
    cfg: &super::CascadeConfig,
) -> Result<(Models, TrainReport)> {
    let mut models = Models::new(cfg.clone())?;
    let report = train_in_place(&mut models, scenes)?;
    Ok((models, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_drops_at_the_scheduled_fractions() {
        let o = OptimConfig { epochs: 24, lr: 5e-4, ..OptimConfig::default() };
        // Drops land at floor(2/3 * 24) = 16 and floor(7/8 * 24) = 21.
        assert_eq!(lr_at_epoch(&o, 0), 5e-4);
        assert_eq!(lr_at_epoch(&o, 15), 5e-4);
        assert!((lr_at_epoch(&o, 16) - 5e-5).abs() < 1e-18);
        assert!((lr_at_epoch(&o, 20) - 5e-5).abs() < 1e-18);
        assert!((lr_at_epoch(&o, 21) - 5e-6).abs() < 1e-19);
        assert!((lr_at_epoch(&o, 23) - 5e-6).abs() < 1e-19);
    }

    #[test]
    fn loss_breakdown_accumulates_batch_means() {
        let mut acc = LossBreakdown::default();
        let a = LossBreakdown { rpn: 1.0, seg: 2.0, rcnn: 3.0, total: 6.0 };
        let b = LossBreakdown { rpn: 3.0, seg: 2.0, rcnn: 1.0, total: 6.0 };
        acc.add_scaled(&a, 0.5);
        acc.add_scaled(&b, 0.5);
        assert_eq!(acc.rpn, 2.0);
        assert_eq!(acc.total, 6.0);
        assert!((acc.total - (acc.rpn + acc.seg + acc.rcnn)).abs() < 1e-12);
    }
}
