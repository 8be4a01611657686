//! Second-stage refinement: a per-proposal point network over 9+C feature
//! rows with residual, class, and IoU-estimate heads, the stage loss, and
//! sample-level fusion dropout.

use crate::data::GtBox;
use crate::geom3d::{iou3d, wrap_angle};
use crate::nncore::{
    bce, cross_entropy, maxpool_backward, maxpool_segments, sigmoid, smooth_l1,
    softmax_in_place, Dense, Dropout, Mat, MlpStack, ParamSource, ParamTensor, Phase,
};
use crate::{Box3D, Detection, Proposal, Vec3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Box update in the proposal's heading-aligned frame: center shift,
/// extent deltas, heading delta.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Residuals {
    pub center: [f64; 3],
    pub extents: [f64; 3],
    pub heading: f64,
}

impl Residuals {
    pub fn from_array(a: &[f64]) -> Residuals {
        assert_eq!(a.len(), 7);
        Residuals { center: [a[0], a[1], a[2]], extents: [a[3], a[4], a[5]], heading: a[6] }
    }

    pub fn as_array(&self) -> [f64; 7] {
        let (c, e) = (self.center, self.extents);
        [c[0], c[1], c[2], e[0], e[1], e[2], self.heading]
    }
}

/// Extents never refine below this floor (meters).
pub const MIN_EXTENT: f64 = 0.01;

/// Applies residuals: the center shift is expressed in the box's canonical
/// frame and rotated into the world; extents are additive with a floor;
/// heading is additive and wrapped.
pub fn apply_residuals(bx: &Box3D, r: &Residuals) -> Box3D {
    let shift = Vec3::new(r.center[0], r.center[1], r.center[2]).rot_z(bx.yaw);
    Box3D::new(
        bx.center.add(shift),
        (bx.l + r.extents[0]).max(MIN_EXTENT),
        (bx.h + r.extents[1]).max(MIN_EXTENT),
        (bx.w + r.extents[2]).max(MIN_EXTENT),
        wrap_angle(bx.yaw + r.heading),
    )
}

/// The residuals that carry `bx` onto `gt` (inverse of [`apply_residuals`]
/// away from the extent floor).
pub fn residual_targets(bx: &Box3D, gt: &Box3D) -> Residuals {
    let d = gt.center.sub(bx.center).rot_z(-bx.yaw);
    Residuals {
        center: [d.x, d.y, d.z],
        extents: [gt.l - bx.l, gt.h - bx.h, gt.w - bx.w],
        heading: wrap_angle(gt.yaw - bx.yaw),
    }
}

/// Supervision for the IoU head: y = clamp(2*iou - 0.3, 0, 1).
pub fn iou_target(iou: f64) -> f64 {
    (2.0 * iou - 0.3).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub num_classes: usize,
    /// Shared per-row widths before the max pool.
    pub pre_pool: Vec<usize>,
    /// Shared widths after the pool; the last one feeds every head.
    pub post_pool: Vec<usize>,
    /// Dropout probability on the shared feature before the heads (train only).
    pub dropout: f64,
    /// Foreground matching threshold on 3D IoU.
    pub fg_iou: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            num_classes: 3,
            pre_pool: vec![128, 128, 1024],
            post_pool: vec![512, 512],
            dropout: 0.1,
            fg_iou: 0.25,
        }
    }
}

/// Per-proposal head outputs for one batch of boxes.
pub struct RefineBatch {
    /// n_boxes x 7 raw residuals.
    pub residuals: Mat,
    /// n_boxes x (C+1) logits, background last.
    pub class_logits: Mat,
    pub iou_logits: Vec<f64>,
    /// sigmoid(iou_logits).
    pub iou_pred: Vec<f64>,
}

impl RefineBatch {
    pub fn residuals_of(&self, i: usize) -> Residuals {
        Residuals::from_array(self.residuals.row(i))
    }
}

struct RefTape {
    n_rows: usize,
    arg: Vec<usize>,
}

pub struct RefinerNet {
    pub cfg: RefinerConfig,
    pre: MlpStack,
    post: MlpStack,
    drop: Dropout,
    head_res: Dense,
    head_cls: Dense,
    head_iou: Dense,
    tape: Option<RefTape>,
}

impl RefinerNet {
    pub fn new(cfg: RefinerConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.num_classes;
        let mut pre_w = vec![9 + c];
        pre_w.extend_from_slice(&cfg.pre_pool);
        let pre = MlpStack::new("ref.pre", &pre_w, true, rng);
        let mut post_w = vec![pre.out_dim()];
        post_w.extend_from_slice(&cfg.post_pool);
        let post = MlpStack::new("ref.post", &post_w, true, rng);
        let shared = post.out_dim();
        RefinerNet {
            drop: Dropout::new(cfg.dropout),
            head_res: Dense::new("ref.res", shared, 7, 1.0, rng),
            head_cls: Dense::new("ref.cls", shared, c + 1, 1.0, rng),
            head_iou: Dense::new("ref.iou", shared, 1, 1.0, rng),
            pre,
            post,
            cfg,
            tape: None,
        }
    }

    /// Runs the shared trunk and heads over a rectangular batch: `rows`
    /// holds `n_per_box` feature rows per proposal, concatenated.
    pub fn forward(
        &mut self,
        rows: &Mat,
        n_per_box: usize,
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> RefineBatch {
        assert_eq!(rows.cols, 9 + self.cfg.num_classes);
        assert!(n_per_box > 0 && rows.rows % n_per_box == 0);
        let h = self.pre.forward(rows, true);
        let (pooled, arg) = maxpool_segments(&h, n_per_box);
        let shared = self.post.forward(&pooled, true);
        let shared = self.drop.forward(&shared, phase == Phase::Train, rng);
        let residuals = self.head_res.forward(&shared, true);
        let class_logits = self.head_cls.forward(&shared, true);
        let iou = self.head_iou.forward(&shared, true);
        let iou_logits: Vec<f64> = (0..iou.rows).map(|i| iou.get(i, 0)).collect();
        let iou_pred = iou_logits.iter().map(|&l| sigmoid(l)).collect();
        self.tape = Some(RefTape { n_rows: rows.rows, arg });
        RefineBatch { residuals, class_logits, iou_logits, iou_pred }
    }

    /// Backpropagates head gradients; returns gradients with respect to the
    /// input feature rows (the hook that couples this stage to the proposal
    /// parameters through the sampled geometry).
    pub fn backward(&mut self, d_res: &Mat, d_cls: &Mat, d_iou_logit: &[f64]) -> Mat {
        let tape = self.tape.take().expect("forward before backward");
        let mut d_iou = Mat::zeros(d_iou_logit.len(), 1);
        for (i, &g) in d_iou_logit.iter().enumerate() {
            d_iou.set(i, 0, g);
        }
        let mut d_shared = self.head_res.backward(d_res);
        let d_from_cls = self.head_cls.backward(d_cls);
        let d_from_iou = self.head_iou.backward(&d_iou);
        for i in 0..d_shared.data.len() {
            d_shared.data[i] += d_from_cls.data[i] + d_from_iou.data[i];
        }
        let d_shared = self.drop.backward(&d_shared);
        let d_pooled = self.post.backward(&d_shared);
        let dh = maxpool_backward(&d_pooled, &tape.arg, tape.n_rows);
        self.pre.backward(&dh)
    }
}

impl ParamSource for RefinerNet {
    fn visit(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        self.pre.visit(f);
        self.post.visit(f);
        self.head_res.visit(f);
        self.head_cls.visit(f);
        self.head_iou.visit(f);
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RcnnLossParts {
    pub box_reg: f64,
    pub class: f64,
    pub iou: f64,
    pub total: f64,
}

pub struct RcnnGrads {
    pub d_res: Mat,
    pub d_cls: Mat,
    pub d_iou_logit: Vec<f64>,
    /// Matched GT index per proposal (None when the scene has no GT).
    pub matches: Vec<Option<usize>>,
    pub matched_iou: Vec<f64>,
}

/// Second-stage loss. Each proposal is matched to its max-IoU GT box;
/// foreground proposals (IoU >= fg threshold) get smooth-L1 on the seven
/// residual targets, every proposal gets class CE (background for
/// non-foreground) and BCE of the IoU estimate against the clamped IoU
/// target. Total is the unweighted sum of the three means.
pub fn rcnn_loss(
    proposals: &[Proposal],
    batch: &RefineBatch,
    gt: &[GtBox],
    cfg: &RefinerConfig,
) -> (RcnnLossParts, RcnnGrads) {
    let p = proposals.len();
    let c = cfg.num_classes;
    assert_eq!(batch.residuals.rows, p);
    let mut parts = RcnnLossParts::default();
    let mut grads = RcnnGrads {
        d_res: Mat::zeros(p, 7),
        d_cls: Mat::zeros(p, c + 1),
        d_iou_logit: vec![0.0; p],
        matches: vec![None; p],
        matched_iou: vec![0.0; p],
    };
    if p == 0 {
        return (parts, grads);
    }

    for (t, prop) in proposals.iter().enumerate() {
        let mut best = 0.0;
        let mut best_i = None;
        for (i, g) in gt.iter().enumerate() {
            let iou = iou3d(&prop.box3, &g.box3);
            if iou > best {
                best = iou;
                best_i = Some(i);
            }
        }
        grads.matches[t] = best_i;
        grads.matched_iou[t] = best;
    }

    let fg: Vec<usize> = (0..p).filter(|&t| grads.matched_iou[t] >= cfg.fg_iou).collect();
    let inv_all = 1.0 / p as f64;

    // Box regression on foreground proposals.
    if !fg.is_empty() {
        let inv_fg = 1.0 / fg.len() as f64;
        for &t in &fg {
            let gi = grads.matches[t].expect("foreground implies a match");
            let target = residual_targets(&proposals[t].box3, &gt[gi].box3).as_array();
            let (loss, grad) = smooth_l1(batch.residuals.row(t), &target);
            parts.box_reg += loss * inv_fg;
            for (dst, g) in grads.d_res.row_mut(t).iter_mut().zip(&grad) {
                *dst += g * inv_fg;
            }
        }
    }

    // Classification on every proposal; background label for non-foreground.
    for t in 0..p {
        let label = if grads.matched_iou[t] >= cfg.fg_iou {
            gt[grads.matches[t].unwrap()].class as usize
        } else {
            c
        };
        let (loss, grad) = cross_entropy(batch.class_logits.row(t), Some(label));
        parts.class += loss * inv_all;
        for (dst, g) in grads.d_cls.row_mut(t).iter_mut().zip(&grad) {
            *dst += g * inv_all;
        }
    }

    // IoU estimation on every proposal.
    for t in 0..p {
        let y = iou_target(grads.matched_iou[t]);
        let prob = batch.iou_pred[t];
        let (loss, dprob) = bce(prob, y);
        parts.iou += loss * inv_all;
        grads.d_iou_logit[t] += dprob * prob * (1.0 - prob) * inv_all;
    }

    parts.total = parts.box_reg + parts.class + parts.iou;
    (parts, grads)
}

/// Final detections: refined box, argmax object class, and the downstream
/// score class_prob * predicted IoU.
pub fn to_detections(boxes: &[Box3D], batch: &RefineBatch, num_classes: usize) -> Vec<Detection> {
    assert_eq!(boxes.len(), batch.class_logits.rows);
    boxes
        .iter()
        .enumerate()
        .map(|(t, bx)| {
            let mut probs = batch.class_logits.row(t).to_vec();
            softmax_in_place(&mut probs);
            let (class, p_cls) = probs[..num_classes]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, &v)| (i, v))
                .expect("at least one object class");
            Detection { box3: *bx, class: class as u32, score: p_cls * batch.iou_pred[t] }
        })
        .collect()
}

/// Per-sample Bernoulli drop decisions; inference never drops.
pub fn fusion_dropout_mask(n: usize, p: f64, phase: Phase, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..n)
        .map(|_| phase == Phase::Train && p > 0.0 && rng.gen_bool(p.clamp(0.0, 1.0)))
        .collect()
}

/// Zeroes the trailing `num_classes` columns (the 2D class block) of every
/// feature row in dropped samples. Returns the per-sample mask so callers
/// can zero the same samples' 2D inputs everywhere else they appear.
pub fn fusion_dropout(
    batch: &mut [Mat],
    num_classes: usize,
    p: f64,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Vec<bool> {
    let mask = fusion_dropout_mask(batch.len(), p, phase, rng);
    for (rows, &drop) in batch.iter_mut().zip(&mask) {
        if !drop {
            continue;
        }
        assert!(rows.cols >= num_classes);
        let start = rows.cols - num_classes;
        for r in 0..rows.rows {
            rows.row_mut(r)[start..].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::check_gradients;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    fn tiny_cfg() -> RefinerConfig {
        RefinerConfig {
            num_classes: 2,
            pre_pool: vec![8, 8, 16],
            post_pool: vec![12, 12],
            dropout: 0.1,
            fg_iou: 0.25,
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_rows(n: usize, cols: usize, seed: u64) -> Mat {
        let mut r = rng(seed);
        let mut m = Mat::zeros(n, cols);
        m.data.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
        m
    }

    fn random_box(r: &mut ChaCha8Rng) -> Box3D {
        Box3D::new(
            Vec3::new(r.gen_range(-2.0..2.0), r.gen_range(1.0..5.0), r.gen_range(0.2..1.0)),
            r.gen_range(0.4..1.5),
            r.gen_range(0.3..1.0),
            r.gen_range(0.3..1.2),
            r.gen_range(-PI..PI),
        )
    }

    #[test]
    fn widths_follow_config_exactly() {
        let mut r = rng(1);
        let cfg = RefinerConfig::default();
        let mut net = RefinerNet::new(cfg.clone(), &mut r);
        let mut shapes = Vec::new();
        net.visit(&mut |p| shapes.push((p.name.clone(), p.shape.clone())));
        assert_eq!(shapes[0], ("ref.pre.0.w".into(), vec![128, 12]));
        assert_eq!(shapes[2], ("ref.pre.1.w".into(), vec![128, 128]));
        assert_eq!(shapes[4], ("ref.pre.2.w".into(), vec![1024, 128]));
        assert_eq!(shapes[6], ("ref.post.0.w".into(), vec![512, 1024]));
        assert_eq!(shapes[8], ("ref.post.1.w".into(), vec![512, 512]));
        assert_eq!(shapes[10], ("ref.res.w".into(), vec![7, 512]));
        assert_eq!(shapes[12], ("ref.cls.w".into(), vec![4, 512]));
        assert_eq!(shapes[14], ("ref.iou.w".into(), vec![1, 512]));
    }

    #[test]
    fn forward_is_permutation_invariant_and_duplicate_stable() {
        let cfg = tiny_cfg();
        let mut net = RefinerNet::new(cfg.clone(), &mut rng(2));
        let rows = random_rows(8, 11, 3);
        let out = net.forward(&rows, 8, Phase::Test, &mut rng(0));

        // Reverse the rows of the single box.
        let mut rev = Mat::zeros(8, 11);
        for i in 0..8 {
            rev.row_mut(i).copy_from_slice(rows.row(7 - i));
        }
        let out_rev = net.forward(&rev, 8, Phase::Test, &mut rng(0));
        assert_eq!(out.residuals.data, out_rev.residuals.data);
        assert_eq!(out.iou_pred, out_rev.iou_pred);

        // Duplicate every row: the pooled feature cannot change.
        let mut dup = Mat::zeros(16, 11);
        for i in 0..16 {
            dup.row_mut(i).copy_from_slice(rows.row(i / 2));
        }
        let out_dup = net.forward(&dup, 16, Phase::Test, &mut rng(0));
        assert_eq!(out.residuals.data, out_dup.residuals.data);
        assert_eq!(out.class_logits.data, out_dup.class_logits.data);

        // Degenerate all-zero rows still produce finite outputs.
        let zeros = Mat::zeros(8, 11);
        let out_z = net.forward(&zeros, 8, Phase::Test, &mut rng(0));
        assert!(out_z.residuals.data.iter().all(|v| v.is_finite()));
        assert!(out_z.iou_pred.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn residual_application_identity_frame_and_clamp() {
        let bx = Box3D::new(Vec3::new(1.0, 2.0, 0.5), 1.0, 0.8, 0.6, 0.3);
        let zero = Residuals { center: [0.0; 3], extents: [0.0; 3], heading: 0.0 };
        assert_eq!(apply_residuals(&bx, &zero).params(), bx.params());

        // A canonical +x shift on a box headed at pi/2 moves the world +y.
        let bx = Box3D::new(Vec3::zero(), 1.0, 1.0, 1.0, PI / 2.0);
        let shifted = apply_residuals(
            &bx,
            &Residuals { center: [1.0, 0.0, 0.0], extents: [0.0; 3], heading: 0.0 },
        );
        assert!(shifted.center.dist(Vec3::new(0.0, 1.0, 0.0)) < 1e-12);

        // Extent shrink saturates at the floor.
        let shrunk = apply_residuals(
            &bx,
            &Residuals { center: [0.0; 3], extents: [-(1.0 - 0.005), 0.0, 0.0], heading: 0.0 },
        );
        assert_eq!(shrunk.l, MIN_EXTENT);
    }

    #[test]
    fn residual_round_trip_reproduces_targets() {
        let mut r = rng(5);
        for _ in 0..200 {
            let a = random_box(&mut r);
            let b = random_box(&mut r);
            let t = residual_targets(&a, &b);
            let moved = apply_residuals(&a, &t);
            assert!(moved.center.dist(b.center) < 1e-9);
            assert!((moved.l - b.l).abs() < 1e-9);
            assert!((moved.h - b.h).abs() < 1e-9);
            assert!((moved.w - b.w).abs() < 1e-9);
            assert!(wrap_angle(moved.yaw - b.yaw).abs() < 1e-9);
        }
    }

    #[test]
    fn iou_target_formula_and_flats() {
        assert!((iou_target(0.65) - 1.0).abs() < 1e-12);
        assert!((iou_target(0.15) - 0.0).abs() < 1e-12);
        assert!((iou_target(0.5) - 0.7).abs() < 1e-12);
        let mut prev = -1.0;
        for i in 0..=1000 {
            let iou = i as f64 / 1000.0;
            let y = iou_target(iou);
            assert!((0.0..=1.0).contains(&y));
            assert!(y >= prev);
            prev = y;
            if iou <= 0.15 {
                assert_eq!(y, 0.0);
            }
            if iou >= 0.65 {
                assert_eq!(y, 1.0);
            }
        }
    }

    #[test]
    fn loss_on_exact_proposal_and_empty_gt() {
        let cfg = tiny_cfg();
        let gb = Box3D::new(Vec3::new(0.0, 3.0, 0.4), 1.0, 0.8, 0.8, 0.2);
        let prop = Proposal::new(gb, 0.9, vec![0.5, 0.5]);
        let gt = vec![GtBox { box3: gb, class: 1 }];
        let batch = RefineBatch {
            residuals: Mat::zeros(1, 7),
            class_logits: Mat::zeros(1, 3),
            iou_logits: vec![0.0],
            iou_pred: vec![0.5],
        };
        let (parts, grads) = rcnn_loss(&[prop.clone()], &batch, &gt, &cfg);
        assert!(parts.box_reg.abs() < 1e-12, "zero residual targets for an exact match");
        assert!((parts.total - (parts.box_reg + parts.class + parts.iou)).abs() < 1e-12);
        assert_eq!(grads.matches[0], Some(0));
        assert!((grads.matched_iou[0] - 1.0).abs() < 1e-9);
        // IoU target is 1.0: BCE pushes the estimate up.
        assert!(grads.d_iou_logit[0] < 0.0);

        // Without GT everything is background and the IoU target is zero.
        let (parts, grads) = rcnn_loss(&[prop], &batch, &[], &cfg);
        assert_eq!(parts.box_reg, 0.0);
        assert!(parts.class > 0.0);
        assert!(grads.d_iou_logit[0] > 0.0);
        assert_eq!(grads.matches[0], None);
    }

    #[test]
    fn full_refiner_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let n_per_box = 6;
        let rows = random_rows(3 * n_per_box, 11, 7);
        let mut r = rng(8);
        let proposals: Vec<Proposal> = (0..3)
            .map(|_| Proposal::new(random_box(&mut r), 0.5, vec![0.5, 0.5]))
            .collect();
        let gt = vec![
            GtBox { box3: proposals[0].box3, class: 0 },
            GtBox { box3: random_box(&mut r), class: 1 },
        ];
        for seed in [11u64, 12] {
            let mut net = RefinerNet::new(cfg.clone(), &mut rng(seed));
            let rows = rows.clone();
            let proposals = proposals.clone();
            let gt = gt.clone();
            let mut loss = move |net: &mut RefinerNet| {
                // Re-seeded dropout keeps the loss deterministic per call.
                let mut drop_rng = rng(99);
                let batch = net.forward(&rows, n_per_box, Phase::Train, &mut drop_rng);
                let (parts, grads) = rcnn_loss(&proposals, &batch, &gt, &net.cfg.clone());
                let _ = net.backward(&grads.d_res, &grads.d_cls, &grads.d_iou_logit);
                parts.total
            };
            let report = check_gradients(&mut net, &mut loss, 1e-5, 4);
            assert!(
                report.max_rel_err < 1e-4,
                "seed {seed}: {} at {}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn backward_exposes_feature_row_gradients() {
        let cfg = tiny_cfg();
        let mut net = RefinerNet::new(cfg.clone(), &mut rng(13));
        let rows = random_rows(12, 11, 14);
        let batch = net.forward(&rows, 6, Phase::Test, &mut rng(0));
        let mut d_res = Mat::zeros(2, 7);
        d_res.data.iter_mut().for_each(|v| *v = 0.3);
        let d_cls = Mat::zeros(2, 3);
        let d_rows = net.backward(&d_res, &d_cls, &[0.0, 0.0]);
        assert_eq!((d_rows.rows, d_rows.cols), (12, 11));
        assert!(d_rows.data.iter().any(|&v| v != 0.0), "gradients must reach the rows");
        let _ = batch;
    }

    #[test]
    fn detections_score_class_prob_times_iou() {
        let boxes = vec![Box3D::new(Vec3::zero(), 1.0, 1.0, 1.0, 0.0)];
        let mut class_logits = Mat::zeros(1, 3);
        class_logits.row_mut(0).copy_from_slice(&[2.0, 0.0, -1.0]);
        let batch = RefineBatch {
            residuals: Mat::zeros(1, 7),
            class_logits,
            iou_logits: vec![0.0],
            iou_pred: vec![0.8],
        };
        let dets = to_detections(&boxes, &batch, 2);
        assert_eq!(dets[0].class, 0);
        let mut probs = vec![2.0, 0.0, -1.0];
        softmax_in_place(&mut probs);
        assert!((dets[0].score - probs[0] * 0.8).abs() < 1e-12);
    }

    #[test]
    fn fusion_dropout_rates_and_phases() {
        // p = 0 never drops; p = 1 always drops; inference never drops.
        let mut r = rng(21);
        assert!(fusion_dropout_mask(100, 0.0, Phase::Train, &mut r).iter().all(|&d| !d));
        assert!(fusion_dropout_mask(100, 1.0, Phase::Train, &mut r).iter().all(|&d| d));
        assert!(fusion_dropout_mask(100, 1.0, Phase::Test, &mut r).iter().all(|&d| !d));

        // Monte-Carlo frequency at p = 0.5.
        let mask = fusion_dropout_mask(10_000, 0.5, Phase::Train, &mut r);
        let rate = mask.iter().filter(|&&d| d).count() as f64 / mask.len() as f64;
        assert!((rate - 0.5).abs() < 0.02, "drop rate {rate}");

        // The batch variant zeroes exactly the trailing class block.
        let mut batch: Vec<Mat> = (0..50).map(|i| random_rows(4, 11, 100 + i)).collect();
        let originals = batch.clone();
        let mask = fusion_dropout(&mut batch, 2, 1.0, Phase::Train, &mut r);
        assert!(mask.iter().all(|&d| d));
        for (rows, orig) in batch.iter().zip(&originals) {
            for t in 0..rows.rows {
                assert_eq!(&rows.row(t)[..9], &orig.row(t)[..9]);
                assert!(rows.row(t)[9..].iter().all(|&v| v == 0.0));
            }
        }
    }
}
