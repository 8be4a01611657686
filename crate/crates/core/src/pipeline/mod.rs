//! Cascade orchestration: the stage grammar, the model bundle with
//! checkpointing, recursive inference with cross-iteration box ensembling,
//! and the joint training loop.

mod infer;
mod train;

pub use infer::{evaluate, run_cascade, CascadeOutput, EvalOutcome, IterTrace};
pub use train::{train, train_in_place, LossBreakdown, TrainReport};

use crate::data::DataConfig;
use crate::data::Scene;
use crate::derive_seed;
use crate::geom3d::nms3d;
use crate::nncore::{load_checkpoint, save_checkpoint, ParamSource, ParamTensor};
use crate::proposer::{Proposer, ProposerConfig, SaConfig};
use crate::refiner::{RefinerConfig, RefinerNet};
use crate::seg2d::{HeadPolicy, SegConfig, SegNet};
use crate::{Detection, Error, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// Sub-seed namespaces; every random decision derives from the master seed
/// through one of these tags so runs are reproducible and stages decorrelate.
pub mod seeds {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const FUSION_DROP: u64 = 4;
    pub const MAP: u64 = 5;
    pub const ROI: u64 = 6;
    pub const HEAD_DROP: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const DATA: u64 = 9;
    pub const CLOUD: u64 = 10;
}

/// IoU threshold for the final reduction of the pooled per-iteration boxes.
pub const ENSEMBLE_NMS_IOU: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageTag {
    /// 2D segmentation over plain RGB-D, before any 3D stage.
    #[serde(rename = "SEG2D_INITIAL")]
    Seg2dInitial,
    /// Voting-based 3D proposals.
    #[serde(rename = "PROPOSE_3D")]
    Propose3d,
    /// 2D segmentation over the 3D-to-2D fusion map.
    #[serde(rename = "SEG2D_FUSED")]
    Seg2dFused,
    /// Point-based box refinement fed with the 2D distributions.
    #[serde(rename = "REFINE_3D")]
    Refine3d,
}

/// Optimization schedule for joint training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fractions of total epochs after which the rate drops by `lr_drop_factor`.
    pub lr_drop_fracs: Vec<f64>,
    pub lr_drop_factor: f64,
    /// Decoupled weight decay for the 3D networks (proposer + refiner).
    pub weight_decay_3d: f64,
    /// Decoupled weight decay for the 2D segmenter.
    pub weight_decay_2d: f64,
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            epochs: 24,
            batch_size: 8,
            lr: 5e-4,
            lr_drop_fracs: vec![2.0 / 3.0, 7.0 / 8.0],
            lr_drop_factor: 0.1,
            weight_decay_3d: 0.01,
            weight_decay_2d: 1e-4,
            grad_clip: 10.0,
        }
    }
}

/// Full cascade description: stage sequence, feature budgets, head policy,
/// and the training schedule. Everything random keys off `seed`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub stages: Vec<StageTag>,
    pub recursion_iters: usize,
    /// Scene point budget: clouds larger than this are uniformly subsampled
    /// (once per scene visit) before painting, map building, and ROI
    /// gathering. Smaller clouds pass through unchanged.
    pub n_cloud_points: usize,
    /// Points sampled per enlarged box for the refinement rows.
    pub n_points_per_roi: usize,
    /// Points projected per proposal when building the fusion map.
    pub map_points_per_box: usize,
    /// Multiplicative box enlargement for refinement context.
    pub enlargement: f64,
    /// Probability of zeroing a sample's 2D block end-to-end at train time.
    pub fusion_dropout_p: f64,
    pub head_policy: HeadPolicy,
    /// Replace every 2D stage output with the GT one-hot map (refinement
    /// sanity checks); no segmenter is built or trained.
    pub oracle_seg: bool,
    /// Geometric + photometric augmentation during training.
    pub augment: bool,
    pub seed: u64,
    pub proposer: ProposerConfig,
    /// Segmenter trunk widths.
    pub seg_widths: [usize; 4],
    pub lambda_aux: f64,
    pub refiner: RefinerConfig,
    pub optim: OptimConfig,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            stages: stage_sequence(1, false, true),
            recursion_iters: 1,
            n_cloud_points: 20_000,
            n_points_per_roi: 512,
            map_points_per_box: 512,
            enlargement: 1.2,
            fusion_dropout_p: 0.5,
            head_policy: HeadPolicy::default(),
            oracle_seg: false,
            augment: true,
            seed: 0,
            proposer: ProposerConfig::default(),
            seg_widths: [16, 32, 32, 64],
            lambda_aux: 0.4,
            refiner: RefinerConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

/// Builds the stage list for `r` cascade iterations, optionally with the
/// leading RGB-D segmentation pass, optionally without the fused 2D stage
/// (the pure two-stage 3D ablation).
pub fn stage_sequence(r: usize, initial_2d: bool, fused_2d: bool) -> Vec<StageTag> {
    let mut stages = Vec::new();
    if initial_2d {
        stages.push(StageTag::Seg2dInitial);
    }
    for _ in 0..r {
        stages.push(StageTag::Propose3d);
        if fused_2d {
            stages.push(StageTag::Seg2dFused);
        }
        stages.push(StageTag::Refine3d);
    }
    stages
}

impl CascadeConfig {
    pub fn num_classes(&self) -> usize {
        self.proposer.num_classes
    }

    /// Training profile sized for a single CPU core: the layer widths and
    /// point budgets shrink, the structure stays identical.
    pub fn desk(num_classes: usize, seed: u64) -> CascadeConfig {
        CascadeConfig {
            seed,
            n_cloud_points: 4096,
            n_points_per_roi: 32,
            map_points_per_box: 256,
            proposer: ProposerConfig {
                num_classes,
                sa1: SaConfig { n_centers: 512, radius: 0.3, k: 16, widths: vec![64, 64] },
                sa2: SaConfig { n_centers: 128, radius: 0.6, k: 16, widths: vec![64, 128] },
                vote_widths: vec![128],
                n_proposals: 32,
                cluster_radius: 0.3,
                cluster_k: 16,
                cluster_widths: vec![128, 128],
                ..ProposerConfig::default()
            },
            seg_widths: [8, 12, 12, 16],
            refiner: RefinerConfig {
                num_classes,
                pre_pool: vec![32, 32, 128],
                post_pool: vec![64, 64],
                ..RefinerConfig::default()
            },
            optim: OptimConfig { epochs: 32, batch_size: 4, ..OptimConfig::default() },
            ..CascadeConfig::default()
        }
    }

    /// Rewrites the stage list (and `recursion_iters`) while keeping all
    /// numeric settings.
    pub fn with_stages(mut self, r: usize, initial_2d: bool, fused_2d: bool) -> CascadeConfig {
        self.stages = stage_sequence(r, initial_2d, fused_2d);
        self.recursion_iters = r;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<CascadeConfig> {
        let cfg: CascadeConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the stage grammar — optional leading SEG2D_INITIAL, then R
    /// groups of PROPOSE_3D, optional SEG2D_FUSED, REFINE_3D — plus numeric
    /// ranges, and returns the parsed plan.
    pub fn validate(&self) -> Result<CascadePlan> {
        fn bad(msg: impl Into<String>) -> Error {
            Error::Config(msg.into())
        }
        if self.recursion_iters < 1 {
            return Err(bad("recursion_iters must be >= 1"));
        }
        if self.n_cloud_points < 1 || self.n_points_per_roi < 1 || self.map_points_per_box < 1 {
            return Err(bad("point budgets must be >= 1"));
        }
        if self.enlargement < 1.0 {
            return Err(bad(format!("enlargement must be >= 1, got {}", self.enlargement)));
        }
        if !(0.0..=1.0).contains(&self.fusion_dropout_p) {
            return Err(bad("fusion_dropout_p must lie in [0, 1]"));
        }
        if self.proposer.num_classes != self.refiner.num_classes {
            return Err(bad(format!(
                "class count mismatch: proposer {} vs refiner {}",
                self.proposer.num_classes, self.refiner.num_classes
            )));
        }
        if self.proposer.num_classes == 0 {
            return Err(bad("num_classes must be >= 1"));
        }
        let o = &self.optim;
        if o.epochs < 1 || o.batch_size < 1 {
            return Err(bad("optimizer epochs and batch_size must be >= 1"));
        }
        if !(o.lr > 0.0) || !(o.grad_clip > 0.0) {
            return Err(bad("lr and grad_clip must be positive"));
        }
        if o.lr_drop_fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(bad("lr_drop_fracs must lie in [0, 1]"));
        }

        let mut rest = self.stages.as_slice();
        let initial_2d = matches!(rest.first(), Some(StageTag::Seg2dInitial));
        if initial_2d {
            rest = &rest[1..];
        }
        let mut fused = Vec::new();
        loop {
            match rest {
                [] => break,
                [StageTag::Propose3d, StageTag::Seg2dFused, StageTag::Refine3d, tail @ ..] => {
                    fused.push(true);
                    rest = tail;
                }
                [StageTag::Propose3d, StageTag::Refine3d, tail @ ..] => {
                    fused.push(false);
                    rest = tail;
                }
                _ => {
                    return Err(bad(
                        "stages must be an optional SEG2D_INITIAL followed by groups of \
                         PROPOSE_3D, optional SEG2D_FUSED, REFINE_3D",
                    ))
                }
            }
        }
        if fused.is_empty() {
            return Err(bad("stages must contain at least one PROPOSE_3D/REFINE_3D group"));
        }
        if fused.len() != self.recursion_iters {
            return Err(bad(format!(
                "stages describe {} iterations but recursion_iters is {}",
                fused.len(),
                self.recursion_iters
            )));
        }
        Ok(CascadePlan { initial_2d, fused })
    }
}

/// Parsed stage sequence: whether the cascade opens with an RGB-D-only 2D
/// pass, and per iteration whether the fused 2D stage runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CascadePlan {
    pub initial_2d: bool,
    pub fused: Vec<bool>,
}

impl CascadePlan {
    pub fn iters(&self) -> usize {
        self.fused.len()
    }

    /// True when any stage consumes or produces 2D predictions.
    pub fn has_2d(&self) -> bool {
        self.initial_2d || self.fused.iter().any(|&f| f)
    }
}

/// The trainable bundle: proposer, optional segmenter, refiner, plus the
/// config and parsed plan they were built from.
pub struct Models {
    pub cfg: CascadeConfig,
    pub plan: CascadePlan,
    pub proposer: Proposer,
    /// Absent for 3D-only cascades and for the GT-oracle segmenter.
    pub seg: Option<SegNet>,
    pub refiner: RefinerNet,
}

impl Models {
    pub fn new(cfg: CascadeConfig) -> Result<Models> {
        let plan = cfg.validate()?;
        let c = cfg.num_classes();
        let mut rng_p = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[seeds::INIT, 1]));
        let proposer = Proposer::new(cfg.proposer.clone(), &mut rng_p);
        let seg = (plan.has_2d() && !cfg.oracle_seg).then(|| {
            let mut rng_s = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[seeds::INIT, 2]));
            let seg_cfg = SegConfig {
                num_classes: c,
                in_channels: c + 13,
                widths: cfg.seg_widths,
                lambda_aux: cfg.lambda_aux,
            };
            SegNet::new(seg_cfg, &mut rng_s)
        });
        let mut rng_r = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[seeds::INIT, 3]));
        let refiner = RefinerNet::new(cfg.refiner.clone(), &mut rng_r);
        Ok(Models { cfg, plan, proposer, seg, refiner })
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.json");
        std::fs::write(&cfg_path, self.cfg.to_json()).map_err(|e| Error::io(cfg_path, e))?;
        save_checkpoint(&dir.join("proposer.ckpt"), &mut self.proposer)?;
        save_checkpoint(&dir.join("refiner.ckpt"), &mut self.refiner)?;
        if let Some(seg) = &mut self.seg {
            save_checkpoint(&dir.join("seg.ckpt"), seg)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Models> {
        let cfg_path = dir.join("config.json");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(cfg_path, e))?;
        let cfg = CascadeConfig::from_json(&text)?;
        let mut models = Models::new(cfg)?;
        load_checkpoint(&dir.join("proposer.ckpt"), &mut models.proposer)?;
        load_checkpoint(&dir.join("refiner.ckpt"), &mut models.refiner)?;
        if let Some(seg) = &mut models.seg {
            load_checkpoint(&dir.join("seg.ckpt"), seg)?;
        }
        Ok(models)
    }
}

impl ParamSource for Models {
    fn visit(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        self.proposer.visit(f);
        if let Some(seg) = &mut self.seg {
            seg.visit(f);
        }
        self.refiner.visit(f);
    }
}

/// Per-class 3D NMS over the pooled detections; output sorted by descending
/// score (ties by class then insertion order) for stable downstream files.
pub fn nms_per_class(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let classes: BTreeSet<u32> = dets.iter().map(|d| d.class).collect();
    let mut out: Vec<Detection> = Vec::new();
    for cls in classes {
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == cls).collect();
        let boxes: Vec<crate::Box3D> = idx.iter().map(|&i| dets[i].box3).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| dets[i].score).collect();
        for k in nms3d(&boxes, &scores, iou_thresh) {
            out.push(dets[idx[k]].clone());
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class.cmp(&b.class)));
    out
}

/// Deterministic synthetic dataset: scene i derives its seed from
/// (master seed, DATA tag, i), so prefixes agree across sizes.
pub fn gen_dataset(n: usize, seed: u64, cfg: &DataConfig) -> Vec<Scene> {
    (0..n)
        .map(|i| crate::data::synth_scene(derive_seed(seed, &[seeds::DATA, i as u64]), cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use StageTag::*;

    fn cfg_with(stages: Vec<StageTag>, r: usize) -> CascadeConfig {
        CascadeConfig { stages, recursion_iters: r, ..CascadeConfig::desk(3, 0) }
    }

    #[test]
    fn grammar_accepts_the_documented_configurations() {
        let plain = cfg_with(stage_sequence(1, false, true), 1);
        assert_eq!(
            plain.validate().unwrap(),
            CascadePlan { initial_2d: false, fused: vec![true] }
        );

        let with_initial = cfg_with(stage_sequence(3, true, true), 3);
        let plan = with_initial.validate().unwrap();
        assert!(plan.initial_2d);
        assert_eq!(plan.iters(), 3);

        let ablation = cfg_with(stage_sequence(2, false, false), 2);
        let plan = ablation.validate().unwrap();
        assert_eq!(plan.fused, vec![false, false]);
        assert!(!plan.has_2d());
    }

    #[test]
    fn grammar_rejects_malformed_sequences() {
        let bad: Vec<(Vec<StageTag>, usize)> = vec![
            (vec![], 1),
            (vec![Seg2dInitial], 1),
            (vec![Propose3d, Seg2dFused], 1),
            (vec![Propose3d, Refine3d, Seg2dFused], 1),
            (vec![Seg2dFused, Propose3d, Refine3d], 1),
            (vec![Seg2dInitial, Seg2dInitial, Propose3d, Refine3d], 1),
            (vec![Refine3d, Propose3d], 1),
            // Iteration count disagreeing with the stage list.
            (stage_sequence(1, false, true), 2),
            (stage_sequence(2, false, true), 1),
        ];
        for (stages, r) in bad {
            let cfg = cfg_with(stages.clone(), r);
            let err = cfg.validate().unwrap_err();
            assert_eq!(err.exit_code(), 2, "{stages:?} x{r} must be a config error");
        }
        let mut zero_r = cfg_with(stage_sequence(1, false, true), 1);
        zero_r.recursion_iters = 0;
        assert!(zero_r.validate().is_err());
    }

    #[test]
    fn config_json_round_trip_preserves_everything() {
        let cfg = CascadeConfig::desk(3, 42).with_stages(2, true, true);
        let text = cfg.to_json();
        let back = CascadeConfig::from_json(&text).unwrap();
        assert_eq!(back.to_json(), text);
        assert_eq!(back.stages, cfg.stages);
        assert_eq!(back.seed, 42);

        // Stage tags use the documented wire names.
        assert!(text.contains("SEG2D_INITIAL"));
        assert!(text.contains("PROPOSE_3D"));

        // Unknown or ungrammatical files are config errors.
        let err = CascadeConfig::from_json("{\"stages\": [\"PROPOSE_3D\"]}").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(CascadeConfig::from_json("not json").is_err());
    }

    #[test]
    fn models_checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CascadeConfig::desk(2, 7);
        let mut models = Models::new(cfg).unwrap();
        let mut before = Vec::new();
        models.visit(&mut |p| before.push((p.name.clone(), p.value.clone())));
        models.save(dir.path()).unwrap();

        let mut loaded = Models::load(dir.path()).unwrap();
        let mut after = Vec::new();
        loaded.visit(&mut |p| after.push((p.name.clone(), p.value.clone())));
        assert_eq!(before, after);
        assert!(loaded.seg.is_some());
        assert_eq!(loaded.cfg.seed, 7);
    }

    #[test]
    fn oracle_and_ablation_bundles_have_no_segmenter() {
        let oracle =
            CascadeConfig { oracle_seg: true, ..CascadeConfig::desk(3, 0) };
        assert!(Models::new(oracle).unwrap().seg.is_none());
        let no2d = CascadeConfig::desk(3, 0).with_stages(1, false, false);
        assert!(Models::new(no2d).unwrap().seg.is_none());
    }

    #[test]
    fn per_class_nms_keeps_classes_separate() {
        let b = crate::Box3D::new(crate::Vec3::new(0.0, 0.0, 0.0), 1.0, 1.0, 1.0, 0.0);
        let dets = vec![
            Detection { box3: b, class: 0, score: 0.9 },
            Detection { box3: b, class: 0, score: 0.8 }, // suppressed by the first
            Detection { box3: b, class: 1, score: 0.7 }, // different class survives
        ];
        let kept = nms_per_class(&dets, 0.25);
        assert_eq!(kept.len(), 2);
        assert_eq!((kept[0].class, kept[1].class), (0, 1));
    }

    #[test]
    fn dataset_generation_is_a_prefix_stable_function_of_the_seed() {
        let dc = DataConfig { width: 32, height: 24, ..DataConfig::default() };
        let a = gen_dataset(3, 5, &dc);
        let b = gen_dataset(4, 5, &dc);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.depth, y.depth);
            assert_eq!(x.boxes.len(), y.boxes.len());
        }
        let c = gen_dataset(3, 6, &dc);
        assert!(a[0].depth != c[0].depth || a[0].rgb != c[0].rgb);
    }

    /// Widths small enough that behavioral tests stay fast.
    fn tiny_cfg(num_classes: usize, seed: u64) -> CascadeConfig {
        use crate::proposer::SaConfig;
        let mut cfg = CascadeConfig::desk(num_classes, seed);
        cfg.proposer.sa1 = SaConfig { n_centers: 64, radius: 0.3, k: 8, widths: vec![16, 16] };
        cfg.proposer.sa2 = SaConfig { n_centers: 16, radius: 0.6, k: 8, widths: vec![16, 32] };
        cfg.proposer.vote_widths = vec![32];
        cfg.proposer.n_proposals = 8;
        cfg.proposer.cluster_widths = vec![32, 32];
        cfg.seg_widths = [6, 8, 8, 10];
        cfg.refiner.pre_pool = vec![16, 16, 64];
        cfg.refiner.post_pool = vec![32, 32];
        cfg.n_points_per_roi = 16;
        cfg.map_points_per_box = 64;
        cfg
    }

    fn tiny_scenes(n: usize, seed: u64) -> Vec<crate::data::Scene> {
        let dc = DataConfig { width: 32, height: 24, max_boxes: 3, ..DataConfig::default() };
        gen_dataset(n, seed, &dc)
    }

    #[test]
    fn cascade_inference_is_deterministic_with_valid_outputs() {
        let cfg = tiny_cfg(3, 11);
        let scene = &tiny_scenes(1, 3)[0];
        let mut models = Models::new(cfg.clone()).unwrap();
        let out = run_cascade(&mut models, scene, 99).unwrap();
        let out2 = run_cascade(&mut models, scene, 99).unwrap();

        assert_eq!(out.pooled.len(), cfg.proposer.n_proposals);
        assert_eq!(out.pooled, out2.pooled);
        assert_eq!(out.detections, out2.detections);
        assert!(out.detections.len() <= out.pooled.len());
        for d in &out.detections {
            assert!((0.0..=1.0).contains(&d.score));
            assert!((d.class as usize) < cfg.num_classes());
        }
        let labels = out.seg_labels.expect("fused stage predicts labels");
        assert_eq!(labels.len(), scene.width * scene.height);
        assert!(labels.iter().all(|&l| l <= 3));
        assert_eq!(out.iterations.len(), 1);
        assert!(out.iterations[0].segmap.is_some());
        assert!(out.initial_segmap.is_none());
    }

    #[test]
    fn recursion_pool_grows_by_appending_iterations() {
        let scene = &tiny_scenes(1, 8)[0];
        let mut pools: Vec<Vec<Detection>> = Vec::new();
        for r in [1usize, 2, 3] {
            let cfg = tiny_cfg(3, 21).with_stages(r, false, true);
            let mut models = Models::new(cfg).unwrap();
            let out = run_cascade(&mut models, scene, 4242).unwrap();
            assert_eq!(out.iterations.len(), r);
            pools.push(out.pooled);
        }
        for shorter in 0..2 {
            let a = &pools[shorter];
            let b = &pools[shorter + 1];
            assert_eq!(&b[..a.len()], &a[..], "pool of R must prefix the pool of R+1");
        }
    }

    #[test]
    fn ablated_cascade_runs_with_no_2d_predictions() {
        let cfg = tiny_cfg(3, 5).with_stages(2, false, false);
        let scene = &tiny_scenes(1, 1)[0];
        let mut models = Models::new(cfg).unwrap();
        let out = run_cascade(&mut models, scene, 7).unwrap();
        assert!(out.seg_labels.is_none());
        assert!(out.iterations.iter().all(|it| it.segmap.is_none()));
        assert_eq!(out.pooled.len(), 2 * 8);
    }

    #[test]
    fn initial_2d_stage_feeds_the_first_painting() {
        let cfg = tiny_cfg(2, 9).with_stages(1, true, true);
        let scene = &tiny_scenes(1, 2)[0];
        let scene = {
            // Rebuild at the matching class count.
            let dc = DataConfig {
                width: 32,
                height: 24,
                num_classes: 2,
                max_boxes: 3,
                ..DataConfig::default()
            };
            let _ = scene;
            gen_dataset(1, 2, &dc).remove(0)
        };
        let mut models = Models::new(cfg).unwrap();
        let out = run_cascade(&mut models, &scene, 3).unwrap();
        assert!(out.initial_segmap.is_some());
        assert_eq!(out.iterations.len(), 1);
    }

    #[test]
    fn training_is_deterministic_and_reports_part_sums() {
        let mut cfg = tiny_cfg(3, 31);
        cfg.optim = OptimConfig { epochs: 2, batch_size: 4, ..OptimConfig::default() };
        let scenes = tiny_scenes(6, 17);

        let (mut m1, r1) = train(&scenes, &cfg).unwrap();
        let (mut m2, r2) = train(&scenes, &cfg).unwrap();
        assert_eq!(r1.step_losses, r2.step_losses, "fixed seed must fix the loss curve");
        assert!(r1.step_losses.iter().all(|l| l.is_finite()));

        let fb = &r1.first_batch;
        assert!((fb.total - (fb.rpn + fb.seg + fb.rcnn)).abs() < 1e-12);

        let mut w1 = Vec::new();
        let mut w2 = Vec::new();
        m1.visit(&mut |p| w1.extend_from_slice(&p.value));
        m2.visit(&mut |p| w2.extend_from_slice(&p.value));
        assert_eq!(w1, w2, "trained weights must match bitwise");

        // Evaluation is a pure function of models and data.
        let test_scenes = tiny_scenes(2, 99);
        let e1 = evaluate(&mut m1, &test_scenes).unwrap();
        let e2 = evaluate(&mut m2, &test_scenes).unwrap();
        assert_eq!(e1.report.to_json(), e2.report.to_json());
        assert!(e1.seg_scored);
        assert_eq!(e1.report.mean_ap_per_threshold.len(), 15);
    }

    /// Long-running dry run of the desk profile at reduced scale; run
    /// explicitly with `cargo test -- --ignored` when tuning the profile.
    #[test]
    #[ignore]
    fn desk_profile_training_smoke() {
        let t0 = std::time::Instant::now();
        let cfg = CascadeConfig::desk(3, 1);
        let dc = DataConfig::default();
        let train_scenes = gen_dataset(500, 100, &dc);
        let test_scenes = gen_dataset(100, 200, &dc);
        let (mut models, report) = train(&train_scenes, &cfg).unwrap();
        for (e, p) in report.epoch_parts.iter().enumerate() {
            println!(
                "epoch {e:>2}: rpn {:.4} seg {:.4} rcnn {:.4} total {:.4}",
                p.rpn, p.seg, p.rcnn, p.total
            );
        }
        println!(
            "first batch: rpn {:.4} seg {:.4} rcnn {:.4} total {:.4}",
            report.first_batch.rpn,
            report.first_batch.seg,
            report.first_batch.rcnn,
            report.first_batch.total
        );
        let out = evaluate(&mut models, &test_scenes).unwrap();
        println!(
            "mAP(0.25:0.95) {:.4}  mAP@0.25 {:.4}  miou {:.4}  prop iou {:.4} refined iou {:.4}",
            out.report.map_range,
            out.report.mean_ap_per_threshold["0.25"],
            out.report.miou,
            out.mean_proposal_iou,
            out.mean_refined_iou
        );
        println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
    }

    #[test]
    fn oracle_segmenter_training_never_degrades_boxes() {
        // GT one-hot 2D inputs, fusion dropout off: after training, refined
        // boxes must match ground truth at least as well as the proposals
        // they came from.
        let mut cfg = tiny_cfg(3, 7);
        cfg.oracle_seg = true;
        cfg.fusion_dropout_p = 0.0;
        cfg.augment = false;
        cfg.optim = OptimConfig { epochs: 8, batch_size: 8, ..OptimConfig::default() };
        let train_scenes = tiny_scenes(32, 51);
        let test_scenes = tiny_scenes(10, 52);

        let (mut models, report) = train(&train_scenes, &cfg).unwrap();
        assert!(
            report.final_epoch_mean < report.epoch_means[0],
            "training must reduce the loss: {:?}",
            report.epoch_means
        );
        let out = evaluate(&mut models, &test_scenes).unwrap();
        assert!(
            out.mean_refined_iou >= out.mean_proposal_iou,
            "refined {} vs proposals {}",
            out.mean_refined_iou,
            out.mean_proposal_iou
        );
    }
}
