//! Command-line front end: dataset generation, training, inference, metric
//! reports, and PPM visualization. Every subcommand is a thin shell around
//! the library so results match in-process calls exactly.

use crate::data::io::{
    listed_files, load_detections, load_scene, save_detections, save_scene,
};
use crate::data::{DataConfig, Scene};
use crate::eval::{ConfusionMatrix, Report};
use crate::pipeline::{evaluate, gen_dataset, seeds, train, CascadeConfig, Models};
use crate::render::{class_color, Canvas};
use crate::{derive_seed, Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "cascade3d", version, about = "Multi-stage RGB-D 3D detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic RGB-D scene dataset.
    GenData(GenDataArgs),
    /// Train the cascade on a scene directory.
    Train(TrainArgs),
    /// Run the trained cascade on saved scenes.
    Infer(InferArgs),
    /// Score detections (and optional 2D label maps) against ground truth.
    Eval(EvalArgs),
    /// Draw a scene with box wireframes into a PPM image.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long)]
    scenes: usize,
    /// Master seed; scene i is a pure function of (seed, i).
    #[arg(long)]
    seed: u64,
    /// Number of object classes.
    #[arg(long)]
    classes: u32,
    /// Image width in pixels.
    #[arg(long, default_value_t = 128)]
    width: u32,
    /// Image height in pixels.
    #[arg(long, default_value_t = 96)]
    height: u32,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of scene JSON files.
    #[arg(long)]
    data: PathBuf,
    /// Cascade configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Optional held-out scene directory to score after training.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Where to write the evaluation report (requires --eval-data).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint directory produced by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Single scene file (use --data for a directory).
    #[arg(long, conflicts_with = "data")]
    scene: Option<PathBuf>,
    /// Scene directory; detections are written per scene.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Detection output: a file with --scene, a directory with --data.
    #[arg(long)]
    out: PathBuf,
    /// Scene index used for seed derivation in single-scene mode, so the
    /// result matches the same scene inside a directory run.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Also write predicted 2D label maps (file or directory, like --out).
    #[arg(long)]
    segs_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of detection JSON files (sorted order pairs with --gt).
    #[arg(long)]
    dets: PathBuf,
    /// Directory of ground-truth scene files.
    #[arg(long)]
    gt: PathBuf,
    /// Report output path.
    #[arg(long)]
    report: PathBuf,
    /// Optional directory of predicted 2D label maps for the mIoU section.
    #[arg(long)]
    segs: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Scene file; ground-truth boxes are drawn in white.
    #[arg(long)]
    scene: PathBuf,
    /// Optional detection file; boxes are drawn in their class colors.
    #[arg(long)]
    dets: Option<PathBuf>,
    /// Optional alpha for shading pixels by ground-truth class.
    #[arg(long)]
    label_alpha: Option<f64>,
    /// Output PPM path.
    #[arg(long)]
    out: PathBuf,
}

/// Saved 2D prediction: one label per pixel, row-major.
#[derive(Debug, Serialize, Deserialize)]
struct LabelFile {
    width: usize,
    height: usize,
    num_classes: u32,
    labels: Vec<u32>,
}

/// Parses argv and runs one subcommand, translating failures into process
/// exit codes (0 ok, 2 bad configuration or usage, 3 I/O or bad file).
pub fn main() -> i32 {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(a) => gen_data(&a),
        Cmd::Train(a) => run_train(&a),
        Cmd::Infer(a) => run_infer(&a),
        Cmd::Eval(a) => run_eval(&a),
        Cmd::Render(a) => run_render(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn scene_name(i: usize) -> String {
    format!("scene_{i:04}.json")
}

fn det_name(i: usize) -> String {
    format!("dets_{i:04}.json")
}

fn seg_name(i: usize) -> String {
    format!("segs_{i:04}.json")
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_scene_dir(dir: &Path) -> Result<Vec<Scene>> {
    let files = listed_files(dir, "json")?;
    if files.is_empty() {
        return Err(Error::Config(format!("no scene files in {}", dir.display())));
    }
    files.iter().map(|p| load_scene(p)).collect()
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.scenes == 0 {
        return Err(Error::Config("--scenes must be at least 1".into()));
    }
    if a.classes == 0 {
        return Err(Error::Config("--classes must be at least 1".into()));
    }
    if a.width < 4 || a.height < 4 {
        return Err(Error::Config("images must be at least 4x4".into()));
    }
    make_dir(&a.out)?;
    let dc = DataConfig {
        num_classes: a.classes,
        width: a.width,
        height: a.height,
        ..DataConfig::default()
    };
    for (i, scene) in gen_dataset(a.scenes, a.seed, &dc).iter().enumerate() {
        save_scene(&a.out.join(scene_name(i)), scene)?;
    }
    println!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    if a.report.is_some() && a.eval_data.is_none() {
        return Err(Error::Config("--report needs --eval-data".into()));
    }
    let text = fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let cfg = CascadeConfig::from_json(&text)?;
    let scenes = load_scene_dir(&a.data)?;
    let (mut models, train_report) = train(&scenes, &cfg)?;
    models.save(&a.out)?;
    let tr_path = a.out.join("train_report.json");
    let tr_json = serde_json::to_string_pretty(&train_report)
        .expect("train report serialization cannot fail");
    fs::write(&tr_path, tr_json).map_err(|e| Error::io(tr_path, e))?;
    println!(
        "trained {} epochs, final epoch mean loss {:.4}",
        train_report.epoch_means.len(),
        train_report.final_epoch_mean
    );
    if let Some(eval_dir) = &a.eval_data {
        let test_scenes = load_scene_dir(eval_dir)?;
        let outcome = evaluate(&mut models, &test_scenes)?;
        let path =
            a.report.clone().unwrap_or_else(|| a.out.join("report.json"));
        fs::write(&path, outcome.report.to_json()).map_err(|e| Error::io(&path, e))?;
        println!(
            "eval: mAP(0.25:0.95) {:.4}  mIoU {:.4}",
            outcome.report.map_range, outcome.report.miou
        );
    }
    Ok(())
}

fn write_labels(path: &Path, scene: &Scene, labels: &[u32]) -> Result<()> {
    let file = LabelFile {
        width: scene.width,
        height: scene.height,
        num_classes: scene.num_classes,
        labels: labels.to_vec(),
    };
    let text = serde_json::to_string(&file).expect("label serialization cannot fail");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_labels(path: &Path) -> Result<LabelFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: LabelFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if file.labels.len() != file.width * file.height {
        return Err(Error::Format(format!(
            "{}: {} labels for a {}x{} image",
            path.display(),
            file.labels.len(),
            file.width,
            file.height
        )));
    }
    Ok(file)
}

fn run_infer(a: &InferArgs) -> Result<()> {
    let mut models = Models::load(&a.ckpt)?;
    let master = models.cfg.seed;
    // (scene, detection sink, label sink, seed index)
    let jobs: Vec<(PathBuf, PathBuf, Option<PathBuf>, usize)> = match (&a.scene, &a.data) {
        (Some(file), None) => {
            vec![(file.clone(), a.out.clone(), a.segs_out.clone(), a.index)]
        }
        (None, Some(dir)) => {
            make_dir(&a.out)?;
            if let Some(d) = &a.segs_out {
                make_dir(d)?;
            }
            listed_files(dir, "json")?
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    let segs = a.segs_out.as_ref().map(|d| d.join(seg_name(i)));
                    (p, a.out.join(det_name(i)), segs, i)
                })
                .collect()
        }
        _ => return Err(Error::Config("pass exactly one of --scene or --data".into())),
    };
    if jobs.is_empty() {
        return Err(Error::Config("no scene files to process".into()));
    }

    for (scene_path, det_path, seg_path, index) in &jobs {
        let scene = load_scene(scene_path)?;
        let seed = derive_seed(master, &[seeds::EVAL, *index as u64]);
        let out = crate::pipeline::run_cascade(&mut models, &scene, seed)?;
        save_detections(det_path, &out.detections)?;
        if let Some(seg_path) = seg_path {
            match &out.seg_labels {
                Some(labels) => write_labels(seg_path, &scene, labels)?,
                None => {
                    return Err(Error::Config(
                        "this cascade has no 2D stage, so there are no label maps".into(),
                    ))
                }
            }
        }
    }
    println!("processed {} scene(s)", jobs.len());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let det_files = listed_files(&a.dets, "json")?;
    let gt_files = listed_files(&a.gt, "json")?;
    if det_files.len() != gt_files.len() || det_files.is_empty() {
        return Err(Error::Config(format!(
            "{} detection files vs {} ground-truth scenes",
            det_files.len(),
            gt_files.len()
        )));
    }
    let mut dets = Vec::with_capacity(det_files.len());
    let mut gts = Vec::with_capacity(gt_files.len());
    let mut num_classes = 0u32;
    let mut confusion_src = Vec::new();
    for (d, g) in det_files.iter().zip(&gt_files) {
        dets.push(load_detections(d)?);
        let scene = load_scene(g)?;
        num_classes = num_classes.max(scene.num_classes);
        gts.push(scene.boxes.clone());
        confusion_src.push(scene.seg_gt.labels);
    }
    let mut confusion = ConfusionMatrix::new(num_classes);
    if let Some(seg_dir) = &a.segs {
        let seg_files = listed_files(seg_dir, "json")?;
        if seg_files.len() != gt_files.len() {
            return Err(Error::Config(format!(
                "{} label maps vs {} scenes",
                seg_files.len(),
                gt_files.len()
            )));
        }
        for (s, gt_labels) in seg_files.iter().zip(&confusion_src) {
            let file = read_labels(s)?;
            if file.labels.len() != gt_labels.len() {
                return Err(Error::Format(format!(
                    "{}: label count differs from the paired scene",
                    s.display()
                )));
            }
            confusion.update(&file.labels, gt_labels);
        }
    }
    let report = Report::build(&dets, &gts, num_classes, &confusion);
    fs::write(&a.report, report.to_json()).map_err(|e| Error::io(&a.report, e))?;
    println!("mAP(0.25:0.95) {:.4}  mIoU {:.4}", report.map_range, report.miou);
    Ok(())
}

fn run_render(a: &RenderArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let mut canvas = Canvas::from_scene(&scene);
    if let Some(alpha) = a.label_alpha {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config("--label-alpha must be in [0, 1]".into()));
        }
        canvas.overlay_labels(&scene.seg_gt.labels, scene.num_classes, alpha);
    }
    for g in &scene.boxes {
        canvas.overlay_box(&g.box3, &scene.intrinsics, &scene.pose, [255, 255, 255]);
    }
    if let Some(det_path) = &a.dets {
        for d in load_detections(det_path)? {
            let color = class_color(d.class);
            canvas.overlay_box(&d.box3, &scene.intrinsics, &scene.pose, color);
        }
    }
    canvas.write_ppm(&a.out)
}
