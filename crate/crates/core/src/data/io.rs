//! On-disk formats. A scene file is one JSON document: a small header plus
//! the RGB and depth planes as base64-encoded little-endian f32. Detections
//! are a plain JSON list. Loading re-derives the cloud and label map, so a
//! save/load round trip reproduces the scene bit for bit.

use super::{GtBox, Scene};
use crate::{Box3D, Detection, Error, Intrinsics, Pose, Result};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SceneFile {
    version: u32,
    classes: u32,
    width: u32,
    height: u32,
    /// fx, fy, cx, cy.
    intrinsics: [f64; 4],
    pose_r: [[f64; 3]; 3],
    pose_t: [f64; 3],
    boxes: Vec<BoxEntry>,
    rgb: String,
    depth: String,
}

#[derive(Serialize, Deserialize)]
struct BoxEntry {
    /// cx, cy, cz, l, h, w, yaw.
    #[serde(rename = "box")]
    params: [f64; 7],
    class: u32,
}

#[derive(Serialize, Deserialize)]
struct DetEntry {
    #[serde(rename = "box")]
    params: [f64; 7],
    class: u32,
    score: f64,
}

fn encode_f32(data: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f32(text: &str, expect: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::Format(format!("bad base64 in {what} plane: {e}")))?;
    if bytes.len() != expect * 4 {
        return Err(Error::Format(format!(
            "{what} plane holds {} bytes, expected {}",
            bytes.len(),
            expect * 4
        )));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    let file = SceneFile {
        version: SCENE_FORMAT_VERSION,
        classes: scene.num_classes,
        width: scene.width as u32,
        height: scene.height as u32,
        intrinsics: [
            scene.intrinsics.fx,
            scene.intrinsics.fy,
            scene.intrinsics.cx,
            scene.intrinsics.cy,
        ],
        pose_r: scene.pose.r,
        pose_t: scene.pose.t,
        boxes: scene
            .boxes
            .iter()
            .map(|g| BoxEntry { params: g.box3.params(), class: g.class })
            .collect(),
        rgb: encode_f32(&scene.rgb),
        depth: encode_f32(&scene.depth),
    };
    let text = serde_json::to_string(&file).expect("scene serialization cannot fail");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SceneFile =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if file.version != SCENE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported scene version {} in {}",
            file.version,
            path.display()
        )));
    }
    let (w, h) = (file.width as usize, file.height as usize);
    if w < 1 || h < 1 {
        return Err(Error::Format("degenerate image size".into()));
    }
    let rgb = decode_f32(&file.rgb, w * h * 3, "rgb")?;
    let depth = decode_f32(&file.depth, w * h, "depth")?;
    let [fx, fy, cx, cy] = file.intrinsics;
    let k = Intrinsics { fx, fy, cx, cy, width: file.width, height: file.height };
    let pose = Pose { r: file.pose_r, t: file.pose_t };
    let mut boxes = Vec::with_capacity(file.boxes.len());
    for e in &file.boxes {
        if e.params[3] <= 0.0 || e.params[4] <= 0.0 || e.params[5] <= 0.0 {
            return Err(Error::Format("ground-truth box with non-positive extent".into()));
        }
        if e.class >= file.classes {
            return Err(Error::Format(format!(
                "box class {} out of range for {} classes",
                e.class, file.classes
            )));
        }
        boxes.push(GtBox { box3: Box3D::from_params(e.params), class: e.class });
    }
    Ok(Scene::assemble(w, h, file.classes, rgb, depth, k, pose, boxes))
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let entries: Vec<DetEntry> = dets
        .iter()
        .map(|d| DetEntry { params: d.box3.params(), class: d.class, score: d.score })
        .collect();
    let text = serde_json::to_string(&entries).expect("detection serialization cannot fail");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<DetEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    entries
        .into_iter()
        .map(|e| {
            if e.params[3] <= 0.0 || e.params[4] <= 0.0 || e.params[5] <= 0.0 {
                return Err(Error::Format("detection with non-positive extent".into()));
            }
            Ok(Detection { box3: Box3D::from_params(e.params), class: e.class, score: e.score })
        })
        .collect()
}

/// All `*.json` files in a directory, sorted by name for determinism.
pub fn listed_files(dir: &Path, extension: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().map(|e| e == extension).unwrap_or(false) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
