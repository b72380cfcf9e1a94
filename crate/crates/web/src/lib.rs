//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers or strings and returns JSON, so the
//! page needs no generated type definitions. The `*_json` functions hold
//! the logic and are callable natively for tests.

use calib_core::camera::{camera_to_geometry, geometry_to_camera, horizon_boundaries, CameraParams};
use calib_core::eval::{auc, cumulative_curve, AUC_THRESHOLDS};
use calib_core::line::{classify_line, vp_distance, vp_threshold, LineSegment};
use calib_core::scene::{generate, manhattan_vps, GeneratorConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub type DemoResult = Result<String, String>;

#[derive(Serialize)]
struct SceneView {
    size: usize,
    /// Row-major grayscale in `[0, 255]`.
    pixels: Vec<u8>,
    lines: Vec<LineView>,
    /// Horizon crossings of the left and right image edges, normalized.
    horizon: [[f64; 2]; 2],
    zenith: [f64; 3],
    /// Pitch and roll recovered from the zenith and fov.
    recovered: [f64; 2],
}

#[derive(Serialize)]
struct LineView {
    p1: [f64; 2],
    p2: [f64; 2],
    class: u8,
}

#[derive(Serialize)]
struct LabelView {
    class: u8,
    name: &'static str,
    /// Angular distances to the zenith and the two horizontal VPs.
    distances: [f64; 3],
    threshold: f64,
}

#[derive(Serialize)]
struct AucView {
    thresholds: [f64; 3],
    auc: [f64; 3],
    curve: Vec<(f64, f64)>,
}

fn camera(pitch: f64, roll: f64, fov: f64) -> Result<CameraParams, String> {
    CameraParams::new(pitch, roll, fov).map_err(|e| e.to_string())
}

fn to_json(v: &impl Serialize) -> DemoResult {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Synthetic scene for a fixed camera, with its horizon and zenith.
pub fn scene_json(pitch: f64, roll: f64, fov: f64, lines: usize, seed: u64) -> DemoResult {
    let config = GeneratorConfig {
        pitch_range: (pitch, pitch),
        roll_range: (roll, roll),
        fov_range: (fov, fov),
        lines_per_image: lines,
        image_size: 128,
        ..GeneratorConfig::default()
    };
    let record = generate(&config, seed).map_err(|e| e.to_string())?;
    let (zenith, horizon) = camera_to_geometry(&record.camera).map_err(|e| e.to_string())?;
    let (left, right) = horizon_boundaries(&horizon).map_err(|e| e.to_string())?;
    let up = geometry_to_camera(&zenith, fov).map_err(|e| e.to_string())?;
    to_json(&SceneView {
        size: record.image.w,
        pixels: record.image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        lines: record
            .lines
            .iter()
            .zip(record.classes())
            .map(|(l, c)| LineView {
                p1: l.p1(),
                p2: l.p2(),
                class: c.index() as u8,
            })
            .collect(),
        horizon: [left, right],
        zenith: zenith.0,
        recovered: [up.pitch, up.roll],
    })
}

/// Pseudo-label of a user-drawn segment (normalized coordinates) under the
/// given camera.
pub fn classify_json(pitch: f64, roll: f64, fov: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> DemoResult {
    let cam = camera(pitch, roll, fov)?;
    let vps = manhattan_vps(&cam).map_err(|e| e.to_string())?;
    let seg = LineSegment::new([x1, y1], [x2, y2]).map_err(|e| e.to_string())?;
    let line = seg.line();
    let labels = classify_line(&line, &vps, vp_threshold()).map_err(|e| e.to_string())?;
    let dist = |v: &[f64; 3]| vp_distance(&line, v).map(|d| d.clamp(-1.0, 1.0).asin().to_degrees());
    let distances = [
        dist(&vps.zenith).map_err(|e| e.to_string())?,
        dist(&vps.horizontal[0]).map_err(|e| e.to_string())?,
        dist(&vps.horizontal[1]).map_err(|e| e.to_string())?,
    ];
    let class = labels.class.index() as u8;
    to_json(&LabelView {
        class,
        name: ["other", "horizontal", "vertical"][class as usize],
        distances,
        threshold: vp_threshold().asin().to_degrees(),
    })
}

/// Horizon AUC at the standard thresholds for a comma- or space-separated
/// list of errors.
pub fn auc_json(errors: &str) -> DemoResult {
    let values = errors
        .split([',', ' ', '\n', '\t'])
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = [0.0; 3];
    for (o, &t) in out.iter_mut().zip(&AUC_THRESHOLDS) {
        *o = auc(&values, t).map_err(|e| e.to_string())?;
    }
    to_json(&AucView {
        thresholds: AUC_THRESHOLDS,
        auc: out,
        curve: cumulative_curve(&values),
    })
}

#[wasm_bindgen]
pub fn scene(pitch: f64, roll: f64, fov: f64, lines: usize, seed: u32) -> Result<String, JsError> {
    scene_json(pitch, roll, fov, lines, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn classify(pitch: f64, roll: f64, fov: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<String, JsError> {
    classify_json(pitch, roll, fov, x1, y1, x2, y2).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn horizon_auc(errors: &str) -> Result<String, JsError> {
    auc_json(errors).map_err(|e| JsError::new(&e))
}
