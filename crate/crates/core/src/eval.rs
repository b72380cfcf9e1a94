//! Calibration error metrics, horizon AUC and report files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{camera_to_geometry, geometry_to_camera, horizon_boundaries, CameraParams, HorizonLine, ZenithVp};
use crate::error::{Error, Result};
use crate::model::{Model, ModelOutput};
use crate::scene::SceneRecord;

pub const AUC_THRESHOLDS: [f64; 3] = [0.10, 0.15, 0.25];
pub const SUMMARY_FILE: &str = "summary.json";
pub const RECORDS_FILE: &str = "records.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const RECORDS_HEADER: &str = "index,seed,up,pitch,roll,fov,horizon";
pub const CURVE_HEADER: &str = "error,fraction";

/// Absolute errors in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleErrors {
    pub up: f64,
    pub pitch: f64,
    pub roll: f64,
    pub fov: f64,
}

/// Up, pitch, roll and fov errors of a prediction. Pitch and roll come from
/// the predicted zenith and fov; the up vectors are sign-fixed before the
/// angle between them is taken.
pub fn angle_errors(pred: &ModelOutput, gt: &CameraParams) -> Result<AngleErrors> {
    let p = geometry_to_camera(&ZenithVp(pred.zvp), pred.fov)?;
    let (zenith, _) = camera_to_geometry(gt)?;
    let g = geometry_to_camera(&zenith, gt.fov)?;
    let roll = (p.roll - g.roll).rem_euclid(360.0);
    Ok(AngleErrors {
        up: crate::camera::angle_between(&p.up, &g.up, false),
        pitch: (p.pitch - g.pitch).abs(),
        roll: roll.min(360.0 - roll),
        fov: (pred.fov - gt.fov).abs(),
    })
}

/// Largest vertical gap between two horizons at the image side edges, as a
/// fraction of the image height.
pub fn horizon_error(pred: &HorizonLine, gt: &HorizonLine) -> Result<f64> {
    let (pl, pr) = horizon_boundaries(pred)?;
    let (gl, gr) = horizon_boundaries(gt)?;
    Ok((pl[1] - gl[1]).abs().max((pr[1] - gr[1]).abs()) / 2.0)
}

/// Area under the cumulative error distribution on `[0, threshold]`, in
/// percent of the threshold. The step curve is integrated exactly: the
/// area is the mean over records of `1 - e/threshold` for errors below the
/// threshold. Records at or above it add exactly zero, which keeps the
/// result monotone when records are added.
pub fn auc(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::contract("auc needs at least one error"));
    }
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::contract(format!("auc threshold must be positive, got {threshold}")));
    }
    if let Some(e) = errors.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(Error::contract(format!("auc errors must be finite and ≥ 0, got {e}")));
    }
    let covered: f64 = errors
        .iter()
        .filter(|&&e| e < threshold)
        .map(|&e| 1.0 - e / threshold)
        .sum();
    Ok(100.0 * covered / errors.len() as f64)
}

/// Points `(error, fraction ≤ error)` of the empirical CDF, one per error.
pub fn cumulative_curve(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted.iter().enumerate().map(|(i, &e)| (e, (i + 1) as f64 / n)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordErrors {
    pub index: usize,
    pub seed: u64,
    pub angles: AngleErrors,
    /// `None` when either horizon is degenerate.
    pub horizon: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub up_mean: f64,
    pub up_med: f64,
    pub pitch_mean: f64,
    pub pitch_med: f64,
    pub roll_mean: f64,
    pub roll_med: f64,
    pub fov_mean: f64,
    pub fov_med: f64,
    pub auc_010: f64,
    pub auc_015: f64,
    pub auc_025: f64,
    pub n_records: usize,
    /// Records left out of the horizon metrics.
    pub n_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: Summary,
    pub records: Vec<RecordErrors>,
    pub curve: Vec<(f64, f64)>,
}

/// Scores predictions against their records.
pub fn evaluate(preds: &[ModelOutput], records: &[SceneRecord]) -> Result<EvalReport> {
    if preds.len() != records.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} records",
            preds.len(),
            records.len()
        )));
    }
    if records.is_empty() {
        return Err(Error::contract("evaluation needs at least one record"));
    }
    let mut rows = Vec::with_capacity(records.len());
    for (index, (pred, record)) in preds.iter().zip(records).enumerate() {
        let (_, gt_hl) = camera_to_geometry(&record.camera)?;
        let horizon = match horizon_error(&HorizonLine(pred.hl), &gt_hl) {
            Ok(e) => Some(e),
            Err(Error::DegenerateHorizon(_)) => None,
            Err(e) => return Err(e),
        };
        rows.push(RecordErrors {
            index,
            seed: record.seed,
            angles: angle_errors(pred, &record.camera)?,
            horizon,
        });
    }
    let column = |f: fn(&AngleErrors) -> f64| rows.iter().map(|r| f(&r.angles)).collect::<Vec<_>>();
    let (up, pitch, roll, fov) = (
        column(|a| a.up),
        column(|a| a.pitch),
        column(|a| a.roll),
        column(|a| a.fov),
    );
    let horizons: Vec<f64> = rows.iter().filter_map(|r| r.horizon).collect();
    // With every horizon excluded there is nothing under the curve.
    let auc_at = |t| if horizons.is_empty() { Ok(0.0) } else { auc(&horizons, t) };
    let summary = Summary {
        up_mean: mean(&up),
        up_med: median(&up),
        pitch_mean: mean(&pitch),
        pitch_med: median(&pitch),
        roll_mean: mean(&roll),
        roll_med: median(&roll),
        fov_mean: mean(&fov),
        fov_med: median(&fov),
        auc_010: auc_at(AUC_THRESHOLDS[0])?,
        auc_015: auc_at(AUC_THRESHOLDS[1])?,
        auc_025: auc_at(AUC_THRESHOLDS[2])?,
        n_records: rows.len(),
        n_excluded: rows.len() - horizons.len(),
    };
    Ok(EvalReport {
        summary,
        curve: cumulative_curve(&horizons),
        records: rows,
    })
}

/// Runs the model over every record and scores the outputs.
pub fn evaluate_model(model: &Model, records: &[SceneRecord]) -> Result<EvalReport> {
    let preds = records
        .iter()
        .map(|r| {
            model.check_record(r)?;
            model.predict(&r.image, &r.lines)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&preds, records)
}

/// Output that reproduces a record's ground truth exactly.
pub fn ground_truth_output(record: &SceneRecord) -> Result<ModelOutput> {
    let (zvp, hl) = camera_to_geometry(&record.camera)?;
    Ok(ModelOutput {
        zvp: zvp.0,
        hl: hl.0,
        fov: record.camera.fov,
        class_logits: record
            .labels
            .iter()
            .map(|l| {
                let mut row = [0.0; 3];
                row[l.class.index()] = 1.0;
                row
            })
            .collect(),
        score: record.labels.iter().map(|l| f64::from(u8::from(l.passes_vp))).collect(),
    })
}

/// Writes the summary JSON, per-record CSV and cumulative-curve CSV into `dir`.
pub fn write_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let summary = serde_json::to_string_pretty(&report.summary)?;
    let path = dir.join(SUMMARY_FILE);
    fs::write(&path, summary + "\n").map_err(|e| Error::file(&path, e))?;

    let mut out = Vec::new();
    writeln!(out, "{RECORDS_HEADER}")?;
    for r in &report.records {
        let a = &r.angles;
        let h = r.horizon.map_or(String::new(), |h| h.to_string());
        writeln!(out, "{},{},{},{},{},{},{h}", r.index, r.seed, a.up, a.pitch, a.roll, a.fov)?;
    }
    let path = dir.join(RECORDS_FILE);
    fs::write(&path, out).map_err(|e| Error::file(&path, e))?;

    let mut out = Vec::new();
    writeln!(out, "{CURVE_HEADER}")?;
    for (e, f) in &report.curve {
        writeln!(out, "{e},{f}")?;
    }
    let path = dir.join(CURVE_FILE);
    fs::write(&path, out).map_err(|e| Error::file(&path, e))?;
    Ok(())
}
