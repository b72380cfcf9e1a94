use calib_core::camera::{camera_to_geometry, CameraParams, HorizonLine};
use calib_core::eval::{
    angle_errors, auc, evaluate, ground_truth_output, horizon_error, write_report, EvalReport, CURVE_FILE,
    RECORDS_FILE, SUMMARY_FILE,
};
use calib_core::model::ModelOutput;
use calib_core::scene::{generate_dataset, GeneratorConfig};
use calib_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn output_for(camera: &CameraParams) -> ModelOutput {
    let (z, h) = camera_to_geometry(camera).unwrap();
    ModelOutput {
        zvp: z.0,
        hl: h.0,
        fov: camera.fov,
        class_logits: vec![],
        score: vec![],
    }
}

fn line_through(p: [f64; 2], q: [f64; 2]) -> HorizonLine {
    // (p, 1) × (q, 1)
    HorizonLine([p[1] - q[1], q[0] - p[0], p[0] * q[1] - p[1] * q[0]])
}

#[test]
fn exact_prediction_has_zero_error() {
    let gt = CameraParams::new(7.0, -4.0, 55.0).unwrap();
    let e = angle_errors(&output_for(&gt), &gt).unwrap();
    assert!(e.up < 1e-6 && e.pitch < 1e-9 && e.roll < 1e-9 && e.fov == 0.0, "{e:?}");
}

#[test]
fn flipped_and_scaled_zenith_gives_same_errors() {
    let gt = CameraParams::new(3.0, 6.0, 60.0).unwrap();
    let pred = output_for(&CameraParams::new(5.0, 2.0, 65.0).unwrap());
    let mut flipped = pred.clone();
    flipped.zvp = pred.zvp.map(|v| -3.5 * v);
    flipped.hl = pred.hl.map(|v| -0.2 * v);
    let a = angle_errors(&pred, &gt).unwrap();
    let b = angle_errors(&flipped, &gt).unwrap();
    assert!((a.up - b.up).abs() < 1e-9);
    assert!((a.pitch - b.pitch).abs() < 1e-9);
    assert!((a.roll - b.roll).abs() < 1e-9);
    assert_eq!(a.fov, b.fov);
}

#[test]
fn known_offsets_are_recovered() {
    let gt = CameraParams::new(-6.0, 4.0, 50.0).unwrap();
    let pitched = angle_errors(&output_for(&CameraParams::new(-3.0, 4.0, 50.0).unwrap()), &gt).unwrap();
    assert!((pitched.pitch - 3.0).abs() < 1e-6, "{pitched:?}");
    assert!(pitched.roll < 1e-6);
    let rolled = angle_errors(&output_for(&CameraParams::new(-6.0, 9.0, 50.0).unwrap()), &gt).unwrap();
    assert!((rolled.roll - 5.0).abs() < 1e-6, "{rolled:?}");
    let wider = angle_errors(&output_for(&CameraParams::new(-6.0, 4.0, 58.0).unwrap()), &gt).unwrap();
    assert!((wider.fov - 8.0).abs() < 1e-12);
    assert!(wider.up < 1e-6);
}

#[test]
fn horizon_error_uses_larger_side_over_height() {
    let gt = line_through([-1.0, 0.0], [1.0, 0.0]);
    let pred = line_through([-1.0, 0.1], [1.0, 0.3]);
    assert!((horizon_error(&pred, &gt).unwrap() - 0.15).abs() < 1e-12);
    assert_eq!(horizon_error(&gt, &gt).unwrap(), 0.0);
    let scaled = HorizonLine(pred.0.map(|v| -7.0 * v));
    assert!((horizon_error(&scaled, &gt).unwrap() - 0.15).abs() < 1e-12);
    let vertical = HorizonLine([1.0, 0.0, 0.2]);
    assert!(matches!(horizon_error(&vertical, &gt), Err(Error::DegenerateHorizon(_))));
}

#[test]
fn auc_hand_values() {
    assert!((auc(&[0.05, 0.15, 0.30], 0.25).unwrap() - 40.0).abs() < 1e-12);
    assert_eq!(auc(&[0.0, 0.0], 0.1).unwrap(), 100.0);
    assert_eq!(auc(&[0.11, 0.5], 0.1).unwrap(), 0.0);
    assert!(matches!(auc(&[], 0.1), Err(Error::Contract(_))));
    assert!(auc(&[f64::NAN], 0.1).is_err());
}

#[test]
fn auc_is_monotone_in_added_records() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let errs: Vec<f64> = (0..rng.random_range(1..20)).map(|_| rng.random_range(0.0..0.4)).collect();
        for t in [0.10, 0.15, 0.25] {
            let base = auc(&errs, t).unwrap();
            let mut better = errs.clone();
            better.push(0.0);
            let mut worse = errs.clone();
            worse.push(t + 0.01);
            assert!(auc(&better, t).unwrap() >= base);
            assert!(auc(&worse, t).unwrap() <= base);
        }
    }
}

#[test]
fn auc_matches_monte_carlo_integration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let errs: Vec<f64> = (0..200).map(|_| rng.random_range(0.0f64..0.3).powi(2) * 3.0).collect();
    let t = 0.25;
    let samples = 1_000_000;
    let mut sorted = errs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut hits = 0.0;
    for _ in 0..samples {
        let x = rng.random_range(0.0..t);
        hits += sorted.partition_point(|&e| e <= x) as f64 / sorted.len() as f64;
    }
    let mc = 100.0 * hits / samples as f64;
    let exact = auc(&errs, t).unwrap();
    assert!((mc - exact).abs() < 0.1, "{mc} vs {exact}");
}

#[test]
fn ground_truth_pass_through_scores_perfectly() {
    let data = generate_dataset(&GeneratorConfig::default(), 8, 1).unwrap();
    let preds: Vec<_> = data.iter().map(|r| ground_truth_output(r).unwrap()).collect();
    let s = evaluate(&preds, &data).unwrap().summary;
    assert!(s.up_mean < 1e-6 && s.pitch_mean < 1e-9 && s.roll_mean < 1e-9 && s.fov_mean == 0.0);
    assert_eq!((s.auc_010, s.auc_015, s.auc_025), (100.0, 100.0, 100.0));
    assert_eq!((s.n_records, s.n_excluded), (8, 0));
}

#[test]
fn degenerate_horizons_are_excluded_and_counted() {
    let data = generate_dataset(&GeneratorConfig::default(), 4, 2).unwrap();
    let mut preds: Vec<_> = data.iter().map(|r| ground_truth_output(r).unwrap()).collect();
    preds[1].hl = [1.0, 0.0, 0.0];
    let report = evaluate(&preds, &data).unwrap();
    assert_eq!(report.summary.n_excluded, 1);
    assert_eq!(report.records[1].horizon, None);
    assert_eq!(report.curve.len(), 3);
    assert!(evaluate(&preds[..2], &data).is_err());
}

#[test]
fn report_files_round_trip() {
    let data = generate_dataset(&GeneratorConfig::default(), 10, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let preds: Vec<_> = data
        .iter()
        .map(|r| {
            let c = &r.camera;
            let noisy = CameraParams::new(
                c.pitch + rng.random_range(-5.0..5.0),
                c.roll + rng.random_range(-5.0..5.0),
                c.fov + rng.random_range(-5.0..5.0),
            )
            .unwrap();
            output_for(&noisy)
        })
        .collect();
    let report = evaluate(&preds, &data).unwrap();
    let json = serde_json::to_string(&report).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);

    let dir = tempfile::tempdir().unwrap();
    write_report(&report, dir.path()).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    for key in [
        "up_mean", "up_med", "pitch_mean", "pitch_med", "roll_mean", "roll_med", "fov_mean", "fov_med", "auc_010",
        "auc_015", "auc_025", "n_records", "n_excluded",
    ] {
        assert!(summary.get(key).is_some(), "missing {key}");
    }
    assert_eq!(summary["auc_025"].as_f64().unwrap(), report.summary.auc_025);
    let records = std::fs::read_to_string(dir.path().join(RECORDS_FILE)).unwrap();
    assert_eq!(records.lines().count(), 11);
    let curve = std::fs::read_to_string(dir.path().join(CURVE_FILE)).unwrap();
    let fractions: Vec<f64> = curve
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(fractions.len(), 10);
    assert!(fractions.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*fractions.last().unwrap(), 1.0);
}
