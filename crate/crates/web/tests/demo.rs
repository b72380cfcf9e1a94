use calib_web::{auc_json, classify_json, scene_json};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn scene_reports_camera_geometry() {
    let v = parse(&scene_json(6.0, -4.0, 70.0, 16, 3).unwrap());
    let size = v["size"].as_u64().unwrap() as usize;
    assert_eq!(v["pixels"].as_array().unwrap().len(), size * size);
    assert_eq!(v["lines"].as_array().unwrap().len(), 16);
    let rec = v["recovered"].as_array().unwrap();
    assert!((rec[0].as_f64().unwrap() - 6.0).abs() < 1e-9);
    assert!((rec[1].as_f64().unwrap() + 4.0).abs() < 1e-9);
    let h = &v["horizon"];
    assert_eq!(h[0][0].as_f64().unwrap(), -1.0);
    assert_eq!(h[1][0].as_f64().unwrap(), 1.0);
}

#[test]
fn scene_rejects_bad_fov() {
    let err = scene_json(0.0, 0.0, 190.0, 8, 0).unwrap_err();
    assert!(err.contains("fov"), "{err}");
}

#[test]
fn drawn_segments_get_expected_labels() {
    // Level camera: the zenith is at infinity straight up, so an image
    // vertical passes it and a line along the horizon passes both
    // horizontal vanishing points.
    let v = parse(&classify_json(0.0, 0.0, 60.0, 0.3, -0.5, 0.3, 0.5).unwrap());
    assert_eq!(v["name"], "vertical");
    let h = parse(&classify_json(0.0, 0.0, 60.0, -0.5, 0.0, 0.5, 0.0).unwrap());
    assert_eq!(h["name"], "horizontal");
    let o = parse(&classify_json(0.0, 0.0, 60.0, -0.5, -0.4, 0.5, 0.1).unwrap());
    assert_eq!(o["name"], "other");
    assert!(classify_json(0.0, 0.0, 60.0, 0.2, 0.2, 0.2, 0.2).is_err());
}

#[test]
fn auc_parses_lists() {
    let v = parse(&auc_json("0.05, 0.15 0.30").unwrap());
    let a = v["auc"][2].as_f64().unwrap();
    assert!((a - 40.0).abs() < 1e-9, "{a}");
    assert_eq!(v["curve"].as_array().unwrap().len(), 3);
    assert!(auc_json("0.1, x").unwrap_err().contains("x"));
    assert!(auc_json("").is_err());
}
