use calib_core::camera::{
    angle_between, camera_to_geometry, geometry_to_camera, horizon_boundaries, CameraParams, ZenithVp,
};
use calib_core::line::{classify_line, vp_distance, vp_threshold, HomogeneousLine, LineClass, LineSegment};
use calib_core::scene::manhattan_vps;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_horizontal_dir(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // World up is (0, -1, 0), so horizontal directions have y = 0.
    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    [a.cos(), 0.0, a.sin()]
}

#[test]
fn horizontal_vps_lie_on_horizon_example() {
    let params = CameraParams::new(10.0, 5.0, 60.0).unwrap();
    let (_, hl) = camera_to_geometry(&params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..8 {
        let v = params.project_direction(&random_horizontal_dir(&mut rng)).unwrap();
        let r: f64 = hl.0.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!(r.abs() < 1e-10, "{r}");
    }
}

#[test]
fn round_trip_example() {
    let params = CameraParams::new(10.0, 5.0, 60.0).unwrap();
    let (z, _) = camera_to_geometry(&params).unwrap();
    let up = geometry_to_camera(&z, params.fov).unwrap();
    assert!((up.pitch - 10.0).abs() < 1e-6);
    assert!((up.roll - 5.0).abs() < 1e-6);
    let neg = geometry_to_camera(&ZenithVp(z.0.map(|v| -3.0 * v)), params.fov).unwrap();
    assert!((neg.pitch - up.pitch).abs() < 1e-12 && (neg.roll - up.roll).abs() < 1e-12);
}

#[test]
fn round_trip_over_grid() {
    let mut worst: f64 = 0.0;
    for pi in 0..=16 {
        for ri in 0..=12 {
            for fi in 0..=9 {
                let pitch = -40.0 + 5.0 * pi as f64;
                let roll = -30.0 + 5.0 * ri as f64;
                let fov = 30.0 + 10.0 * fi as f64;
                let params = CameraParams::new(pitch, roll, fov).unwrap();
                let (z, hl) = camera_to_geometry(&params).unwrap();
                let up = geometry_to_camera(&z, fov).unwrap();
                worst = worst.max((up.pitch - pitch).abs()).max((up.roll - roll).abs());
                // Horizon is the polar of the zenith: hl ∝ K⁻ᵀK⁻¹ z.
                let f = params.focal().unwrap();
                let polar = [z.0[0] / (f * f), z.0[1] / (f * f), z.0[2]];
                assert!(angle_between(&polar, &hl.0, true) < 1e-9);
            }
        }
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn manhattan_vps_are_consistent() {
    let params = CameraParams::new(-7.0, 3.0, 55.0).unwrap();
    let vps = manhattan_vps(&params).unwrap();
    let (z, hl) = camera_to_geometry(&params).unwrap();
    assert!(angle_between(&vps.zenith, &z.0, true) < 1e-12);
    for h in vps.horizontal {
        let r: f64 = hl.0.iter().zip(&h).map(|(a, b)| a * b).sum();
        assert!(r.abs() < 1e-10);
    }
}

#[test]
fn line_tilted_five_degrees_from_all_vps_is_other() {
    let params = CameraParams::new(8.0, -4.0, 65.0).unwrap();
    let vps = manhattan_vps(&params).unwrap();
    // A segment through the zenith, tilted 5° away from it.
    let p = [0.2, 0.1];
    let z = vps.zenith;
    let d = [z[0] - z[2] * p[0], z[1] - z[2] * p[1]];
    let seg = LineSegment::new([p[0] - 0.1 * d[0], p[1] - 0.1 * d[1]], p).unwrap();
    let l = seg.line();
    assert_eq!(
        classify_line(&l, &vps, vp_threshold()).unwrap().class,
        LineClass::Vertical
    );
    let tilted = l.tilted_away(&z, 5.0).unwrap();
    for v in [vps.zenith, vps.horizontal[0], vps.horizontal[1]] {
        assert!(vp_distance(&tilted, &v).unwrap() > vp_threshold());
    }
    let labels = classify_line(&tilted, &vps, vp_threshold()).unwrap();
    assert_eq!(labels.class, LineClass::Other);
    assert!(!labels.passes_vp);
}

proptest! {
    #[test]
    fn ambiguity_free_is_sign_invariant(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0) {
        prop_assume!(a.abs() + b.abs() > 1e-6);
        let l = HomogeneousLine::new([a, b, c]).unwrap();
        prop_assert_eq!(l.ambiguity_free(), l.negated().ambiguity_free());
    }

    #[test]
    fn endpoints_are_incident(x1 in -1.0f64..1.0, y1 in -1.0f64..1.0, x2 in -1.0f64..1.0, y2 in -1.0f64..1.0) {
        prop_assume!((x1 - x2).abs() + (y1 - y2).abs() > 1e-6);
        let seg = LineSegment::new([x1, y1], [x2, y2]).unwrap();
        let l = seg.line();
        for p in [seg.p1(), seg.p2()] {
            prop_assert!(vp_distance(&l, &[p[0], p[1], 1.0]).unwrap() < 1e-12);
        }
        for p in seg.sample_points(16).unwrap() {
            prop_assert!(l.normalized().incidence(p).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_is_sign_invariant(
        a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0,
        pitch in -20.0f64..20.0, roll in -15.0f64..15.0, fov in 40.0f64..90.0,
    ) {
        prop_assume!(a.abs() + b.abs() > 1e-3);
        let vps = manhattan_vps(&CameraParams::new(pitch, roll, fov).unwrap()).unwrap();
        let flipped = calib_core::line::VanishingPoints {
            zenith: vps.zenith.map(|v| -v),
            horizontal: vps.horizontal.map(|h| h.map(|v| -v)),
        };
        let l = HomogeneousLine::new([a, b, c]).unwrap();
        let base = classify_line(&l, &vps, vp_threshold()).unwrap();
        prop_assert_eq!(base, classify_line(&l.negated(), &vps, vp_threshold()).unwrap());
        prop_assert_eq!(base, classify_line(&l, &flipped, vp_threshold()).unwrap());
    }

    #[test]
    fn horizon_boundaries_scale_invariant(a in -0.5f64..0.5, b in 0.1f64..2.0, c in -1.0f64..1.0, k in 0.1f64..10.0) {
        let hl = calib_core::camera::HorizonLine([a, b, c]);
        let scaled = calib_core::camera::HorizonLine([-k * a, -k * b, -k * c]);
        let (l1, r1) = horizon_boundaries(&hl).unwrap();
        let (l2, r2) = horizon_boundaries(&scaled).unwrap();
        prop_assert!((l1[1] - l2[1]).abs() < 1e-12 && (r1[1] - r2[1]).abs() < 1e-12);
    }
}
