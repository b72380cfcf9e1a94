//! Pinhole camera with square pixels, centered principal point and zero yaw.
//!
//! Frame conventions: image x right, y down, half image height = 1, so the
//! intrinsics in normalized coordinates are `K = diag(f, f, 1)` with
//! `f = 1 / tan(fov / 2)`. Camera axes are x right, y down, z forward; the
//! world up direction for an unrotated camera is `(0, -1, 0)`. The
//! world-to-camera rotation is `R = R_roll · R_pitch`, where positive pitch
//! tilts the camera up and positive roll turns the image up-vector toward +x.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::line::{cross3, dot3, norm3, Point};

pub const WORLD_UP: [f64; 3] = [0.0, -1.0, 0.0];

/// Horizons whose `b` coefficient (of the unit-norm line) is at most this are
/// treated as not crossing the image side edges.
pub const DEGENERATE_HORIZON_EPS: f64 = 1e-9;

pub type Mat3 = [[f64; 3]; 3];

/// Camera orientation and vertical field of view, all in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub pitch: f64,
    pub roll: f64,
    pub fov: f64,
}

impl CameraParams {
    pub fn new(pitch: f64, roll: f64, fov: f64) -> Result<Self> {
        check_fov(fov)?;
        if !pitch.is_finite() || !roll.is_finite() {
            return Err(Error::contract(format!("non-finite pitch/roll {pitch}/{roll}")));
        }
        Ok(Self { pitch, roll, fov })
    }

    pub fn focal(&self) -> Result<f64> {
        focal_from_fov(self.fov)
    }

    pub fn rotation(&self) -> Mat3 {
        rotation(self.pitch, self.roll)
    }

    /// Image of a world direction, `K · R · dir`, homogeneous.
    pub fn project_direction(&self, dir: &[f64; 3]) -> Result<[f64; 3]> {
        let f = self.focal()?;
        let c = mat_vec(&self.rotation(), dir);
        Ok([f * c[0], f * c[1], c[2]])
    }
}

/// Homogeneous zenith vanishing point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZenithVp(pub [f64; 3]);

/// Homogeneous horizon line in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonLine(pub [f64; 3]);

/// Up vector in camera coordinates and the pitch/roll recovered from it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Upright {
    pub up: [f64; 3],
    pub pitch: f64,
    pub roll: f64,
}

fn check_fov(fov: f64) -> Result<()> {
    if !(fov > 0.0 && fov < 180.0) {
        return Err(Error::contract(format!("fov must lie in (0°, 180°), got {fov}")));
    }
    Ok(())
}

/// Focal length in half-image-height units.
pub fn focal_from_fov(fov: f64) -> Result<f64> {
    check_fov(fov)?;
    Ok(1.0 / (0.5 * fov).to_radians().tan())
}

pub fn fov_from_focal(focal: f64) -> Result<f64> {
    if !(focal > 0.0 && focal.is_finite()) {
        return Err(Error::contract(format!("focal must be positive, got {focal}")));
    }
    Ok(2.0 * (1.0 / focal).atan().to_degrees())
}

/// World-to-camera rotation for the given pitch and roll (degrees).
pub fn rotation(pitch: f64, roll: f64) -> Mat3 {
    // Positive pitch tilts the camera up, i.e. rotates about x by -pitch.
    let (sp, cp) = (-pitch).to_radians().sin_cos();
    let (sr, cr) = roll.to_radians().sin_cos();
    let r_pitch = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let r_roll = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&r_roll, &r_pitch)
}

/// Zenith vanishing point `K R u` and horizon line `K⁻ᵀ R u` for world up `u`.
pub fn camera_to_geometry(params: &CameraParams) -> Result<(ZenithVp, HorizonLine)> {
    let f = params.focal()?;
    let up = mat_vec(&params.rotation(), &WORLD_UP);
    let zenith = [f * up[0], f * up[1], up[2]];
    let horizon = [up[0] / f, up[1] / f, up[2]];
    Ok((ZenithVp(zenith), HorizonLine(horizon)))
}

/// Recovers the camera-frame up vector, pitch and roll from a zenith VP and
/// field of view. The result does not depend on the sign or scale of `z`.
pub fn geometry_to_camera(zenith: &ZenithVp, fov: f64) -> Result<Upright> {
    let f = focal_from_fov(fov)?;
    let z = zenith.0;
    let n = norm3(&z);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::contract("geometry_to_camera: zero zenith vector"));
    }
    let raw = [z[0] / f, z[1] / f, z[2]];
    let len = norm3(&raw);
    let mut up = raw.map(|v| v / len);
    // Up points toward decreasing image y; ties broken toward +x.
    let flip = up[1] > 0.0 || (up[1] == 0.0 && up[0] < 0.0);
    if flip {
        up = up.map(|v| -v);
    }
    Ok(Upright {
        up,
        pitch: up[2].clamp(-1.0, 1.0).asin().to_degrees(),
        roll: up[0].atan2(-up[1]).to_degrees(),
    })
}

/// Intersections of the horizon with the left (x = -1) and right (x = +1)
/// image edges.
pub fn horizon_boundaries(hl: &HorizonLine) -> Result<(Point, Point)> {
    let n = norm3(&hl.0);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateHorizon(hl.0));
    }
    let [a, b, c] = hl.0.map(|v| v / n);
    if b.abs() <= DEGENERATE_HORIZON_EPS {
        return Err(Error::DegenerateHorizon(hl.0));
    }
    let y = |x: f64| -(a * x + c) / b;
    Ok(([-1.0, y(-1.0)], [1.0, y(1.0)]))
}

/// Angle in degrees between two directions, ignoring their signs when
/// `unsigned` is set.
pub fn angle_between(a: &[f64; 3], b: &[f64; 3], unsigned: bool) -> f64 {
    let cos = dot3(a, b) / (norm3(a) * norm3(b));
    let cos = if unsigned { cos.abs() } else { cos };
    // atan2 of |a×b| and a·b is accurate near 0° where acos is not.
    let sin = norm3(&cross3(a, b)) / (norm3(a) * norm3(b));
    sin.atan2(cos).to_degrees()
}

pub(crate) fn mat_vec(m: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    [dot3(&m[0], v), dot3(&m[1], v), dot3(&m[2], v)]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_examples() {
        assert!((focal_from_fov(90.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((focal_from_fov(60.0).unwrap() - 3f64.sqrt()).abs() < 1e-14);
        for fov in [1.0, 37.5, 90.0, 151.0] {
            let back = fov_from_focal(focal_from_fov(fov).unwrap()).unwrap();
            assert!((back - fov).abs() < 1e-12);
        }
        assert!(focal_from_fov(0.0).is_err());
        assert!(focal_from_fov(180.0).is_err());
        assert!(CameraParams::new(0.0, 0.0, -5.0).is_err());
    }

    #[test]
    fn unrotated_camera() {
        let p = CameraParams::new(0.0, 0.0, 60.0).unwrap();
        let (z, hl) = camera_to_geometry(&p).unwrap();
        assert_eq!(z.0[0], 0.0);
        assert_eq!(z.0[2], 0.0);
        assert!(z.0[1] != 0.0);
        let (l, r) = horizon_boundaries(&hl).unwrap();
        assert_eq!(l, [-1.0, 0.0]);
        assert_eq!(r, [1.0, 0.0]);
    }

    #[test]
    fn roll_ninety_gives_vertical_horizon() {
        let p = CameraParams::new(10.0, 90.0, 60.0).unwrap();
        let (_, hl) = camera_to_geometry(&p).unwrap();
        assert!(hl.0[1].abs() < 1e-15);
        assert!(matches!(horizon_boundaries(&hl), Err(Error::DegenerateHorizon(_))));
    }

    #[test]
    fn pitch_up_moves_horizon_down() {
        let p = CameraParams::new(10.0, 0.0, 60.0).unwrap();
        let (z, hl) = camera_to_geometry(&p).unwrap();
        let (l, _) = horizon_boundaries(&hl).unwrap();
        let f = p.focal().unwrap();
        assert!((l[1] - f * 10f64.to_radians().tan()).abs() < 1e-12);
        // Zenith lies above the image center.
        assert!(z.0[1] / z.0[2] < 0.0);
    }

    #[test]
    fn boundaries_examples() {
        let (l, r) = horizon_boundaries(&HorizonLine([0.0, 1.0, -0.5])).unwrap();
        assert_eq!((l, r), ([-1.0, 0.5], [1.0, 0.5]));
        let (l, r) = horizon_boundaries(&HorizonLine([1.0, 1.0, 0.0])).unwrap();
        assert!((l[1] - 1.0).abs() < 1e-15 && (r[1] + 1.0).abs() < 1e-15);
        let hl = HorizonLine([0.2, -0.9, 0.3]);
        let scaled = HorizonLine(hl.0.map(|v| 7.0 * v));
        let (a, b) = horizon_boundaries(&hl).unwrap();
        let (c, d) = horizon_boundaries(&scaled).unwrap();
        assert!((a[1] - c[1]).abs() < 1e-15 && (b[1] - d[1]).abs() < 1e-15);
    }

    #[test]
    fn recovery_handles_sign_and_zero_pitch() {
        let p = CameraParams::new(0.0, 7.0, 50.0).unwrap();
        let (z, _) = camera_to_geometry(&p).unwrap();
        let a = geometry_to_camera(&z, p.fov).unwrap();
        let b = geometry_to_camera(&ZenithVp(z.0.map(|v| -v)), p.fov).unwrap();
        assert!(a.pitch.abs() < 1e-6);
        assert!((a.roll - 7.0).abs() < 1e-6);
        assert_eq!((a.pitch, a.roll), (b.pitch, b.roll));
        assert!(geometry_to_camera(&ZenithVp([0.0; 3]), 50.0).is_err());
    }

    #[test]
    fn angle_between_is_accurate_near_zero() {
        let a = [1.0, 0.0, 0.0];
        let b = [1.0, 1e-9, 0.0];
        assert!((angle_between(&a, &b, false) - 1e-9f64.to_degrees()).abs() < 1e-18);
        assert!(angle_between(&a, &[-1.0, 0.0, 0.0], true) < 1e-12);
    }
}
