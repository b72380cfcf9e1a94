//! Line segments, homogeneous lines, and vanishing-point pseudo-labels.
//!
//! Points live in normalized image coordinates: origin at the image center,
//! x to the right, y down, half the image height equal to one.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Number of points read along each segment when building line queries.
pub const LINE_SAMPLES: usize = 16;

/// Incidence threshold `sin(2°)` for the pseudo-labeling rule.
pub fn vp_threshold() -> f64 {
    static DELTA: OnceLock<f64> = OnceLock::new();
    *DELTA.get_or_init(|| 2.0f64.to_radians().sin())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSegment {
    p1: Point,
    p2: Point,
}

impl LineSegment {
    pub fn new(p1: Point, p2: Point) -> Result<Self> {
        if p1.iter().chain(&p2).any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite segment {p1:?}-{p2:?}")));
        }
        if p1 == p2 {
            return Err(Error::DegenerateSegment { x: p1[0], y: p1[1] });
        }
        Ok(Self { p1, p2 })
    }

    pub fn p1(&self) -> Point {
        self.p1
    }

    pub fn p2(&self) -> Point {
        self.p2
    }

    pub fn reversed(&self) -> Self {
        Self {
            p1: self.p2,
            p2: self.p1,
        }
    }

    pub fn midpoint(&self) -> Point {
        [
            0.5 * (self.p1[0] + self.p2[0]),
            0.5 * (self.p1[1] + self.p2[1]),
        ]
    }

    pub fn length(&self) -> f64 {
        (self.p2[0] - self.p1[0]).hypot(self.p2[1] - self.p1[1])
    }

    /// Cross product of the homogenized endpoints.
    pub fn line(&self) -> HomogeneousLine {
        let [x1, y1] = self.p1;
        let [x2, y2] = self.p2;
        HomogeneousLine([y1 - y2, x2 - x1, x1 * y2 - x2 * y1])
    }

    /// `n` evenly spaced points from `p1` to `p2`, endpoints included.
    pub fn sample_points(&self, n: usize) -> Result<Vec<Point>> {
        if n < 2 {
            return Err(Error::contract(format!("sample_points needs n >= 2, got {n}")));
        }
        let d = [self.p2[0] - self.p1[0], self.p2[1] - self.p1[1]];
        Ok((0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                [self.p1[0] + t * d[0], self.p1[1] + t * d[1]]
            })
            .collect())
    }
}

/// `l = [a, b, c]` with `a·x + b·y + c = 0`; `l` and `k·l` (k ≠ 0) are the same line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogeneousLine(pub [f64; 3]);

impl HomogeneousLine {
    pub fn new(coeffs: [f64; 3]) -> Result<Self> {
        if coeffs[0] == 0.0 && coeffs[1] == 0.0 {
            return Err(Error::contract(format!("not a line: {coeffs:?}")));
        }
        Ok(Self(coeffs))
    }

    pub fn coeffs(&self) -> [f64; 3] {
        self.0
    }

    pub fn negated(&self) -> Self {
        Self(self.0.map(|v| -v))
    }

    /// Scaled to unit Euclidean norm over all three coefficients.
    pub fn normalized(&self) -> Self {
        let n = norm3(&self.0);
        Self(self.0.map(|v| v / n))
    }

    /// `l · (x, y, 1)`.
    pub fn incidence(&self, p: Point) -> f64 {
        self.0[0] * p[0] + self.0[1] * p[1] + self.0[2]
    }

    /// Rotates the line's interpretation plane (normal `l`) about the axis
    /// `l × v` so that `v` ends up `angle` degrees further from it. For a line
    /// through `v` the result has `vp_distance == sin(angle)`.
    pub fn tilted_away(&self, v: &[f64; 3], angle: f64) -> Result<Self> {
        let n = self.normalized().0;
        let nv = norm3(v);
        if nv == 0.0 {
            return Err(Error::contract("tilted_away: zero vanishing point"));
        }
        let w = v.map(|x| x / nv);
        let along = dot3(&n, &w);
        // Component of v orthogonal to the normal, pointing away from the plane.
        let perp = [w[0] - along * n[0], w[1] - along * n[1], w[2] - along * n[2]];
        let len = norm3(&perp);
        if len == 0.0 {
            return Err(Error::contract("tilted_away: vanishing point is the line's pole"));
        }
        let sign = if along < 0.0 { -1.0 } else { 1.0 };
        let (s, c) = angle.to_radians().sin_cos();
        Self::new([0, 1, 2].map(|i| c * n[i] + sign * s * perp[i] / len))
    }

    /// Sign-free degree-2 encoding `[a², ab, b², bc, ac, c²]` of the unit-norm line.
    pub fn ambiguity_free(&self) -> AmbiguityFreeLine {
        let [a, b, c] = self.normalized().0;
        AmbiguityFreeLine([a * a, a * b, b * b, b * c, a * c, c * c])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmbiguityFreeLine(pub [f64; 6]);

/// `|lᵀv| / (‖l‖‖v‖)`, the sine of the angle between `v` and the plane of `l`.
pub fn vp_distance(line: &HomogeneousLine, v: &[f64; 3]) -> Result<f64> {
    let nv = norm3(v);
    if nv == 0.0 {
        return Err(Error::contract("vp_distance: zero vanishing point"));
    }
    let l = &line.0;
    Ok((dot3(l, v) / (norm3(l) * nv)).abs())
}

/// Zenith and the two horizontal vanishing points, homogeneous.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanishingPoints {
    pub zenith: [f64; 3],
    pub horizontal: [[f64; 3]; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum LineClass {
    Other = 0,
    Horizontal = 1,
    Vertical = 2,
}

impl LineClass {
    pub const ALL: [LineClass; 3] = [LineClass::Other, LineClass::Horizontal, LineClass::Vertical];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl From<LineClass> for u8 {
    fn from(c: LineClass) -> u8 {
        c as u8
    }
}

impl TryFrom<u8> for LineClass {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(LineClass::Other),
            1 => Ok(LineClass::Horizontal),
            2 => Ok(LineClass::Vertical),
            _ => Err(format!("invalid line class {v}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineLabels {
    #[serde(rename = "class")]
    pub class: LineClass,
    #[serde(with = "bool_as_int")]
    pub passes_vp: bool,
}

impl LineLabels {
    pub fn from_class(class: LineClass) -> Self {
        Self {
            class,
            passes_vp: class != LineClass::Other,
        }
    }
}

/// Pseudo-labels a line: vertical if it passes the zenith, else horizontal if
/// it passes either horizontal vanishing point, else other. The zenith test
/// is checked first.
pub fn classify_line(line: &HomogeneousLine, vps: &VanishingPoints, delta: f64) -> Result<LineLabels> {
    let class = if vp_distance(line, &vps.zenith)? < delta {
        LineClass::Vertical
    } else if vp_distance(line, &vps.horizontal[0])? < delta
        || vp_distance(line, &vps.horizontal[1])? < delta
    {
        LineClass::Horizontal
    } else {
        LineClass::Other
    };
    Ok(LineLabels::from_class(class))
}

pub(crate) fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

mod bool_as_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(serde::de::Error::custom(format!("passes_vp must be 0 or 1, got {v}"))),
        }
    }
}
