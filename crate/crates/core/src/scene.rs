//! Synthetic Manhattan-world scenes with exact vanishing-point ground truth,
//! and the JSONL dataset format they are stored in.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{camera_to_geometry, CameraParams};
use crate::error::{Error, Result};
use crate::line::{
    classify_line, vp_threshold, LineClass, LineLabels, LineSegment, Point, VanishingPoints,
};

/// World directions of the three Manhattan axes: up, right, forward.
pub const MANHATTAN_AXES: [[f64; 3]; 3] = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];

const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub pitch_range: (f64, f64),
    pub roll_range: (f64, f64),
    pub fov_range: (f64, f64),
    pub lines_per_image: usize,
    /// Fraction of lines drawn with a random orientation.
    pub outlier_fraction: f64,
    /// Fraction of the inlier lines that point at the zenith.
    pub vertical_fraction: f64,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Standard deviation of Gaussian endpoint noise, normalized units.
    pub jitter: f64,
    /// Segment length range, normalized units.
    pub length_range: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            pitch_range: (-15.0, 15.0),
            roll_range: (-10.0, 10.0),
            fov_range: (40.0, 80.0),
            lines_per_image: 32,
            outlier_fraction: 0.3,
            vertical_fraction: 0.4,
            image_size: 64,
            jitter: 0.0,
            length_range: (0.2, 0.8),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64, open: bool| {
            let inside = if open {
                lo > min && hi < max
            } else {
                lo >= min && hi <= max
            };
            if !(lo <= hi && inside) {
                return Err(Error::contract(format!(
                    "{name} range [{lo}, {hi}] must be ordered and within ({min}, {max})"
                )));
            }
            Ok(())
        };
        range("pitch", self.pitch_range, -89.0, 89.0, false)?;
        range("roll", self.roll_range, -89.0, 89.0, false)?;
        range("fov", self.fov_range, 0.0, 180.0, true)?;
        range("length", self.length_range, 0.0, 2.0, true)?;
        for (name, v) in [
            ("outlier_fraction", self.outlier_fraction),
            ("vertical_fraction", self.vertical_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::contract(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        if self.image_size < 2 {
            return Err(Error::contract("image_size must be at least 2"));
        }
        Ok(())
    }

    /// (outliers, vertical, horizontal) line counts.
    pub fn line_counts(&self) -> (usize, usize, usize) {
        let n = self.lines_per_image;
        let outliers = ((n as f64) * self.outlier_fraction).round() as usize;
        let inliers = n - outliers.min(n);
        let vertical = ((inliers as f64) * self.vertical_fraction).round() as usize;
        (n - inliers, vertical, inliers - vertical)
    }
}

/// Row-major grayscale raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn blank(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }
}

/// One synthetic sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "WireRecord", try_from = "WireRecord")]
pub struct SceneRecord {
    pub seed: u64,
    pub image: Image,
    pub lines: Vec<LineSegment>,
    pub camera: CameraParams,
    pub vps: VanishingPoints,
    pub labels: Vec<LineLabels>,
}

impl SceneRecord {
    /// Class each line was drawn for; equals `labels` when jitter is zero.
    pub fn classes(&self) -> impl Iterator<Item = LineClass> + '_ {
        self.labels.iter().map(|l| l.class)
    }
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    seed: u64,
    image: Image,
    lines: Vec<[f64; 4]>,
    camera: CameraParams,
    vps: [[f64; 3]; 3],
    labels: Vec<LineLabels>,
}

impl From<SceneRecord> for WireRecord {
    fn from(r: SceneRecord) -> Self {
        WireRecord {
            seed: r.seed,
            image: r.image,
            lines: r
                .lines
                .iter()
                .map(|s| [s.p1()[0], s.p1()[1], s.p2()[0], s.p2()[1]])
                .collect(),
            camera: r.camera,
            vps: [r.vps.zenith, r.vps.horizontal[0], r.vps.horizontal[1]],
            labels: r.labels,
        }
    }
}

impl TryFrom<WireRecord> for SceneRecord {
    type Error = String;

    fn try_from(w: WireRecord) -> Result<Self, String> {
        if w.image.data.len() != w.image.h * w.image.w {
            return Err(format!(
                "image holds {} values, expected {}x{}",
                w.image.data.len(),
                w.image.h,
                w.image.w
            ));
        }
        if w.labels.len() != w.lines.len() {
            return Err(format!("{} labels for {} lines", w.labels.len(), w.lines.len()));
        }
        if let Some(bad) = w
            .labels
            .iter()
            .find(|l| l.passes_vp != (l.class != LineClass::Other))
        {
            return Err(format!("inconsistent labels {bad:?}"));
        }
        let lines = w
            .lines
            .iter()
            .map(|c| LineSegment::new([c[0], c[1]], [c[2], c[3]]))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let camera =
            CameraParams::new(w.camera.pitch, w.camera.roll, w.camera.fov).map_err(|e| e.to_string())?;
        Ok(SceneRecord {
            seed: w.seed,
            image: w.image,
            lines,
            camera,
            vps: VanishingPoints {
                zenith: w.vps[0],
                horizontal: [w.vps[1], w.vps[2]],
            },
            labels: w.labels,
        })
    }
}

/// Vanishing points of the Manhattan axes for `camera`.
pub fn manhattan_vps(camera: &CameraParams) -> Result<VanishingPoints> {
    let (zenith, _) = camera_to_geometry(camera)?;
    Ok(VanishingPoints {
        zenith: zenith.0,
        horizontal: [
            camera.project_direction(&MANHATTAN_AXES[1])?,
            camera.project_direction(&MANHATTAN_AXES[2])?,
        ],
    })
}

/// Draws one scene. Inlier segments pass exactly through their vanishing
/// point; with zero jitter every line's pseudo-label equals the class it was
/// drawn for (candidates that would be labeled otherwise are redrawn).
pub fn generate(config: &GeneratorConfig, seed: u64) -> Result<SceneRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    };
    let camera = CameraParams::new(
        uniform(&mut rng, config.pitch_range),
        uniform(&mut rng, config.roll_range),
        uniform(&mut rng, config.fov_range),
    )?;
    let vps = manhattan_vps(&camera)?;
    let delta = vp_threshold();

    let (n_out, n_vert, n_horiz) = config.line_counts();
    let mut intents = Vec::with_capacity(config.lines_per_image);
    intents.extend(std::iter::repeat_n(Intent::Through(vps.zenith), n_vert));
    intents.extend((0..n_horiz).map(|i| Intent::Through(vps.horizontal[i % 2])));
    intents.extend(std::iter::repeat_n(Intent::Outlier, n_out));

    let mut lines = Vec::with_capacity(intents.len());
    let mut labels = Vec::with_capacity(intents.len());
    for (i, intent) in intents.iter().enumerate() {
        let wanted = match intent {
            Intent::Outlier => LineClass::Other,
            Intent::Through(v) if *v == vps.zenith => LineClass::Vertical,
            Intent::Through(_) => LineClass::Horizontal,
        };
        let mut drawn = None;
        for _ in 0..MAX_ATTEMPTS {
            let Some(seg) = intent.draw(&mut rng, config)? else {
                continue;
            };
            let label = classify_line(&seg.line(), &vps, delta)?;
            if config.jitter > 0.0 || label.class == wanted {
                drawn = Some((seg, label));
                break;
            }
        }
        let (seg, label) = drawn.ok_or_else(|| {
            Error::contract(format!(
                "seed {seed}: could not place line {i} ({wanted:?}) after {MAX_ATTEMPTS} attempts"
            ))
        })?;
        lines.push(seg);
        labels.push(label);
    }

    let mut image = Image::blank(config.image_size, config.image_size);
    for seg in &lines {
        rasterize(&mut image, seg);
    }
    Ok(SceneRecord {
        seed,
        image,
        lines,
        camera,
        vps,
        labels,
    })
}

#[derive(Clone, Copy)]
enum Intent {
    Through([f64; 3]),
    Outlier,
}

impl Intent {
    fn draw(&self, rng: &mut ChaCha8Rng, config: &GeneratorConfig) -> Result<Option<LineSegment>> {
        let p = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
        let dir = match self {
            // Direction from p toward v, valid for finite and infinite v alike.
            Intent::Through(v) => [v[0] - v[2] * p[0], v[1] - v[2] * p[1]],
            Intent::Outlier => {
                let a = rng.random_range(0.0..std::f64::consts::PI);
                [a.cos(), a.sin()]
            }
        };
        let norm = dir[0].hypot(dir[1]);
        if norm < 1e-9 {
            return Ok(None);
        }
        let (lo, hi) = config.length_range;
        let half = 0.5 * if lo == hi { lo } else { rng.random_range(lo..hi) };
        let d = [dir[0] / norm * half, dir[1] / norm * half];
        let mut ends = [[p[0] - d[0], p[1] - d[1]], [p[0] + d[0], p[1] + d[1]]];
        if config.jitter > 0.0 {
            for e in ends.iter_mut().flatten() {
                *e += config.jitter * standard_normal(rng);
            }
        }
        if ends.iter().flatten().any(|v| v.abs() > 1.0) {
            return Ok(None);
        }
        LineSegment::new(ends[0], ends[1]).map(Some)
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 is kept away from zero.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Normalized image point to continuous pixel coordinates (column, row),
/// where pixel `(r, c)` covers `[c, c+1) × [r, r+1)`.
pub fn to_pixel(p: Point, h: usize, w: usize) -> [f64; 2] {
    [(p[0] + 1.0) * 0.5 * w as f64, (p[1] + 1.0) * 0.5 * h as f64]
}

/// Marks every pixel the segment passes through (supercover traversal).
pub fn rasterize(image: &mut Image, seg: &LineSegment) {
    let (h, w) = (image.h, image.w);
    let a = to_pixel(seg.p1(), h, w);
    let b = to_pixel(seg.p2(), h, w);
    let clamp_cell = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
    let (mut cx, mut cy) = (clamp_cell(a[0], w), clamp_cell(a[1], h));
    let (ex, ey) = (clamp_cell(b[0], w), clamp_cell(b[1], h));
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let step_x: isize = if dx > 0.0 { 1 } else { -1 };
    let step_y: isize = if dy > 0.0 { 1 } else { -1 };
    // Parametric distance to the next vertical/horizontal grid line.
    let next = |c: usize, start: f64, d: f64, step: isize| {
        if d == 0.0 {
            f64::INFINITY
        } else {
            let boundary = if step > 0 { c as f64 + 1.0 } else { c as f64 };
            (boundary - start) / d
        }
    };
    let mut t_x = next(cx, a[0], dx, step_x);
    let mut t_y = next(cy, a[1], dy, step_y);
    let dt_x = if dx == 0.0 { f64::INFINITY } else { 1.0 / dx.abs() };
    let dt_y = if dy == 0.0 { f64::INFINITY } else { 1.0 / dy.abs() };
    let max_steps = h + w + 2;
    for _ in 0..max_steps {
        image.data[cy * w + cx] = 1.0;
        if cx == ex && cy == ey {
            break;
        }
        if t_x < t_y {
            t_x += dt_x;
            cx = cx.saturating_add_signed(step_x).min(w - 1);
        } else {
            t_y += dt_y;
            cy = cy.saturating_add_signed(step_y).min(h - 1);
        }
    }
}

/// `count` scenes whose seeds are drawn from a stream keyed by `seed`, so
/// datasets built from different seeds do not share scenes.
pub fn generate_dataset(config: &GeneratorConfig, count: usize, seed: u64) -> Result<Vec<SceneRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| generate(config, rng.random())).collect()
}

/// Writes one JSON object per line.
pub fn write_dataset(records: &[SceneRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush().map_err(|e| Error::file(path, e))?;
    Ok(())
}

/// Reads a JSONL dataset; blank lines are skipped. Errors carry the 1-based
/// line number.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<SceneRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        let (out, vert, horiz) = GeneratorConfig::default().line_counts();
        assert_eq!(out + vert + horiz, 32);
        assert_eq!(out, 10);
    }

    #[test]
    fn rejects_invalid_ranges() {
        let mut c = GeneratorConfig::default();
        c.fov_range = (40.0, 180.0);
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::default();
        c.pitch_range = (10.0, -10.0);
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::default();
        c.outlier_fraction = 1.5;
        assert!(generate(&c, 0).is_err());
    }

    #[test]
    fn rasterize_horizontal_and_diagonal() {
        let mut img = Image::blank(8, 8);
        rasterize(&mut img, &LineSegment::new([-0.99, -0.99], [0.99, 0.99]).unwrap());
        for i in 0..8 {
            assert_eq!(img.data[i * 8 + i], 1.0);
        }
        let mut img = Image::blank(8, 8);
        rasterize(&mut img, &LineSegment::new([-0.9, 0.1], [0.9, 0.1]).unwrap());
        let row = 4;
        assert!((0..8).all(|c| img.data[row * 8 + c] == 1.0));
        assert_eq!(img.data.iter().sum::<f64>(), 8.0);
    }

    #[test]
    fn supercover_is_connected() {
        let mut img = Image::blank(16, 16);
        rasterize(&mut img, &LineSegment::new([-0.8, -0.3], [0.7, 0.55]).unwrap());
        let lit: Vec<(usize, usize)> = (0..256)
            .filter(|i| img.data[*i] == 1.0)
            .map(|i| (i / 16, i % 16))
            .collect();
        // Every lit pixel except the ends has a 4-connected lit neighbor.
        for &(r, c) in &lit {
            let n = lit
                .iter()
                .filter(|&&(r2, c2)| r.abs_diff(r2) + c.abs_diff(c2) == 1)
                .count();
            assert!(n >= 1);
        }
    }
}
