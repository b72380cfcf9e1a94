//! Deformable attention over a single feature map and over a feature pyramid.
//!
//! Each query attends to a handful of sampled locations around its
//! reference point instead of to every pixel, so the cost is linear in the
//! number of queries.

use std::f64::consts::TAU;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::kernels::Corner;
use crate::tensor::{Tape, Tensor, Var};

/// One bilinear neighbor of a sampling location, addressed by its row in
/// the flattened value matrix.
struct Tap {
    row: usize,
    weight: f64,
    dx: f64,
    dy: f64,
}

/// Level shapes `(h, w)` in flattening order (finest first).
pub type LevelShapes = [(usize, usize)];

/// Row offset of each level inside the flattened `[S×d]` value matrix.
pub fn level_starts(shapes: &LevelShapes) -> Vec<usize> {
    shapes
        .iter()
        .scan(0, |acc, &(h, w)| {
            let start = *acc;
            *acc += h * w;
            Some(start)
        })
        .collect()
}

/// Ordered feature maps sharing a channel depth, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::contract("feature pyramid has no levels"));
        }
        let d = match levels[0].shape() {
            [_, _, d] => *d,
            s => return Err(Error::contract(format!("pyramid level must be H×W×d, got {s:?}"))),
        };
        for (i, l) in levels.iter().enumerate() {
            match l.shape() {
                [h, w, c] if *c == d && *h > 0 && *w > 0 => {}
                s => {
                    return Err(Error::contract(format!(
                        "pyramid level {i} has shape {s:?}, expected H×W×{d}"
                    )))
                }
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn depth(&self) -> usize {
        self.levels[0].shape()[2]
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.shape()[0], l.shape()[1])).collect()
    }

    /// Stacks every pixel of every level into one `[S×d]` matrix.
    pub fn flatten(&self) -> Tensor {
        let d = self.depth();
        let data: Vec<f64> = self.levels.iter().flat_map(|l| l.data().iter().copied()).collect();
        Tensor::new(vec![data.len() / d, d], data).expect("levels share d")
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(flat: &Tensor, shapes: &LevelShapes) -> Result<Self> {
        let d = flat.cols();
        let starts = level_starts(shapes);
        let levels = shapes
            .iter()
            .zip(starts)
            .map(|(&(h, w), s)| Tensor::new(vec![h, w, d], flat.data()[s * d..(s + h * w) * d].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }
}

/// A pyramid recorded on a tape as one flattened `[S×d]` variable.
#[derive(Clone, Debug)]
pub struct PyramidVar {
    pub flat: Var,
    pub shapes: Vec<(usize, usize)>,
}

impl PyramidVar {
    pub fn record(tape: &mut Tape, pyramid: &FeaturePyramid, requires_grad: bool) -> Self {
        Self {
            flat: tape.leaf(pyramid.flatten(), requires_grad),
            shapes: pyramid.shapes(),
        }
    }

    pub fn len(&self) -> usize {
        self.shapes.iter().map(|(h, w)| h * w).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Normalized 2D anchor in `[0,1]²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint(pub [f64; 2]);

impl ReferencePoint {
    /// Clamps each component into `[0,1]`.
    pub fn new(x: f64, y: f64) -> Self {
        Self([x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)])
    }

    /// Pixel-center grid of an `h×w` map, row-major.
    pub fn grid(h: usize, w: usize) -> Vec<Self> {
        (0..h)
            .flat_map(|r| (0..w).map(move |c| Self::new((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64)))
            .collect()
    }

    /// Level-`(h, w)` pixel coordinates of this point.
    pub fn to_pixels(self, h: usize, w: usize) -> [f64; 2] {
        [self.0[0] * w as f64 - 0.5, self.0[1] * h as f64 - 0.5]
    }

    pub fn stack(points: &[Self]) -> Tensor {
        Tensor::new(vec![points.len(), 2], points.iter().flat_map(|p| p.0).collect())
            .expect("two coordinates per point")
    }
}

impl Tape {
    /// Weighted bilinear reads from a flattened pyramid.
    ///
    /// `value` is `[S×d]` with the channels split evenly over `heads`.
    /// `locations` is `[Q × heads·L·points·2]` in level pixel coordinates and
    /// `weights` is `[Q × heads·L·points]`, both indexed by
    /// `(head·L + level)·points + k`. Returns `[Q×d]`, where each head writes
    /// its own channel slice.
    pub fn ms_deform_sample(
        &mut self,
        value: Var,
        shapes: &LevelShapes,
        heads: usize,
        points: usize,
        locations: Var,
        weights: Var,
    ) -> Result<Var> {
        let levels = shapes.len();
        let total: usize = shapes.iter().map(|(h, w)| h * w).sum();
        let &[s, d] = self.shape(value) else {
            return Err(Error::contract("ms_deform_sample: value must be a matrix"));
        };
        if levels == 0 || heads == 0 || points == 0 {
            return Err(Error::contract("ms_deform_sample: levels, heads and points must be ≥ 1"));
        }
        if s != total || d % heads != 0 {
            return Err(Error::contract(format!(
                "ms_deform_sample: value is {s}×{d}, levels cover {total} rows, {heads} heads"
            )));
        }
        let per_query = heads * levels * points;
        let q = match (self.shape(locations), self.shape(weights)) {
            (&[q, lc], &[qw, wc]) if q == qw && lc == 2 * per_query && wc == per_query => q,
            (ls, ws) => {
                return Err(Error::ShapeMismatch {
                    op: "ms_deform_sample",
                    lhs: ls.to_vec(),
                    rhs: ws.to_vec(),
                })
            }
        };
        let dh = d / heads;
        let starts = level_starts(shapes);
        let locs = self.value(locations).data();
        let wts = self.value(weights).clone();

        // Head of a sample index `idx` within one query.
        let head_of = move |idx: usize| idx / (levels * points);
        let keep = [value, locations, weights].iter().any(|&x| self.requires_grad(x));

        // Bilinear taps of every sample, kept for the backward pass when one
        // is needed. Sample `i = q·per_query + idx` owns
        // `taps[bounds[i]..bounds[i + 1]]`.
        let mut taps: Vec<Tap> = Vec::with_capacity(if keep { q * per_query * 4 } else { 0 });
        let mut bounds = Vec::with_capacity(if keep { q * per_query + 1 } else { 0 });
        bounds.push(0);
        let vals = self.value(value).clone();
        let v = vals.data();
        let mut out = vec![0.0; q * d];
        for qi in 0..q {
            for m in 0..heads {
                let lo = m * dh;
                let dst = &mut out[qi * d + lo..qi * d + lo + dh];
                for (l, &(h, w)) in shapes.iter().enumerate() {
                    for k in 0..points {
                        let idx = (m * levels + l) * points + k;
                        let at = qi * 2 * per_query + 2 * idx;
                        let a = wts.data()[qi * per_query + idx];
                        for c in Corner::around(locs[at], locs[at + 1], h, w).into_iter().flatten() {
                            let row = starts[l] + c.index;
                            let aw = a * c.weight;
                            let src = &v[row * d + lo..row * d + lo + dh];
                            dst.iter_mut().zip(src).for_each(|(o, s)| *o += aw * s);
                            if keep {
                                taps.push(Tap {
                                    row,
                                    weight: c.weight,
                                    dx: c.dx,
                                    dy: c.dy,
                                });
                            }
                        }
                        if keep {
                            bounds.push(taps.len());
                        }
                    }
                }
            }
        }
        self.count_macs((q * per_query * dh * 5) as u64);
        let out = Tensor::from_parts(vec![q, d], out);
        Ok(self.record(out, &[value, locations, weights], move |g, need| {
            let v = vals.data();
            let mut gv = need[0].then(|| vec![0.0; s * d]);
            let mut gl = need[1].then(|| vec![0.0; q * 2 * per_query]);
            let mut gw = need[2].then(|| vec![0.0; q * per_query]);
            if let Some(gv) = gv.as_mut() {
                for qi in 0..q {
                    for idx in 0..per_query {
                        let i = qi * per_query + idx;
                        let a = wts.data()[i];
                        let lo = head_of(idx) * dh;
                        let gq = &g[qi * d + lo..qi * d + lo + dh];
                        for t in &taps[bounds[i]..bounds[i + 1]] {
                            let aw = a * t.weight;
                            let row = t.row * d + lo;
                            gv[row..row + dh].iter_mut().zip(gq).for_each(|(o, s)| *o += aw * s);
                        }
                    }
                }
            }
            if gl.is_some() || gw.is_some() {
                for qi in 0..q {
                    for idx in 0..per_query {
                        let i = qi * per_query + idx;
                        let lo = head_of(idx) * dh;
                        let gq = &g[qi * d + lo..qi * d + lo + dh];
                        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
                        for t in &taps[bounds[i]..bounds[i + 1]] {
                            let row = t.row * d + lo;
                            let dot: f64 = v[row..row + dh].iter().zip(gq).map(|(x, y)| x * y).sum();
                            sx += t.dx * dot;
                            sy += t.dy * dot;
                            sw += t.weight * dot;
                        }
                        let a = wts.data()[i];
                        if let Some(gl) = gl.as_mut() {
                            gl[2 * i] = a * sx;
                            gl[2 * i + 1] = a * sy;
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[i] = sw;
                        }
                    }
                }
            }
            vec![gv, gl, gw]
        }))
    }
}

/// Offset bias placing the initial samples on a unit ring around the
/// reference point, rotated per head so heads start at different angles.
fn ring_bias(heads: usize, levels: usize, points: usize) -> Vec<f64> {
    let mut bias = vec![0.0; heads * levels * points * 2];
    for m in 0..heads {
        for l in 0..levels {
            for k in 0..points {
                let theta = TAU * (k as f64 + m as f64 / heads as f64) / points as f64;
                let idx = (m * levels + l) * points + k;
                bias[2 * idx] = theta.cos();
                bias[2 * idx + 1] = theta.sin();
            }
        }
    }
    bias
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeformConfig {
    pub d: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    /// Apply value and output projections around the sampling step.
    pub project: bool,
}

impl DeformConfig {
    fn validate(&self) -> Result<()> {
        if self.points < 1 {
            return Err(Error::contract("deformable attention needs K ≥ 1 sampling points"));
        }
        if self.levels < 1 {
            return Err(Error::contract("deformable attention needs at least one level"));
        }
        if self.heads < 1 || self.d % self.heads != 0 {
            return Err(Error::contract(format!(
                "channel depth {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    fn samples(&self) -> usize {
        self.heads * self.levels * self.points
    }
}

/// Result of one attention call, with the intermediate weights and sample
/// locations kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct DeformOutput {
    /// `[Q×d]`.
    pub output: Var,
    /// `[Q × heads × L·K]`; each head's row sums to one.
    pub weights: Var,
    /// `[Q × heads·L·K·2]` in level pixel coordinates.
    pub locations: Var,
}

/// Multi-head, multi-scale deformable attention.
#[derive(Clone, Debug)]
pub struct MsDeformAttn {
    pub config: DeformConfig,
    pub value_proj: Option<Linear>,
    pub offset_proj: Linear,
    pub weight_proj: Linear,
    pub output_proj: Option<Linear>,
}

impl MsDeformAttn {
    pub fn new(store: &mut ParamStore, name: &str, config: DeformConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let DeformConfig {
            d,
            heads,
            levels,
            points,
            project,
        } = config;
        let n = config.samples();
        Ok(Self {
            config,
            value_proj: project.then(|| Linear::new(store, &format!("{name}.value"), d, d, rng)),
            offset_proj: Linear::constant(store, &format!("{name}.offset"), d, ring_bias(heads, levels, points)),
            weight_proj: Linear::constant(store, &format!("{name}.weight"), d, vec![0.0; n]),
            output_proj: project.then(|| Linear::new(store, &format!("{name}.output"), d, d, rng)),
        })
    }

    /// Attends from `query` `[Q×d]` with normalized reference points
    /// `refs` `[Q×2]` into `input`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, query: Var, refs: Var, input: &PyramidVar) -> Result<DeformOutput> {
        if input.shapes.is_empty() {
            return Err(Error::contract("deformable attention over an empty pyramid"));
        }
        if input.shapes.len() != self.config.levels {
            return Err(Error::contract(format!(
                "attention built for {} levels, pyramid has {}",
                self.config.levels,
                input.shapes.len()
            )));
        }
        let refs = tape.clamp(refs, 0.0, 1.0);
        let base = self.expand_refs(tape, refs, &input.shapes)?;
        let base = tape.add_scalar(base, -0.5);
        self.attend(tape, p, query, base, input)
    }

    /// `[Q×2]` normalized points → `[Q × heads·L·K·2]` scaled by each level's
    /// width and height.
    fn expand_refs(&self, tape: &mut Tape, refs: Var, shapes: &LevelShapes) -> Result<Var> {
        let DeformConfig {
            heads,
            levels,
            points,
            ..
        } = self.config;
        let cols = 2 * self.config.samples();
        let mut e = vec![0.0; 2 * cols];
        for m in 0..heads {
            for (l, &(h, w)) in shapes.iter().enumerate() {
                for k in 0..points {
                    let idx = (m * levels + l) * points + k;
                    e[2 * idx] = w as f64;
                    e[cols + 2 * idx + 1] = h as f64;
                }
            }
        }
        let e = tape.constant(Tensor::new(vec![2, cols], e)?);
        tape.matmul(refs, e)
    }

    /// Shared tail: sampling locations are `base` plus predicted offsets.
    fn attend(&self, tape: &mut Tape, p: &Bound, query: Var, base: Var, input: &PyramidVar) -> Result<DeformOutput> {
        let DeformConfig {
            heads,
            levels,
            points,
            ..
        } = self.config;
        let q = tape.shape(query)[0];
        let offsets = self.offset_proj.forward(tape, p, query)?;
        let locations = tape.add(base, offsets)?;
        let logits = self.weight_proj.forward(tape, p, query)?;
        let logits = tape.reshape(logits, vec![q, heads, levels * points])?;
        let weights = tape.softmax(logits, 2)?;
        let flat_weights = tape.reshape(weights, vec![q, self.config.samples()])?;
        let value = match &self.value_proj {
            Some(lin) => lin.forward(tape, p, input.flat)?,
            None => input.flat,
        };
        let sampled = tape.ms_deform_sample(value, &input.shapes, heads, points, locations, flat_weights)?;
        let output = match &self.output_proj {
            Some(lin) => lin.forward(tape, p, sampled)?,
            None => sampled,
        };
        Ok(DeformOutput {
            output,
            weights,
            locations,
        })
    }
}

/// Single-head, single-scale deformable attention reading the map directly.
///
/// Reference points are pixel coordinates of the map. Offsets and weights
/// come from linear projections of the query and the samples are bilinear
/// reads, so with `K = 1` the output is exactly `x(p + Δp)`.
#[derive(Clone, Debug)]
pub struct DeformAttn {
    pub points: usize,
    pub offset_proj: Linear,
    pub weight_proj: Linear,
}

impl DeformAttn {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, points: usize) -> Result<Self> {
        if points < 1 {
            return Err(Error::contract("deformable attention needs K ≥ 1 sampling points"));
        }
        Ok(Self {
            points,
            offset_proj: Linear::constant(store, &format!("{name}.offset"), d, ring_bias(1, 1, points)),
            weight_proj: Linear::constant(store, &format!("{name}.weight"), d, vec![0.0; points]),
        })
    }

    /// `query` `[Q×d]`, `refs` `[Q×2]` in pixels, `map` `[H×W×d]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, query: Var, refs: Var, map: Var) -> Result<DeformOutput> {
        let k = self.points;
        let q = tape.shape(query)[0];
        let d = tape.shape(map)[2];
        let offsets = self.offset_proj.forward(tape, p, query)?;
        let spread = tape.constant(Tensor::new(
            vec![2, 2 * k],
            (0..2).flat_map(|r| (0..2 * k).map(move |c| f64::from(c % 2 == r))).collect(),
        )?);
        let base = tape.matmul(refs, spread)?;
        let locations = tape.add(base, offsets)?;
        let logits = self.weight_proj.forward(tape, p, query)?;
        let weights = tape.softmax(logits, 1)?;

        let pts = tape.reshape(locations, vec![q * k, 2])?;
        let samples = tape.bilinear_sample(map, pts)?;
        // Scale every sample row by its weight, then sum each query's K rows.
        let w_col = tape.reshape(weights, vec![q * k, 1])?;
        let ones = tape.constant(Tensor::full(vec![1, d], 1.0));
        let w_rows = tape.matmul(w_col, ones)?;
        let scaled = tape.mul(samples, w_rows)?;
        let mut pool = vec![0.0; q * q * k];
        for i in 0..q {
            pool[i * q * k + i * k..i * q * k + (i + 1) * k].fill(1.0);
        }
        let pool = tape.constant(Tensor::new(vec![q, q * k], pool)?);
        let output = tape.matmul(pool, scaled)?;
        let weights = tape.reshape(weights, vec![q, 1, k])?;
        Ok(DeformOutput {
            output,
            weights,
            locations,
        })
    }
}

/// One row of the attention cost comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub resolution: String,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub k: usize,
    pub mode: String,
    /// Counted multiply-accumulates.
    pub flops: u64,
    /// Fastest of the timed repetitions.
    pub wall_ns: u128,
}

pub const PROBE_HEADER: &str = "resolution,h,w,d,k,mode,flops,wall_ns";

/// Heads used by the deformable side of the probe.
pub const PROBE_HEADS: usize = 4;

/// Compares dense attention over all pixels (queries = keys = values = the
/// raw pixel features, no projections) with a deformable self-attention
/// layer on a single `size×size` map, for each size. Nothing is recorded for
/// gradients. Each repetition runs every size and mode once, so drift in
/// machine speed affects all of them alike; the fastest time is kept.
pub fn complexity_probe(sizes: &[usize], d: usize, k: usize, repeats: usize) -> Result<Vec<ProbeRow>> {
    if sizes.len() < 2 {
        return Err(Error::contract("complexity probe needs at least two resolutions"));
    }
    if sizes.contains(&0) || d == 0 || k == 0 || repeats == 0 {
        return Err(Error::contract("complexity probe sizes, d, k and repeats must be ≥ 1"));
    }
    let heads = if d % PROBE_HEADS == 0 { PROBE_HEADS } else { 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let attn = MsDeformAttn::new(
        &mut store,
        "probe",
        DeformConfig {
            d,
            heads,
            levels: 1,
            points: k,
            project: true,
        },
        &mut rng,
    )?;
    let inputs: Vec<(Tensor, Tensor)> = sizes
        .iter()
        .map(|&n| {
            let features = crate::nn::uniform(&mut rng, vec![n * n, d], 1.0);
            (features, ReferencePoint::stack(&ReferencePoint::grid(n, n)))
        })
        .collect();
    let dense = |tape: &mut Tape, (features, _): &(Tensor, Tensor), _| {
        let x = tape.constant(features.clone());
        tape.attention(x, x, x).map(drop)
    };
    let deformable = |tape: &mut Tape, (features, refs): &(Tensor, Tensor), n| {
        let p = store.bind(tape, false);
        let x = tape.constant(features.clone());
        let r = tape.constant(refs.clone());
        let input = PyramidVar {
            flat: x,
            shapes: vec![(n, n)],
        };
        attn.forward(tape, &p, x, r, &input).map(drop)
    };
    let modes: [(&str, &dyn Fn(&mut Tape, &(Tensor, Tensor), usize) -> Result<()>); 2] =
        [("dense", &dense), ("deformable", &deformable)];
    // (macs, best wall time) per size and mode.
    let mut best = vec![[(0u64, u128::MAX); 2]; sizes.len()];
    for _ in 0..repeats {
        for ((&n, input), slot) in sizes.iter().zip(&inputs).zip(best.iter_mut()) {
            for ((_, run), (macs, wall)) in modes.iter().zip(slot.iter_mut()) {
                let mut tape = Tape::new();
                let start = Instant::now();
                run(&mut tape, input, n)?;
                *wall = (*wall).min(start.elapsed().as_nanos());
                *macs = tape.macs();
            }
        }
    }
    let mut rows = Vec::new();
    for (&n, slot) in sizes.iter().zip(&best) {
        for ((mode, _), &(flops, wall_ns)) in modes.iter().zip(slot) {
            rows.push(ProbeRow {
                resolution: format!("{n}x{n}"),
                h: n,
                w: n,
                d,
                k,
                mode: mode.to_string(),
                flops,
                wall_ns,
            });
        }
    }
    Ok(rows)
}

pub fn write_probe_csv(rows: &[ProbeRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{PROBE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.resolution, r.h, r.w, r.d, r.k, r.mode, r.flops, r.wall_ns
        )?;
    }
    Ok(())
}
