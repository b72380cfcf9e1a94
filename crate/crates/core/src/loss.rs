//! Training objectives: geometric losses on the camera outputs, focal losses
//! on the per-line heads, and their weighted total.
//!
//! Each loss exists twice: a plain `f64` version used for checking and
//! reporting, and a tape version used for training.

use serde::{Deserialize, Serialize};

use crate::camera::{camera_to_geometry, horizon_boundaries, HorizonLine, DEGENERATE_HORIZON_EPS};
use crate::error::{Error, Result};
use crate::line::{dot3, norm3, LineClass};
use crate::scene::SceneRecord;
use crate::tensor::{Tape, Tensor, Var};

/// Focusing exponent of the focal loss.
pub const FOCAL_GAMMA: f64 = 2.0;

/// Probabilities are clamped to `[ε, 1 − ε]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// `1 − |z·ẑ| / (‖z‖‖ẑ‖)`; zero for `ẑ = ±z`.
pub fn loss_zvp(z_gt: &[f64; 3], z_pred: &[f64; 3]) -> Result<f64> {
    let (a, b) = (norm3(z_gt), norm3(z_pred));
    if a == 0.0 || b == 0.0 {
        return Err(Error::contract("zenith loss of a zero vector"));
    }
    Ok(1.0 - (dot3(z_gt, z_pred) / (a * b)).abs())
}

/// Larger L1 distance between corresponding horizon boundary points at the
/// left and right image edges.
pub fn loss_hl(hl_gt: &HorizonLine, hl_pred: &HorizonLine) -> Result<f64> {
    let (gl, gr) = horizon_boundaries(hl_gt)?;
    let (pl, pr) = horizon_boundaries(hl_pred)?;
    let l1 = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).abs() + (p[1] - q[1]).abs();
    Ok(l1(gl, pl).max(l1(gr, pr)))
}

/// Absolute FoV difference in degrees.
pub fn loss_fov(f_gt: f64, f_pred: f64) -> f64 {
    (f_gt - f_pred).abs()
}

/// Mean focal loss over the unmasked elements. `mask[i] = false` drops
/// element `i`; with every element masked the loss is zero.
pub fn focal_loss(q: &[f64], targets: &[bool], mask: &[bool]) -> Result<f64> {
    if q.len() != targets.len() || q.len() != mask.len() {
        return Err(Error::contract(format!(
            "focal loss: {} probabilities, {} targets, {} mask entries",
            q.len(),
            targets.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&q, &t), &m) in q.iter().zip(targets).zip(mask) {
        if !m {
            continue;
        }
        let q = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
        sum += if t {
            (1.0 - q).powf(FOCAL_GAMMA) * q.ln()
        } else {
            q.powf(FOCAL_GAMMA) * (1.0 - q).ln()
        };
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { -sum / n as f64 })
}

/// How the five components are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Camera terms weighted 5, line terms 1.
    #[default]
    CameraFirst,
    /// Every term weighted 1.
    Equal,
}

impl Weighting {
    /// `(zvp, hl, fov, class, score)` weights.
    pub fn weights(self) -> [f64; 5] {
        match self {
            Self::CameraFirst => [5.0, 5.0, 5.0, 1.0, 1.0],
            Self::Equal => [1.0; 5],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_zvp: f64,
    pub l_hl: f64,
    pub l_fov: f64,
    pub l_class: f64,
    pub l_score: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Combines components; `total` is exactly the weighted sum evaluated in
    /// the order zvp, hl, fov, score, class.
    pub fn new(l_zvp: f64, l_hl: f64, l_fov: f64, l_class: f64, l_score: f64, weighting: Weighting) -> Self {
        let [wz, wh, wf, wc, ws] = weighting.weights();
        let total = wz * l_zvp + wh * l_hl + wf * l_fov + ws * l_score + wc * l_class;
        Self {
            l_zvp,
            l_hl,
            l_fov,
            l_class,
            l_score,
            total,
        }
    }

    /// Component-wise accumulation, used for epoch averages.
    pub fn accumulate(&mut self, other: &Self) {
        self.l_zvp += other.l_zvp;
        self.l_hl += other.l_hl;
        self.l_fov += other.l_fov;
        self.l_class += other.l_class;
        self.l_score += other.l_score;
        self.total += other.total;
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            l_zvp: self.l_zvp * k,
            l_hl: self.l_hl * k,
            l_fov: self.l_fov * k,
            l_class: self.l_class * k,
            l_score: self.l_score * k,
            total: self.total * k,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_zvp, self.l_hl, self.l_fov, self.l_class, self.l_score, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Ground truth for one image, padded to a fixed line count.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub zvp: [f64; 3],
    pub hl: [f64; 3],
    pub fov: f64,
    pub classes: Vec<LineClass>,
    pub passes_vp: Vec<bool>,
    /// `false` for padding slots.
    pub mask: Vec<bool>,
}

impl Targets {
    pub fn from_record(record: &SceneRecord, n_lines: usize) -> Result<Self> {
        let n = record.labels.len();
        if n > n_lines {
            return Err(Error::Incompatible(format!(
                "record {} has {n} lines but the model takes n_lines = {n_lines}",
                record.seed
            )));
        }
        let (z, hl) = camera_to_geometry(&record.camera)?;
        let mut classes: Vec<LineClass> = record.labels.iter().map(|l| l.class).collect();
        let mut passes_vp: Vec<bool> = record.labels.iter().map(|l| l.passes_vp).collect();
        let mut mask = vec![true; n];
        classes.resize(n_lines, LineClass::Other);
        passes_vp.resize(n_lines, false);
        mask.resize(n_lines, false);
        Ok(Self {
            zvp: z.0,
            hl: hl.0,
            fov: record.camera.fov,
            classes,
            passes_vp,
            mask,
        })
    }

    /// One-hot class targets, row-major `n_lines × 3`.
    pub fn one_hot(&self) -> Vec<bool> {
        self.classes
            .iter()
            .flat_map(|&c| LineClass::ALL.map(|k| k == c))
            .collect()
    }

    /// Line mask repeated for each of the three class columns.
    pub fn class_mask(&self) -> Vec<bool> {
        self.mask.iter().flat_map(|&m| [m; 3]).collect()
    }
}

/// Model outputs recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    /// `[1×3]`, unit norm.
    pub zvp: Var,
    /// `[1×3]`, unit norm.
    pub hl: Var,
    /// `[1×1]`, degrees.
    pub fov: Var,
    /// `[n×3]` raw logits.
    pub class_logits: Var,
    /// `[n×1]` probabilities.
    pub score: Var,
}

/// Loss terms recorded on a tape, plus their values.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// The horizon term was dropped because a horizon missed the side edges.
    pub hl_excluded: bool,
}

pub fn zvp_loss_var(tape: &mut Tape, z_gt: &[f64; 3], z_pred: Var) -> Result<Var> {
    let n = norm3(z_gt);
    if n == 0.0 {
        return Err(Error::contract("zenith loss of a zero vector"));
    }
    let g = tape.constant(Tensor::matrix(3, 1, z_gt.map(|v| v / n).to_vec())?);
    let dot = tape.matmul(z_pred, g)?;
    let sq = tape.square(z_pred);
    let sq = tape.sum(sq);
    let norm = tape.sqrt(sq);
    let dot = tape.reshape(dot, vec![1])?;
    let cos = tape.div(dot, norm)?;
    let cos = tape.abs(cos);
    let neg = tape.scale(cos, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Returns `None` when either horizon is degenerate.
pub fn hl_loss_var(tape: &mut Tape, hl_gt: &[f64; 3], hl_pred: Var) -> Result<Option<Var>> {
    let Ok((gl, gr)) = horizon_boundaries(&HorizonLine(*hl_gt)) else {
        return Ok(None);
    };
    let p = tape.value(hl_pred).data().to_vec();
    if p.len() != 3 {
        return Err(Error::contract("horizon prediction must have 3 entries"));
    }
    let n = norm3(&[p[0], p[1], p[2]]);
    if n == 0.0 || (p[1] / n).abs() <= DEGENERATE_HORIZON_EPS {
        return Ok(None);
    }
    // Left edge y = (a − c)/b, right edge y = −(a + c)/b.
    let coeff = |tape: &mut Tape, i: usize| -> Result<Var> {
        let flat = tape.reshape(hl_pred, vec![3])?;
        tape.slice(flat, 0, i, 1)
    };
    let (a, b, c) = (coeff(tape, 0)?, coeff(tape, 1)?, coeff(tape, 2)?);
    let a_minus_c = tape.sub(a, c)?;
    let yl = tape.div(a_minus_c, b)?;
    let a_plus_c = tape.add(a, c)?;
    let yr = tape.div(a_plus_c, b)?;
    let yr = tape.scale(yr, -1.0);
    let dl = tape.add_scalar(yl, -gl[1]);
    let dl = tape.abs(dl);
    let dr = tape.add_scalar(yr, -gr[1]);
    let dr = tape.abs(dr);
    let m = tape.maximum(dl, dr)?;
    Ok(Some(tape.reshape(m, vec![1])?))
}

pub fn fov_loss_var(tape: &mut Tape, f_gt: f64, f_pred: Var) -> Result<Var> {
    let d = tape.add_scalar(f_pred, -f_gt);
    let d = tape.abs(d);
    tape.reshape(d, vec![1])
}

/// Tape version of [`focal_loss`] on a probability tensor of any shape.
pub fn focal_loss_var(tape: &mut Tape, q: Var, targets: &[bool], mask: &[bool]) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    let len = tape.value(q).len();
    if targets.len() != len || mask.len() != len {
        return Err(Error::contract(format!(
            "focal loss: {len} probabilities, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let indicator = |want: bool| {
        let data = targets
            .iter()
            .zip(mask)
            .map(|(&t, &m)| f64::from(m && t == want))
            .collect();
        Tensor::new(shape.clone(), data)
    };
    let pos = tape.constant(indicator(true)?);
    let neg = tape.constant(indicator(false)?);
    let q = tape.clamp(q, PROB_EPS, 1.0 - PROB_EPS);
    let one_minus = tape.scale(q, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);

    let mod_pos = tape.powf(one_minus, FOCAL_GAMMA);
    let log_q = tape.ln(q);
    let term_pos = tape.mul(mod_pos, log_q)?;
    let term_pos = tape.mul(term_pos, pos)?;

    let mod_neg = tape.powf(q, FOCAL_GAMMA);
    let log_1q = tape.ln(one_minus);
    let term_neg = tape.mul(mod_neg, log_1q)?;
    let term_neg = tape.mul(term_neg, neg)?;

    let both = tape.add(term_pos, term_neg)?;
    let s = tape.sum(both);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Weighted total of all five terms for one image.
pub fn total_loss(tape: &mut Tape, pred: &Prediction, targets: &Targets, weighting: Weighting) -> Result<LossVars> {
    let l_zvp = zvp_loss_var(tape, &targets.zvp, pred.zvp)?;
    let hl = hl_loss_var(tape, &targets.hl, pred.hl)?;
    let hl_excluded = hl.is_none();
    let l_hl = match hl {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let l_fov = fov_loss_var(tape, targets.fov, pred.fov)?;
    let probs = tape.sigmoid(pred.class_logits);
    let l_class = focal_loss_var(tape, probs, &targets.one_hot(), &targets.class_mask())?;
    let l_score = focal_loss_var(tape, pred.score, &targets.passes_vp, &targets.mask)?;

    let [wz, wh, wf, wc, ws] = weighting.weights();
    let terms = [(l_zvp, wz), (l_hl, wh), (l_fov, wf), (l_score, ws), (l_class, wc)];
    let mut total = tape.scale(terms[0].0, terms[0].1);
    for &(v, w) in &terms[1..] {
        let scaled = tape.scale(v, w);
        total = tape.add(total, scaled)?;
    }
    let value = |tape: &Tape, v: Var| tape.value(v).data()[0];
    let breakdown = LossBreakdown::new(
        value(tape, l_zvp),
        value(tape, l_hl),
        value(tape, l_fov),
        value(tape, l_class),
        value(tape, l_score),
        weighting,
    );
    Ok(LossVars {
        total,
        breakdown,
        hl_excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zvp_examples() {
        let z = [0.3, -0.8, 0.2];
        assert!(loss_zvp(&z, &z).unwrap().abs() < 1e-15);
        assert!(loss_zvp(&z, &z.map(|v| -v)).unwrap().abs() < 1e-15);
        assert!((loss_zvp(&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(loss_zvp(&[0.0; 3], &z).is_err());
    }

    #[test]
    fn fov_examples() {
        assert_eq!(loss_fov(60.0, 65.0), 5.0);
        assert_eq!(loss_fov(65.0, 60.0), 5.0);
        assert_eq!(loss_fov(50.0, 50.0), 0.0);
    }

    #[test]
    fn focal_closed_forms() {
        let expected = -0.25 * 0.5f64.ln();
        assert!((focal_loss(&[0.5], &[true], &[true]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.1733).abs() < 1e-4);
        let half = focal_loss(&[0.5; 4], &[true, false, true, false], &[true; 4]).unwrap();
        assert!((half - expected).abs() < 1e-15);
        assert!(focal_loss(&[1.0 - 1e-9], &[true], &[true]).unwrap() < 1e-12);
        assert_eq!(focal_loss(&[0.3], &[true], &[false]).unwrap(), 0.0);
    }

    #[test]
    fn weighted_totals() {
        let b = LossBreakdown::new(0.1, 0.2, 0.3, 0.4, 0.5, Weighting::CameraFirst);
        assert!((b.total - 3.9).abs() < 1e-12);
        let e = LossBreakdown::new(0.1, 0.2, 0.3, 0.4, 0.5, Weighting::Equal);
        assert!((e.total - 1.5).abs() < 1e-12);
        assert_eq!(LossBreakdown::new(0.0, 0.0, 0.0, 0.0, 0.0, Weighting::CameraFirst).total, 0.0);
    }
}
