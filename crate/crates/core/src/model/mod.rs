//! The calibration transformer.
//!
//! A patch-embedding pyramid feeds a deformable encoder. The decoder then
//! refines three camera queries together with one query per line segment.
//! Line queries carry a positional part built from the segment's
//! sign-free encoding and a content part read from the finest feature map
//! along the segment.

mod checkpoint;
mod layers;
mod train;

use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layers::{DecoderLayer, EncoderLayer, MultiHeadAttention};
pub use train::{
    learning_rate, train, write_loss_csv, EpochLosses, TrainConfig, LOSS_CSV_HEADER,
};

use crate::deform::{DeformConfig, PyramidVar, ReferencePoint};
use crate::error::{Error, Result};
use crate::line::LineSegment;
use crate::loss::Prediction;
use crate::nn::{uniform, Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::scene::{Image, SceneRecord};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square input image in pixels.
    pub image_size: usize,
    pub d: usize,
    pub n_lines: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Sampling points per head per level in the encoder.
    pub k_enc: usize,
    /// Sampling points per head per level in the decoder.
    pub k_dec: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward blocks.
    pub ffn: usize,
    /// Patch strides, finest first; one pyramid level each.
    pub strides: Vec<usize>,
    /// Points read along each segment for its content query.
    pub line_samples: usize,
    /// Re-add the line positional queries before every decoder layer. When
    /// off they enter before the first layer only.
    pub propagate_qpos: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            d: 64,
            n_lines: 32,
            encoder_layers: 3,
            decoder_layers: 4,
            k_enc: 32,
            k_dec: 8,
            heads: 4,
            ffn: 128,
            strides: vec![8, 16],
            line_samples: crate::line::LINE_SAMPLES,
            propagate_qpos: true,
        }
    }
}

impl ModelConfig {
    /// Full-size widths: 256 channels and 512 line queries.
    pub fn paper_scale() -> Self {
        Self {
            image_size: 512,
            d: 256,
            n_lines: 512,
            heads: 8,
            ffn: 1024,
            ..Self::default()
        }
    }

    /// A 16×16 model small enough for an exhaustive gradient check.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            d: 8,
            n_lines: 3,
            encoder_layers: 1,
            decoder_layers: 2,
            k_enc: 2,
            k_dec: 2,
            heads: 2,
            ffn: 16,
            strides: vec![4, 8],
            line_samples: 4,
            propagate_qpos: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(m));
        if self.d == 0 || self.d % 4 != 0 {
            return fail(format!("d = {} must be a positive multiple of 4", self.d));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("d = {} is not divisible by {} heads", self.d, self.heads));
        }
        if self.strides.is_empty() || self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("strides {:?} must be non-empty and increasing", self.strides));
        }
        if let Some(s) = self.strides.iter().find(|&&s| s == 0 || self.image_size % s != 0) {
            return fail(format!("image size {} is not divisible by stride {s}", self.image_size));
        }
        if self.n_lines == 0 || self.k_enc == 0 || self.k_dec == 0 || self.ffn == 0 {
            return fail("n_lines, k_enc, k_dec and ffn must be ≥ 1".into());
        }
        if self.line_samples < 2 {
            return fail("line_samples must be ≥ 2".into());
        }
        Ok(())
    }

    /// `(h, w)` of every pyramid level.
    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        self.strides
            .iter()
            .map(|s| (self.image_size / s, self.image_size / s))
            .collect()
    }
}

/// Model outputs for one image, as plain values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub zvp: [f64; 3],
    pub hl: [f64; 3],
    /// Degrees.
    pub fov: f64,
    /// One row per real (unpadded) line.
    pub class_logits: Vec<[f64; 3]>,
    pub score: Vec<f64>,
}

/// Positional and content parts of every line query, padded to `n_lines`.
#[derive(Clone, Copy, Debug)]
pub struct LineQueries {
    pub pos: Var,
    pub content: Var,
    /// Normalized segment midpoints, `[n_lines×2]`.
    pub refs: Var,
    pub real: usize,
}

#[derive(Clone, Debug)]
struct Heads {
    zvp: Linear,
    hl: Linear,
    fov: Linear,
    class: Linear,
    score: Linear,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    patch: Vec<Linear>,
    level_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    line_pos: Linear,
    line_content: Linear,
    null_pos: ParamId,
    null_content: ParamId,
    camera_content: ParamId,
    camera_pos: ParamId,
    decoder: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    heads: Heads,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let rng = &mut rng;
        let d = config.d;
        let levels = config.strides.len();

        let patch = config
            .strides
            .iter()
            .enumerate()
            .map(|(l, &st)| Linear::new(&mut s, &format!("backbone.patch{l}"), st * st, d, rng))
            .collect();
        let level_embed = s.add("encoder.level_embed", uniform(rng, vec![levels, d], 0.1));
        let enc_attn = DeformConfig {
            d,
            heads: config.heads,
            levels,
            points: config.k_enc,
            project: true,
        };
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("encoder.{i}"), enc_attn, config.ffn, rng))
            .collect::<Result<_>>()?;

        let line_pos = Linear::new(&mut s, "lines.pos", 6, d, rng);
        let line_content = Linear::new(&mut s, "lines.content", config.line_samples * d, d, rng);
        let null_pos = s.add("lines.null_pos", uniform(rng, vec![1, d], 0.1));
        let null_content = s.add("lines.null_content", uniform(rng, vec![1, d], 0.1));
        let camera_content = s.add("camera.content", uniform(rng, vec![3, d], 1.0));
        let camera_pos = s.add("camera.pos", uniform(rng, vec![3, d], 1.0));

        let dec_attn = DeformConfig {
            points: config.k_dec,
            ..enc_attn
        };
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut s, &format!("decoder.{i}"), dec_attn, config.ffn, rng))
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(&mut s, "decoder.norm", d);

        let heads = Heads {
            zvp: Linear::new(&mut s, "head.zvp", d, 3, rng),
            hl: Linear::new(&mut s, "head.hl", d, 3, rng),
            fov: Linear::new(&mut s, "head.fov", d, 1, rng),
            class: Linear::new(&mut s, "head.class", d, 3, rng),
            score: Linear::new(&mut s, "head.score", d, 1, rng),
        };
        // Start both camera vectors near the level-camera direction so the
        // predicted horizon crosses the image sides from the first step.
        s.set(heads.zvp.bias, Tensor::vector(vec![0.0, 1.0, 0.0]))?;
        s.set(heads.hl.bias, Tensor::vector(vec![0.0, 1.0, 0.0]))?;

        Ok(Self {
            config,
            params: s,
            patch,
            level_embed,
            encoder,
            line_pos,
            line_content,
            null_pos,
            null_content,
            camera_content,
            camera_pos,
            decoder,
            final_norm,
            heads,
        })
    }

    /// Rebuilds a model around stored parameters; names and shapes must match
    /// what `config` creates.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((want, wt), (got, gt)) in model.params.iter().zip(params.iter()) {
            if want != got || wt.shape() != gt.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {want} {:?} does not match stored {got} {:?}",
                    wt.shape(),
                    gt.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    /// Checks that a record fits this model's input size and line budget.
    pub fn check_record(&self, record: &SceneRecord) -> Result<()> {
        let n = self.config.image_size;
        if record.image.h != n || record.image.w != n {
            return Err(Error::Incompatible(format!(
                "record {}: image_size is {}×{} but the model expects {n}×{n}",
                record.seed, record.image.h, record.image.w
            )));
        }
        if record.lines.len() > self.config.n_lines {
            return Err(Error::Incompatible(format!(
                "record {}: {} lines exceed n_lines = {}",
                record.seed,
                record.lines.len(),
                self.config.n_lines
            )));
        }
        Ok(())
    }

    /// Patch-embedding pyramid with sinusoidal positions added.
    pub fn backbone(&self, tape: &mut Tape, p: &Bound, image: &Image) -> Result<PyramidVar> {
        let n = self.config.image_size;
        if image.h != n || image.w != n {
            return Err(Error::contract(format!(
                "backbone expects a {n}×{n} image, got {}×{}",
                image.h, image.w
            )));
        }
        let mut parts = Vec::with_capacity(self.patch.len());
        for (lin, &s) in self.patch.iter().zip(&self.config.strides) {
            let patches = tape.constant(patches(image, s)?);
            let emb = lin.forward(tape, p, patches)?;
            let pe = tape.constant(sine_position_encoding(n / s, n / s, self.config.d));
            parts.push(tape.add(emb, pe)?);
        }
        Ok(PyramidVar {
            flat: tape.concat(&parts, 0)?,
            shapes: self.config.level_shapes(),
        })
    }

    /// Runs every encoder layer; with zero layers the pyramid passes through.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, pyramid: &PyramidVar) -> Result<PyramidVar> {
        let mut level_of = Vec::with_capacity(pyramid.len());
        let mut refs = Vec::with_capacity(pyramid.len());
        for (l, &(h, w)) in pyramid.shapes.iter().enumerate() {
            level_of.extend(std::iter::repeat_n(l, h * w));
            refs.extend(ReferencePoint::grid(h, w));
        }
        let level_pos = tape.gather_rows(p.var(self.level_embed), &level_of)?;
        let refs = tape.constant(ReferencePoint::stack(&refs));
        let mut x = pyramid.clone();
        for layer in &self.encoder {
            x = layer.forward(tape, p, &x, level_pos, refs)?;
        }
        Ok(x)
    }

    /// Builds one query per line and pads to `n_lines` with the learned null
    /// line.
    pub fn line_queries(&self, tape: &mut Tape, p: &Bound, lines: &[LineSegment], pyramid: &PyramidVar) -> Result<LineQueries> {
        let n_lines = self.config.n_lines;
        let real = lines.len();
        if real > n_lines {
            return Err(Error::contract(format!("{real} lines exceed n_lines = {n_lines}")));
        }
        let d = self.config.d;
        let k = self.config.line_samples;
        let (h, w) = pyramid.shapes[0];
        let pad = n_lines - real;
        let mut pos_parts = Vec::new();
        let mut con_parts = Vec::new();
        let mut mids = Vec::with_capacity(n_lines);
        if real > 0 {
            let enc: Vec<f64> = lines.iter().flat_map(|l| l.line().ambiguity_free().0).collect();
            let enc = tape.constant(Tensor::new(vec![real, 6], enc)?);
            pos_parts.push(self.line_pos.forward(tape, p, enc)?);

            let mut pts = Vec::with_capacity(real * k * 2);
            for seg in lines {
                for q in seg.sample_points(k)? {
                    pts.push((q[0] + 1.0) / 2.0 * w as f64 - 0.5);
                    pts.push((q[1] + 1.0) / 2.0 * h as f64 - 0.5);
                }
                let m = seg.midpoint();
                mids.push(ReferencePoint::new((m[0] + 1.0) / 2.0, (m[1] + 1.0) / 2.0));
            }
            let finest = tape.slice(pyramid.flat, 0, 0, h * w)?;
            let finest = tape.reshape(finest, vec![h, w, d])?;
            let pts = tape.constant(Tensor::new(vec![real * k, 2], pts)?);
            let reads = tape.bilinear_sample(finest, pts)?;
            let reads = tape.reshape(reads, vec![real, k * d])?;
            con_parts.push(self.line_content.forward(tape, p, reads)?);
        }
        if pad > 0 {
            pos_parts.push(tape.gather_rows(p.var(self.null_pos), &vec![0; pad])?);
            con_parts.push(tape.gather_rows(p.var(self.null_content), &vec![0; pad])?);
            mids.extend(std::iter::repeat_n(ReferencePoint::new(0.5, 0.5), pad));
        }
        Ok(LineQueries {
            pos: tape.concat(&pos_parts, 0)?,
            content: tape.concat(&con_parts, 0)?,
            refs: tape.constant(ReferencePoint::stack(&mids)),
            real,
        })
    }

    /// Decoder stack and output heads.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, lines: &LineQueries, memory: &PyramidVar) -> Result<Prediction> {
        let n_lines = self.config.n_lines;
        let mut tgt = tape.concat(&[p.var(self.camera_content), lines.content], 0)?;
        let pos = tape.concat(&[p.var(self.camera_pos), lines.pos], 0)?;
        let cam_refs = tape.constant(ReferencePoint::stack(&[ReferencePoint::new(0.5, 0.5); 3]));
        let refs = tape.concat(&[cam_refs, lines.refs], 0)?;
        for (i, layer) in self.decoder.iter().enumerate() {
            if i == 0 || self.config.propagate_qpos {
                tgt = tape.add(tgt, pos)?;
            }
            tgt = layer.forward(tape, p, tgt, refs, memory)?;
        }
        let out = self.final_norm.forward(tape, p, tgt)?;
        let row = |tape: &mut Tape, i| tape.slice(out, 0, i, 1);
        let (z_row, h_row, f_row) = (row(tape, 0)?, row(tape, 1)?, row(tape, 2)?);
        let line_rows = tape.slice(out, 0, 3, n_lines)?;

        let zvp = self.heads.zvp.forward(tape, p, z_row)?;
        let zvp = tape.normalize_rows(zvp)?;
        let hl = self.heads.hl.forward(tape, p, h_row)?;
        let hl = tape.normalize_rows(hl)?;
        let fov = self.heads.fov.forward(tape, p, f_row)?;
        let fov = tape.sigmoid(fov);
        let fov = tape.scale(fov, 180.0);
        let class_logits = self.heads.class.forward(tape, p, line_rows)?;
        let score = self.heads.score.forward(tape, p, line_rows)?;
        let score = tape.sigmoid(score);
        Ok(Prediction {
            zvp,
            hl,
            fov,
            class_logits,
            score,
        })
    }

    /// Full forward pass for one image and its line segments.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: &Image, lines: &[LineSegment]) -> Result<Prediction> {
        let pyramid = self.backbone(tape, p, image)?;
        let memory = self.encode(tape, p, &pyramid)?;
        let queries = self.line_queries(tape, p, lines, &pyramid)?;
        self.decode(tape, p, &queries, &memory)
    }

    /// Inference without gradient recording.
    pub fn predict(&self, image: &Image, lines: &[LineSegment]) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let pred = self.forward(&mut tape, &p, image, lines)?;
        Ok(read_output(&tape, &pred, lines.len()))
    }
}

/// Copies tape values into a [`ModelOutput`], keeping the first `real` lines.
pub fn read_output(tape: &Tape, pred: &Prediction, real: usize) -> ModelOutput {
    let v3 = |v: Var| {
        let d = tape.value(v).data();
        [d[0], d[1], d[2]]
    };
    let logits = tape.value(pred.class_logits);
    ModelOutput {
        zvp: v3(pred.zvp),
        hl: v3(pred.hl),
        fov: tape.value(pred.fov).data()[0],
        class_logits: (0..real).map(|i| {
            let r = logits.row(i);
            [r[0], r[1], r[2]]
        }).collect(),
        score: tape.value(pred.score).data()[..real].to_vec(),
    }
}

/// Non-overlapping `s×s` patches, one row each in row-major patch order.
pub fn patches(image: &Image, s: usize) -> Result<Tensor> {
    if s == 0 || image.h % s != 0 || image.w % s != 0 {
        return Err(Error::contract(format!(
            "{}×{} image is not divisible into {s}×{s} patches",
            image.h, image.w
        )));
    }
    let (ph, pw) = (image.h / s, image.w / s);
    let mut data = Vec::with_capacity(image.h * image.w);
    for pr in 0..ph {
        for pc in 0..pw {
            for r in 0..s {
                let start = (pr * s + r) * image.w + pc * s;
                data.extend_from_slice(&image.data[start..start + s]);
            }
        }
    }
    Tensor::new(vec![ph * pw, s * s], data)
}

/// Fixed 2D sinusoidal encoding of pixel centers, `[h·w × d]`. The first half
/// of the channels encodes y, the second half x, each as interleaved
/// sine/cosine pairs over geometric frequencies.
pub fn sine_position_encoding(h: usize, w: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut data = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            let y = (r as f64 + 0.5) / h as f64 * TAU;
            let x = (c as f64 + 0.5) / w as f64 * TAU;
            for coord in [y, x] {
                for i in 0..half {
                    let freq = 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
                    let a = coord / freq;
                    data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
                }
            }
        }
    }
    Tensor::new(vec![h * w, d], data).expect("h·w rows of d channels")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_are_row_major_blocks() {
        let image = Image {
            h: 4,
            w: 4,
            data: (0..16).map(f64::from).collect(),
        };
        let p = patches(&image, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert!(patches(&image, 3).is_err());
    }

    #[test]
    fn position_encoding_is_bounded_and_distinct() {
        let pe = sine_position_encoding(4, 4, 8);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(pe.row(0), pe.row(1));
        assert_ne!(pe.row(0), pe.row(4));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::tiny().validate().is_ok());
        let bad = ModelConfig {
            image_size: 60,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            strides: vec![16, 8],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
