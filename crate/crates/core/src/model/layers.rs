//! Transformer layers used by the encoder and decoder.

use rand_chacha::ChaCha8Rng;

use crate::deform::{DeformConfig, MsDeformAttn, PyramidVar};
use crate::error::Result;
use crate::nn::{Bound, FeedForward, LayerNorm, Linear, ParamStore};
use crate::tensor::{Tape, Var};

/// Dense multi-head self-attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            heads,
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, x)?;
        let v = self.v.forward(tape, p, x)?;
        let d = tape.shape(x)[1];
        let dh = d / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        for m in 0..self.heads {
            let qm = tape.slice(q, 1, m * dh, dh)?;
            let km = tape.slice(k, 1, m * dh, dh)?;
            let vm = tape.slice(v, 1, m * dh, dh)?;
            heads.push(tape.attention(qm, km, vm)?);
        }
        let joined = tape.concat(&heads, 1)?;
        self.out.forward(tape, p, joined)
    }
}

/// Pre-norm deformable self-attention over every pixel of the pyramid,
/// followed by a feed-forward block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MsDeformAttn,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        attn: DeformConfig,
        ffn: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), attn.d),
            attn: MsDeformAttn::new(store, &format!("{name}.attn"), attn, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), attn.d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), attn.d, ffn, rng),
        })
    }

    /// `x` is the flattened pyramid; `level_pos` is added to the queries
    /// only; `refs` holds each pixel's own normalized center.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: &PyramidVar, level_pos: Var, refs: Var) -> Result<PyramidVar> {
        let h = self.norm1.forward(tape, p, x.flat)?;
        let q = tape.add(h, level_pos)?;
        let values = PyramidVar {
            flat: h,
            shapes: x.shapes.clone(),
        };
        let a = self.attn.forward(tape, p, q, refs, &values)?;
        let flat = tape.add(x.flat, a.output)?;
        let h = self.norm2.forward(tape, p, flat)?;
        let f = self.ffn.forward(tape, p, h)?;
        Ok(PyramidVar {
            flat: tape.add(flat, f)?,
            shapes: x.shapes.clone(),
        })
    }
}

/// Pre-norm dense self-attention among all queries, deformable
/// cross-attention into the pyramid, then a feed-forward block.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross: MsDeformAttn,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cross: DeformConfig,
        ffn: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cross.d;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), d, cross.heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            cross: MsDeformAttn::new(store, &format!("{name}.cross"), cross, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn, rng),
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, tgt: Var, refs: Var, memory: &PyramidVar) -> Result<Var> {
        let h = self.norm1.forward(tape, p, tgt)?;
        let s = self.self_attn.forward(tape, p, h)?;
        let tgt = tape.add(tgt, s)?;
        let h = self.norm2.forward(tape, p, tgt)?;
        let c = self.cross.forward(tape, p, h, refs, memory)?;
        let tgt = tape.add(tgt, c.output)?;
        let h = self.norm3.forward(tape, p, tgt)?;
        let f = self.ffn.forward(tape, p, h)?;
        tape.add(tgt, f)
    }
}
