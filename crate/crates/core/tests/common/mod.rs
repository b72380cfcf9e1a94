//! Helpers shared by the integration tests: random inputs and loop-based
//! reference implementations written independently of the library kernels.

#![allow(dead_code)]

use calib_core::deform::{DeformConfig, FeaturePyramid, MsDeformAttn};
use calib_core::nn::{Linear, ParamStore};
use calib_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_pyramid(rng: &mut ChaCha8Rng, shapes: &[(usize, usize)], d: usize) -> FeaturePyramid {
    FeaturePyramid::new(
        shapes
            .iter()
            .map(|&(h, w)| random_tensor(rng, vec![h, w, d], 1.0))
            .collect(),
    )
    .unwrap()
}

/// Reference points strictly inside the unit square.
pub fn random_refs(rng: &mut ChaCha8Rng, q: usize) -> Tensor {
    Tensor::new(vec![q, 2], (0..2 * q).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap()
}

/// A multi-scale attention module with every parameter randomized, so the
/// offsets spread a few pixels and the weights are far from uniform.
pub fn random_attention(seed: u64, config: DeformConfig) -> (ParamStore, MsDeformAttn) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let attn = MsDeformAttn::new(&mut store, "attn", config, &mut rng).unwrap();
    randomize_linear(&mut store, &attn.offset_proj, &mut rng, 1.0, 3.0);
    randomize_linear(&mut store, &attn.weight_proj, &mut rng, 1.0, 1.0);
    for lin in [attn.value_proj, attn.output_proj].into_iter().flatten() {
        randomize_linear(&mut store, &lin, &mut rng, 0.5, 0.5);
    }
    (store, attn)
}

pub fn randomize_linear(store: &mut ParamStore, lin: &Linear, rng: &mut ChaCha8Rng, w: f64, b: f64) {
    let ws = store.get(lin.weight).shape().to_vec();
    let bs = store.get(lin.bias).shape().to_vec();
    store.set(lin.weight, random_tensor(rng, ws, w)).unwrap();
    store.set(lin.bias, random_tensor(rng, bs, b)).unwrap();
}

/// `x · W + b` for one row.
pub fn naive_linear(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), n_in);
    (0..n_out)
        .map(|j| b.data()[j] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + j]).sum::<f64>())
        .collect()
}

/// Bilinear read of channels `lo..hi` of an `h×w×d` map at pixel
/// coordinates `(x, y)`, zero outside.
pub fn naive_bilinear(map: &[f64], h: usize, w: usize, d: usize, x: f64, y: f64, lo: usize, hi: usize) -> Vec<f64> {
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    let mut out = vec![0.0; hi - lo];
    for (cx, cy) in [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)] {
        if cx < 0 || cy < 0 || cx >= w as i64 || cy >= h as i64 {
            continue;
        }
        let wt = (1.0 - (x - cx as f64).abs()) * (1.0 - (y - cy as f64).abs());
        let base = (cy as usize * w + cx as usize) * d;
        for (o, c) in out.iter_mut().zip(lo..hi) {
            *o += wt * map[base + c];
        }
    }
    out
}

/// Loop-by-loop evaluation of multi-scale deformable attention: per query,
/// per head, per level, per sampling point. Returns the `[Q×d]` output and
/// the per-head weight rows.
pub fn naive_ms_deform(
    store: &ParamStore,
    attn: &MsDeformAttn,
    queries: &Tensor,
    refs: &Tensor,
    pyramid: &FeaturePyramid,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let DeformConfig {
        d,
        heads,
        levels,
        points,
        ..
    } = attn.config;
    let dh = d / heads;
    let values: Vec<Vec<f64>> = pyramid
        .levels()
        .iter()
        .map(|lvl| match attn.value_proj {
            Some(v) => lvl
                .data()
                .chunks(d)
                .flat_map(|px| naive_linear(px, store.get(v.weight), store.get(v.bias)))
                .collect(),
            None => lvl.to_vec(),
        })
        .collect();
    let mut out = Vec::new();
    let mut weight_rows = Vec::new();
    for qi in 0..queries.rows() {
        let z = queries.row(qi);
        let offsets = naive_linear(z, store.get(attn.offset_proj.weight), store.get(attn.offset_proj.bias));
        let logits = naive_linear(z, store.get(attn.weight_proj.weight), store.get(attn.weight_proj.bias));
        let (px, py) = (refs.row(qi)[0], refs.row(qi)[1]);
        let mut concat = vec![0.0; d];
        for m in 0..heads {
            let block = &logits[m * levels * points..(m + 1) * levels * points];
            let max = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = block.iter().map(|v| (v - max).exp()).sum();
            let a: Vec<f64> = block.iter().map(|v| (v - max).exp() / denom).collect();
            for l in 0..levels {
                let lvl = &pyramid.levels()[l];
                let (h, w) = (lvl.shape()[0], lvl.shape()[1]);
                for k in 0..points {
                    let idx = (m * levels + l) * points + k;
                    let x = px * w as f64 - 0.5 + offsets[2 * idx];
                    let y = py * h as f64 - 0.5 + offsets[2 * idx + 1];
                    let s = naive_bilinear(&values[l], h, w, d, x, y, m * dh, (m + 1) * dh);
                    for (c, v) in s.iter().enumerate() {
                        concat[m * dh + c] += a[l * points + k] * v;
                    }
                }
            }
            weight_rows.push(a);
        }
        match attn.output_proj {
            Some(o) => out.extend(naive_linear(&concat, store.get(o.weight), store.get(o.bias))),
            None => out.extend(concat),
        }
    }
    (out, weight_rows)
}
