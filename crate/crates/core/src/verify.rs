//! Finite-difference gradient suites over the primitives, the attention
//! modules and the whole model.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{DeformAttn, DeformConfig, MsDeformAttn, PyramidVar};
use crate::error::{Error, Result};
use crate::loss::{total_loss, Targets, Weighting};
use crate::model::{Model, ModelConfig};
use crate::nn::{Bound, ParamStore};
use crate::scene::{generate, GeneratorConfig};
use crate::tensor::{check_gradients, GradCheckOptions, Tape, Tensor, Var};

/// Relative-error bound for single primitives and attention modules.
pub const OPS_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for the end-to-end model.
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Attention,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Ops, Scope::Attention, Scope::Model];
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Attention => "attention",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "attention" => Ok(Scope::Attention),
            "model" => Ok(Scope::Model),
            _ => Err(Error::contract(format!("unknown scope {s:?}; expected ops, attention or model"))),
        }
    }
}

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub target: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub entries: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Contracts any output to a scalar with fixed, uneven weights.
fn weighted_sum(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::from_parts(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect());
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for t in store.tensors_mut() {
        let data = t.data().iter().map(|v| v + rng.random_range(-scale..scale)).collect();
        *t = Tensor::from_parts(t.shape().to_vec(), data);
    }
}

fn run(target: &str, inputs: &[Tensor], f: &Objective, tolerance: f64, opts: &GradCheckOptions) -> Result<CheckRow> {
    let report = check_gradients(inputs, |t, v| f(t, v), opts)?;
    Ok(CheckRow {
        target: target.to_string(),
        max_rel_err: report.max_rel_err,
        tolerance,
        entries: report.entries_checked,
    })
}

/// Runs every check in `scope`.
pub fn gradient_suite(scope: Scope, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        seed,
        ..Default::default()
    };
    match scope {
        Scope::Ops => ops_suite(&mut rng, &opts),
        Scope::Attention => attention_suite(&mut rng, &opts),
        Scope::Model => model_suite(seed, &opts),
    }
}

fn ops_suite(rng: &mut ChaCha8Rng, opts: &GradCheckOptions) -> Result<Vec<CheckRow>> {
    let a = random(rng, &[3, 4], -1.0, 1.0);
    let b = random(rng, &[3, 4], 1.0, 3.0);
    let pos = random(rng, &[3, 4], 0.5, 1.5);
    let row = random(rng, &[4], -1.0, 1.0);
    let gain = random(rng, &[4], 0.5, 1.5);
    let m = random(rng, &[4, 5], -1.0, 1.0);
    let bias = random(rng, &[5], -1.0, 1.0);
    let mt = random(rng, &[5, 4], -1.0, 1.0);
    let q = random(rng, &[3, 4], -1.0, 1.0);
    let kv = random(rng, &[5, 4], -1.0, 1.0);
    let map = random(rng, &[4, 5, 3], -1.0, 1.0);
    // Sample points away from integer coordinates, some outside the map.
    let pts = Tensor::from_parts(
        vec![6, 2],
        (0..12)
            .map(|i| {
                let v: f64 = rng.random_range(-0.8..4.6);
                if i % 2 == 0 { v } else { v.min(3.6) }
            })
            .map(|v| v.floor() + 0.1 + 0.8 * (v - v.floor()))
            .collect(),
    );
    let shapes = vec![(3, 3), (2, 2)];
    let value = random(rng, &[13, 4], -1.0, 1.0);
    let locs = random(rng, &[2, 2 * 2 * 2 * 2], -0.4, 2.4).map(|v| v.floor() + 0.1 + 0.8 * (v - v.floor()));
    let wts = random(rng, &[2, 2 * 2 * 2], 0.0, 1.0);

    let cases: Vec<(&str, Vec<Tensor>, Objective)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("div", vec![a.clone(), b.clone()], Box::new(|t, v| t.div(v[0], v[1]))),
        ("maximum", vec![a.clone(), b.map(|x| x - 2.0)], Box::new(|t, v| t.maximum(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_scalar", vec![a.clone()], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("relu", vec![a.clone()], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("gelu", vec![a.clone()], Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("exp", vec![a.clone()], Box::new(|t, v| Ok(t.exp(v[0])))),
        ("ln", vec![pos.clone()], Box::new(|t, v| Ok(t.ln(v[0])))),
        ("abs", vec![a.clone()], Box::new(|t, v| Ok(t.abs(v[0])))),
        ("sqrt", vec![pos.clone()], Box::new(|t, v| Ok(t.sqrt(v[0])))),
        ("square", vec![a.clone()], Box::new(|t, v| Ok(t.square(v[0])))),
        ("powf", vec![pos.clone()], Box::new(|t, v| Ok(t.powf(v[0], 2.5)))),
        ("clamp", vec![a.clone()], Box::new(|t, v| Ok(t.clamp(v[0], -0.5, 0.5)))),
        ("sum", vec![a.clone()], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![a.clone()], Box::new(|t, v| t.mean(v[0]))),
        ("reshape", vec![a.clone()], Box::new(|t, v| t.reshape(v[0], vec![2, 6]))),
        ("transpose", vec![a.clone()], Box::new(|t, v| t.transpose(v[0]))),
        ("matmul", vec![a.clone(), m.clone()], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_nt", vec![a.clone(), mt.clone()], Box::new(|t, v| t.matmul_nt(v[0], v[1]))),
        (
            "fully_connected",
            vec![a.clone(), m.clone(), bias.clone()],
            Box::new(|t, v| t.fully_connected(v[0], v[1], v[2])),
        ),
        ("softmax0", vec![a.clone()], Box::new(|t, v| t.softmax(v[0], 0))),
        ("softmax1", vec![a.clone()], Box::new(|t, v| t.softmax(v[0], 1))),
        ("concat", vec![a.clone(), b.clone()], Box::new(|t, v| t.concat(&[v[0], v[1], v[0]], 1))),
        ("slice", vec![a.clone()], Box::new(|t, v| t.slice(v[0], 1, 1, 2))),
        ("gather_rows", vec![a.clone()], Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2]))),
        ("normalize_rows", vec![a.clone()], Box::new(|t, v| t.normalize_rows(v[0]))),
        (
            "layer_norm",
            vec![a.clone(), gain, row.clone()],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
        ),
        (
            "attention",
            vec![q, kv.clone(), kv.map(|x| 0.5 - x)],
            Box::new(|t, v| t.attention(v[0], v[1], v[2])),
        ),
        ("bilinear_sample", vec![map, pts], Box::new(|t, v| t.bilinear_sample(v[0], v[1]))),
        (
            "ms_deform_sample",
            vec![value, locs, wts],
            Box::new(move |t, v| t.ms_deform_sample(v[0], &shapes, 2, 2, v[1], v[2])),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            let g: Objective = Box::new(move |t, v| {
                let y = f(t, v)?;
                weighted_sum(t, y)
            });
            run(name, &inputs, &g, OPS_TOLERANCE, opts)
        })
        .collect()
}

fn attention_suite(rng: &mut ChaCha8Rng, opts: &GradCheckOptions) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let config = DeformConfig {
        d: 8,
        heads: 2,
        levels: 2,
        points: 3,
        project: true,
    };
    let shapes = vec![(6, 6), (3, 3)];
    let mut store = ParamStore::new();
    let attn = MsDeformAttn::new(&mut store, "attn", config, rng)?;
    perturb(&mut store, rng, 0.5);
    let queries = random(rng, &[4, 8], -1.0, 1.0);
    let refs = random(rng, &[4, 2], 0.1, 0.9);
    let pyramid = random(rng, &[45, 8], -1.0, 1.0);

    let inputs_fn: Objective = {
        let (store, attn, shapes) = (store.clone(), attn.clone(), shapes.clone());
        Box::new(move |t, v| {
            let p = store.bind(t, false);
            let input = PyramidVar {
                flat: v[1],
                shapes: shapes.clone(),
            };
            let out = attn.forward(t, &p, v[0], v[2], &input)?;
            weighted_sum(t, out.output)
        })
    };
    rows.push(run(
        "multi-scale: queries, values, reference points",
        &[queries.clone(), pyramid.clone(), refs.clone()],
        &inputs_fn,
        OPS_TOLERANCE,
        opts,
    )?);

    let params_fn: Objective = {
        let (attn, shapes, queries, refs, pyramid) = (attn.clone(), shapes.clone(), queries, refs, pyramid);
        Box::new(move |t, v| {
            let p = Bound::from_vars(v.to_vec());
            let q = t.constant(queries.clone());
            let r = t.constant(refs.clone());
            let input = PyramidVar {
                flat: t.constant(pyramid.clone()),
                shapes: shapes.clone(),
            };
            let out = attn.forward(t, &p, q, r, &input)?;
            weighted_sum(t, out.output)
        })
    };
    rows.push(run("multi-scale: parameters", store.tensors(), &params_fn, OPS_TOLERANCE, opts)?);

    let mut single_store = ParamStore::new();
    let single = DeformAttn::new(&mut single_store, "single", 4, 3)?;
    perturb(&mut single_store, rng, 0.5);
    let q = random(rng, &[3, 4], -1.0, 1.0);
    let refs = random(rng, &[3, 2], 1.2, 3.8);
    let map = random(rng, &[5, 5, 4], -1.0, 1.0);
    let single_fn: Objective = Box::new(move |t, v| {
        let p = Bound::from_vars(v[3..].to_vec());
        let out = single.forward(t, &p, v[0], v[1], v[2])?;
        weighted_sum(t, out.output)
    });
    let mut inputs = vec![q, refs, map];
    inputs.extend(single_store.tensors().iter().cloned());
    rows.push(run(
        "single-scale: query, reference points, map, parameters",
        &inputs,
        &single_fn,
        OPS_TOLERANCE,
        opts,
    )?);
    Ok(rows)
}

fn model_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<CheckRow>> {
    let mut model = Model::new(ModelConfig::tiny(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Away from the symmetric initialization every encoder sample sits off
    // the pixel grid, where bilinear reads are smooth.
    perturb(&mut model.params, &mut rng, 0.05);
    let scene = GeneratorConfig {
        image_size: model.config.image_size,
        lines_per_image: model.config.n_lines,
        ..Default::default()
    };
    let record = generate(&scene, seed)?;
    let targets = Targets::from_record(&record, model.config.n_lines)?;
    let f: Objective = {
        let model = model.clone();
        Box::new(move |t, v| {
            let p = Bound::from_vars(v.to_vec());
            let pred = model.forward(t, &p, &record.image, &record.lines)?;
            Ok(total_loss(t, &pred, &targets, Weighting::CameraFirst)?.total)
        })
    };
    Ok(vec![run(
        "tiny model: total loss, all parameters",
        model.params.tensors(),
        &f,
        MODEL_TOLERANCE,
        opts,
    )?])
}
