//! Central-difference checks of every differentiable tape operation and of
//! the end-to-end point evaluation, in 64-bit.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::field::{Ablation, FrameInputs, Model, ModelConfig};
use crate::geometry::{normalize, Vec3};
use crate::synth::{generate_captures, CaptureConfig};
use crate::tensor::{grad_check_params, GradCheckReport, ParamStore, RowMap, Tape, Tensor, Var};

/// Max relative error allowed for a single operation.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Max relative error allowed for the end-to-end point evaluation.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl SuiteCase {
    pub fn passes(&self) -> bool {
        self.report.checked > 0 && self.report.passes(self.tolerance)
    }
}

/// Fixed weights for reducing an output to a scalar, so every output entry
/// contributes a distinct amount.
fn probe_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| (1.7 * i as f64 + 0.3).sin()).collect()
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let w = tape.constant(tape.shape(y).to_vec().as_slice(), probe_weights(tape.value(y).len()))?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Checks `f` with respect to all of `inputs`, reduced by fixed weights.
pub fn check_op<F>(inputs: &[(Vec<usize>, Vec<f64>)], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids = inputs
        .iter()
        .enumerate()
        .map(|(i, (shape, data))| store.insert(&format!("x{i}"), Tensor::new(shape, data.clone())?))
        .collect::<Result<Vec<_>>>()?;
    grad_check_params(
        &store,
        |tape, store| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
            let y = f(tape, &vars)?;
            weighted_sum(tape, y)
        },
        FD_STEP,
    )
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn op_case(name: &str, inputs: Vec<(Vec<usize>, Vec<f64>)>, f: OpFn) -> Result<SuiteCase> {
    Ok(SuiteCase {
        name: name.to_string(),
        report: check_op(&inputs, f)?,
        tolerance: OP_TOLERANCE,
    })
}

/// One check per tape operation on shapes drawn from `seed`.
pub fn op_cases(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = |rng: &mut ChaCha8Rng| rng.gen_range(1..=5usize);
    let (m, k, n, b) = (dim(&mut rng), dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let r = &mut rng;
    let t = |shape: &[usize], data: Vec<f64>| (shape.to_vec(), data);
    let mut cases = Vec::new();

    cases.push(op_case(
        "matmul",
        vec![t(&[m, k], uniform(r, m * k, -1.0, 1.0)), t(&[k, n], uniform(r, k * n, -1.0, 1.0))],
        Box::new(|tp, v| tp.matmul(v[0], v[1])),
    )?);
    cases.push(op_case(
        "bmm",
        vec![
            t(&[b, m, k], uniform(r, b * m * k, -1.0, 1.0)),
            t(&[b, k, n], uniform(r, b * k * n, -1.0, 1.0)),
        ],
        Box::new(|tp, v| tp.bmm(v[0], v[1], false)),
    )?);
    cases.push(op_case(
        "bmm_transposed",
        vec![
            t(&[b, m, k], uniform(r, b * m * k, -1.0, 1.0)),
            t(&[b, n, k], uniform(r, b * n * k, -1.0, 1.0)),
        ],
        Box::new(|tp, v| tp.bmm(v[0], v[1], true)),
    )?);
    let pair = |r: &mut ChaCha8Rng| {
        vec![
            (vec![m, n], uniform(r, m * n, -1.0, 1.0)),
            (vec![m, n], uniform(r, m * n, -1.0, 1.0)),
        ]
    };
    cases.push(op_case("add", pair(r), Box::new(|tp, v| tp.add(v[0], v[1])))?);
    cases.push(op_case("sub", pair(r), Box::new(|tp, v| tp.sub(v[0], v[1])))?);
    cases.push(op_case("mul", pair(r), Box::new(|tp, v| tp.mul(v[0], v[1])))?);
    cases.push(op_case(
        "scale",
        vec![t(&[m, n], uniform(r, m * n, -1.0, 1.0))],
        Box::new(|tp, v| Ok(tp.scale(v[0], -1.3))),
    )?);
    cases.push(op_case(
        "add_row",
        vec![t(&[b, m, n], uniform(r, b * m * n, -1.0, 1.0)), t(&[n], uniform(r, n, -1.0, 1.0))],
        Box::new(|tp, v| tp.add_row(v[0], v[1])),
    )?);
    cases.push(op_case(
        "linear",
        vec![
            t(&[m, k], uniform(r, m * k, -1.0, 1.0)),
            t(&[k, n], uniform(r, k * n, -1.0, 1.0)),
            t(&[n], uniform(r, n, -1.0, 1.0)),
        ],
        Box::new(|tp, v| tp.linear(v[0], v[1], v[2])),
    )?);
    cases.push(op_case(
        "relu",
        vec![t(&[m, n], off_zero(r, m * n))],
        Box::new(|tp, v| Ok(tp.relu(v[0]))),
    )?);
    let unit = |r: &mut ChaCha8Rng, lo: f64, hi: f64| vec![(vec![m, n], uniform(r, m * n, lo, hi))];
    cases.push(op_case("sigmoid", unit(r, -4.0, 4.0), Box::new(|tp, v| Ok(tp.sigmoid(v[0]))))?);
    cases.push(op_case("softplus", unit(r, -4.0, 4.0), Box::new(|tp, v| Ok(tp.softplus(v[0]))))?);
    cases.push(op_case("exp", unit(r, -2.0, 2.0), Box::new(|tp, v| Ok(tp.exp(v[0]))))?);
    cases.push(op_case("softmax_rows", unit(r, -3.0, 3.0), Box::new(|tp, v| tp.softmax_rows(v[0])))?);
    // The first column stays valid so no row is empty, except a trailing
    // all-masked row that must produce zeros and no gradient.
    let cols = n + 1;
    let mut mask: Vec<bool> = (0..(m + 1) * cols).map(|i| i % cols == 0 || r.gen_bool(0.6)).collect();
    mask[m * cols..].iter_mut().for_each(|x| *x = false);
    cases.push(op_case(
        "softmax_rows_masked",
        vec![t(&[m + 1, cols], uniform(r, (m + 1) * cols, -3.0, 3.0))],
        Box::new(move |tp, v| tp.softmax_rows_masked(v[0], Some(&mask))),
    )?);
    cases.push(op_case("sum", unit(r, -1.0, 1.0), Box::new(|tp, v| Ok(tp.sum(v[0]))))?);
    cases.push(op_case("mean", unit(r, -1.0, 1.0), Box::new(|tp, v| Ok(tp.mean(v[0]))))?);
    cases.push(op_case(
        "concat_rows",
        vec![t(&[m, n], uniform(r, m * n, -1.0, 1.0)), t(&[k, n], uniform(r, k * n, -1.0, 1.0))],
        Box::new(|tp, v| tp.concat(&[v[0], v[1]], 0)),
    )?);
    cases.push(op_case(
        "concat_columns",
        vec![
            t(&[b, m, n], uniform(r, b * m * n, -1.0, 1.0)),
            t(&[b, m, k], uniform(r, b * m * k, -1.0, 1.0)),
        ],
        Box::new(|tp, v| tp.concat(&[v[0], v[1]], 2)),
    )?);
    cases.push(op_case(
        "reshape",
        vec![t(&[m, n, k], uniform(r, m * n * k, -1.0, 1.0))],
        Box::new(move |tp, v| tp.reshape(v[0], &[n, m * k])),
    )?);
    cases.push(op_case(
        "transpose",
        vec![t(&[b, m, n], uniform(r, b * m * n, -1.0, 1.0))],
        Box::new(|tp, v| tp.transpose(v[0])),
    )?);
    // Rows mixing repeated sources, plus an empty row.
    let mut map = RowMap::new(m);
    for _ in 0..k + 1 {
        let taps = r.gen_range(1..=3);
        map.push_row((0..taps).map(|_| (r.gen_range(0..m), r.gen_range(-1.0..1.0))).collect::<Vec<_>>());
    }
    map.push_empty();
    let map = Arc::new(map);
    cases.push(op_case(
        "gather",
        vec![t(&[m, n], uniform(r, m * n, -1.0, 1.0))],
        Box::new(move |tp, v| tp.gather(v[0], map.clone())),
    )?);
    let samples = k + 2;
    let delta = uniform(r, m * samples, 0.01, 0.5);
    cases.push(op_case(
        "composite",
        vec![
            t(&[m, samples], uniform(r, m * samples, 0.1, 3.0)),
            t(&[m, samples, 3], uniform(r, m * samples * 3, 0.0, 1.0)),
        ],
        Box::new(move |tp, v| tp.composite(v[0], v[1], &delta)),
    )?);
    Ok(cases)
}

/// A model small enough for a full parameter sweep.
pub fn tiny_model_config(ablation: Ablation) -> ModelConfig {
    ModelConfig {
        encoder_c1: 4,
        encoder_c2: 4,
        d_img: 4,
        d_temporal: 4,
        d_multiview: 6,
        hidden: 6,
        dir_freqs: 2,
        grid_divisions: 6,
        ablation,
        ..ModelConfig::default()
    }
}

/// Checks the gradient of a weighted sum of densities and colors at `points`
/// query points with respect to every parameter of each ablation variant.
pub fn model_cases(seed: u64, points: usize) -> Result<Vec<SuiteCase>> {
    let capture = CaptureConfig {
        width: 24,
        height: 24,
        frames: 4,
        views: 3,
        vertex_count: 90,
        ..CaptureConfig::default()
    };
    let set = generate_captures(&[seed], &capture)?;
    let subject = &set.subjects[0];
    let inp = FrameInputs::from_subject(subject, &set.cameras, &[0, 1, 2], 1, &[0, 3])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let verts = &subject.frames[1].vertices;
    let (pts, dirs): (Vec<Vec3>, Vec<Vec3>) = (0..points)
        .map(|_| {
            let v = verts[rng.gen_range(0..verts.len())];
            let p = [0, 1, 2].map(|i| v[i] + rng.gen_range(-0.08..0.08));
            (p, normalize([0, 1, 2].map(|_| rng.gen_range(-1.0..1.0))))
        })
        .unzip();
    let ws = uniform(&mut rng, points, -1.0, 1.0);
    let wc = uniform(&mut rng, points * 3, -1.0, 1.0);

    let mut cases = Vec::new();
    for ablation in Ablation::VARIANTS {
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(&mut store, tiny_model_config(ablation), seed)?;
        // Zero biases on a black background put whole regions exactly on
        // the relu kink; random biases move the check to a generic point.
        for (name, t) in store.iter_mut() {
            if name.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
        }
        let report = grad_check_params(
            &store,
            |tape, store| {
                let state = model.prepare_frame(tape, store, &inp, None)?;
                let out = model.evaluate_points(tape, store, &state, &pts, &dirs)?;
                let a = tape.constant(&[points], ws.clone())?;
                let b = tape.constant(&[points, 3], wc.clone())?;
                let s = tape.mul(out.sigma, a)?;
                let c = tape.mul(out.rgb, b)?;
                let (s, c) = (tape.sum(s), tape.sum(c));
                tape.add(s, c)
            },
            FD_STEP,
        )?;
        cases.push(SuiteCase {
            name: format!("model {}", ablation.label()),
            report,
            tolerance: MODEL_TOLERANCE,
        });
    }
    Ok(cases)
}

/// Every op check followed by the model checks.
pub fn full_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut cases = op_cases(seed)?;
    cases.extend(model_cases(seed, 12)?);
    Ok(cases)
}
