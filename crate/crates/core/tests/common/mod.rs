//! Finite-difference gradient checks shared by the gradient tests and the acceptance suite.

#![allow(dead_code)]

use causalpix_core::dlm::{self, pixel_logprob, unpack_head};
use causalpix_core::tape::{Tape, Var};
use causalpix_core::{ConvGeometry, Images, Padding, Pixel, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_POINTS: usize = 100;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of a scalar function of a flat vector.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Scalar root `Σ w ⊙ f(inputs)` with fixed random weights `w`.
fn root_value(build: &Build<'_>, inputs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>, seed: u64) -> (f64, Tape<f64>, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("op evaluates");
    let shape = tape.shape(out).to_vec();
    let w = weights
        .get_or_insert_with(|| Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)))
        .clone();
    let weighted = tape.mul_const(out, w).expect("weights match");
    let root = tape.sum(weighted).expect("sum");
    (tape.value(root).item().unwrap(), tape, vars, root)
}

/// Largest relative error of the tape gradient over all inputs of one evaluation.
pub fn check(build: &Build<'_>, inputs: Vec<Tensor<f64>>, seed: u64) -> f64 {
    let mut weights = None;
    let (_, tape, vars, root) = root_value(build, &inputs, &mut weights, seed);
    let grads = tape.backward(root).expect("backward");
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradient").elems().to_vec();
        let numeric = numeric_grad(inputs[k].elems(), |x| {
            let mut perturbed = inputs.clone();
            perturbed[k] = Tensor::new(inputs[k].shape().to_vec(), x.to_vec()).unwrap();
            root_value(build, &perturbed, &mut weights, seed).0
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kink: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.random_range(lo..hi);
        if (v - kink).abs() > 1e-2 {
            break v;
        }
    })
}

fn u(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -2.0, 2.0, rng)
}

pub type InputFn = dyn Fn(&mut ChaCha8Rng, usize) -> Vec<Tensor<f64>>;
pub type GraphFn = dyn Fn(&mut Tape<f64>, &[Var], usize) -> Result<Var>;

/// One named primitive: builds its random inputs from an RNG and its graph from leaves.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Box<InputFn>,
    /// Receives the point index as its last argument.
    pub build: Box<GraphFn>,
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut ChaCha8Rng, usize) -> Vec<Tensor<f64>> + 'static,
    build: impl Fn(&mut Tape<f64>, &[Var], usize) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs: Box::new(inputs),
        build: Box::new(build),
    }
}

/// Bin values for point `i`; the first points pin the edge bins.
fn bins(i: usize, n: usize) -> Vec<f64> {
    const EDGES: [f64; 4] = [0.0, 1.0, 254.0, 255.0];
    (0..n)
        .map(|j| if i < EDGES.len() { EDGES[(i + j) % 4] } else { ((i * 37 + j * 101) % 256) as f64 })
        .collect()
}

/// Every differentiable tape primitive.
pub fn op_cases() -> Vec<OpCase> {
    let down = ConvGeometry::new(2, 3, (1, 1), Padding::new(1, 0, 1, 1));
    let strided = ConvGeometry::new(2, 3, (2, 2), Padding::new(1, 0, 1, 1));
    let up = ConvGeometry::new(2, 2, (2, 2), Padding::new(0, 0, 0, 0));
    vec![
        case("add", |r, _| vec![u(r, &[2, 3]), u(r, &[2, 3])], |t, v, _| t.add(v[0], v[1])),
        case("sub", |r, _| vec![u(r, &[2, 3]), u(r, &[2, 3])], |t, v, _| t.sub(v[0], v[1])),
        case("mul", |r, _| vec![u(r, &[2, 3]), u(r, &[2, 3])], |t, v, _| t.mul(v[0], v[1])),
        case("scale", |r, _| vec![u(r, &[5])], |t, v, _| t.scale(v[0], -1.7)),
        case("neg", |r, _| vec![u(r, &[5])], |t, v, _| t.neg(v[0])),
        case("add_scalar", |r, _| vec![u(r, &[5])], |t, v, _| t.add_scalar(v[0], 0.3)),
        case("sigmoid", |r, _| vec![Tensor::uniform([6], -8.0, 8.0, r)], |t, v, _| t.sigmoid(v[0])),
        case("tanh", |r, _| vec![u(r, &[6])], |t, v, _| t.tanh(v[0])),
        case("softplus", |r, _| vec![Tensor::uniform([6], -8.0, 8.0, r)], |t, v, _| t.softplus(v[0])),
        case("exp", |r, _| vec![u(r, &[6])], |t, v, _| t.exp(v[0])),
        case("log", |r, _| vec![Tensor::uniform([6], 0.1, 5.0, r)], |t, v, _| t.log(v[0])),
        case("elu", |r, _| vec![away_from(r, &[8], -3.0, 3.0, 0.0)], |t, v, _| t.elu(v[0])),
        case("clamp_min", |r, _| vec![away_from(r, &[8], -3.0, 3.0, -0.5)], |t, v, _| t.clamp_min(v[0], -0.5)),
        case("logsumexp", |r, _| vec![Tensor::uniform([2, 4, 3], -5.0, 5.0, r)], |t, v, _| t.logsumexp(v[0], 1)),
        case("log_softmax", |r, _| vec![Tensor::uniform([3, 5], -5.0, 5.0, r)], |t, v, _| t.log_softmax(v[0], 1)),
        case("concat", |r, _| vec![u(r, &[2, 2, 3]), u(r, &[2, 2, 1])], |t, v, _| t.concat(&[v[0], v[1]], 2)),
        case("slice", |r, _| vec![u(r, &[2, 5])], |t, v, _| t.slice(v[0], 1, 1, 3)),
        case("split", |r, _| vec![u(r, &[3, 4])], |t, v, _| {
            let parts = t.split(v[0], 1, &[1, 3])?;
            let a = t.sum(parts[0])?;
            let b = t.scale(parts[1], 2.0)?;
            let b = t.sum(b)?;
            t.add(a, b)
        }),
        case("reshape", |r, _| vec![u(r, &[2, 6])], |t, v, _| t.reshape(v[0], vec![3, 4])),
        case("pad", |r, _| vec![u(r, &[2, 3])], |t, v, _| t.pad(v[0], &[(1, 0), (2, 1)])),
        case("dense", |r, _| vec![u(r, &[2, 3, 4]), u(r, &[4, 5]), u(r, &[5])], |t, v, _| {
            t.dense(v[0], v[1], Some(v[2]))
        }),
        case("conv2d", move |r, _| vec![u(r, &[2, 4, 5, 3]), u(r, &[2, 3, 3, 2])], move |t, v, _| {
            t.conv2d(v[0], v[1], down)
        }),
        case("conv2d strided", move |r, _| vec![u(r, &[1, 4, 4, 2]), u(r, &[2, 3, 2, 3])], move |t, v, _| {
            t.conv2d(v[0], v[1], strided)
        }),
        case("conv2d_transpose", move |r, _| vec![u(r, &[1, 2, 3, 3]), u(r, &[2, 2, 2, 3])], move |t, v, _| {
            t.conv2d_transpose(v[0], v[1], up)
        }),
        case("add_bias", |r, _| vec![u(r, &[2, 2, 3]), u(r, &[3])], |t, v, _| t.add_bias(v[0], v[1])),
        case("add_item_bias", |r, _| vec![u(r, &[2, 2, 2, 3]), u(r, &[2, 3])], |t, v, _| {
            t.add_item_bias(v[0], v[1])
        }),
        case("gather_rows", |r, _| vec![u(r, &[4, 3])], |t, v, _| t.gather_rows(v[0], &[2, 0, 2])),
        case("mul_const", |r, _| vec![u(r, &[2, 3])], |t, v, _| {
            let c = Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, 1.5])?;
            t.mul_const(v[0], c)
        }),
        case("dropout_mask_apply", |r, _| vec![u(r, &[6])], |t, v, _| {
            t.dropout_mask_apply(v[0], Tensor::new([6], vec![2.0, 0.0, 2.0, 2.0, 0.0, 0.0])?)
        }),
        case("mul_row_const", |r, _| vec![u(r, &[3, 2])], |t, v, _| t.mul_row_const(v[0], vec![0.5, -2.0, 1.0])),
        case("sum", |r, _| vec![u(r, &[2, 3])], |t, v, _| t.sum(v[0])),
        case("pick", |r, _| vec![u(r, &[3, 4])], |t, v, _| t.pick(v[0], vec![3, 0, 1])),
        case(
            "bin_log_mass",
            |r, i| {
                let x = bins(i, 4);
                let mu = Tensor::from_fn([4], |j| x[j] + r.random_range(-6.0..6.0));
                vec![mu, Tensor::uniform([4], -1.0, 2.5, r)]
            },
            |t, v, i| t.bin_log_mass(bins(i, 4), v[0], v[1]),
        ),
    ]
}

/// Worst relative error of `case` over `points` random evaluations.
pub fn check_case(case: &OpCase, points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..points {
        let inputs = (case.inputs)(&mut rng, i);
        let build = |t: &mut Tape<f64>, v: &[Var]| (case.build)(t, v, i);
        worst = worst.max(check(&build, inputs, seed + i as u64));
    }
    worst
}

/// Mixture components used by the end-to-end head check.
pub const HEAD_K: usize = 3;

/// Random pixel and raw head; the first points use the edge values.
pub fn head_point(rng: &mut ChaCha8Rng, i: usize) -> (Pixel, Vec<f64>) {
    const EDGES: [u8; 4] = [0, 1, 254, 255];
    let p = if i < EDGES.len() {
        Pixel::new(EDGES[i], EDGES[(i + 1) % 4], EDGES[(i + 2) % 4])
    } else {
        Pixel::new(rng.random(), rng.random(), rng.random())
    };
    let mut raw = Vec::with_capacity(dlm::head_channels(HEAD_K));
    for _ in 0..HEAD_K {
        raw.push(rng.random_range(-2.0..2.0));
        for _ in 0..3 {
            raw.push(rng.random_range(-1.1..1.1));
        }
        for _ in 0..3 {
            raw.push(rng.random_range(-4.5..-1.0));
        }
        for _ in 0..3 {
            raw.push(rng.random_range(-1.5..1.5));
        }
    }
    (p, raw)
}

/// Tape gradient of the pixel log-likelihood with respect to the raw head,
/// against central differences of the scalar `pixel_logprob ∘ unpack_head`.
pub fn check_head_point(p: Pixel, raw: &[f64]) -> f64 {
    let images = Images::new(1, 1, 1, p.channels().to_vec()).unwrap();
    let mut tape = Tape::<f64>::new();
    let h = tape.leaf(Tensor::new([1, 1, 1, raw.len()], raw.to_vec()).unwrap());
    let lp = dlm::log_prob_on_tape(&mut tape, h, &images, HEAD_K).unwrap();
    let root = tape.sum(lp).unwrap();
    let scalar = pixel_logprob(p, &unpack_head(raw, HEAD_K).unwrap()).unwrap();
    assert!((tape.value(root).item().unwrap() - scalar).abs() < 1e-9 * (1.0 + scalar.abs()));
    let analytic = tape.backward(root).unwrap().get(h).unwrap().elems().to_vec();
    let numeric = numeric_grad(raw, |x| pixel_logprob(p, &unpack_head(x, HEAD_K).unwrap()).unwrap());
    relative_error(&analytic, &numeric)
}
