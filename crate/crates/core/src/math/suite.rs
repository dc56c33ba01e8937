//! Randomized finite-difference sweep over every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::math::gradcheck::{analytic_gradient, central_differences, max_relative_error};
use crate::math::{finite_difference_check, Graph, Tensor, Var};

pub const SUITE_EPS: f32 = 1e-3;

/// Worst relative error seen for one op or head.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f32,
}

type Check = fn(&mut ChaCha8Rng) -> Result<f32>;

const OPS: [(&str, Check); 17] = [
    ("matmul", matmul),
    ("add", add),
    ("sub", sub),
    ("add_row", add_row),
    ("scale", scale),
    ("relu", relu),
    ("tanh", tanh),
    ("concat", concat),
    ("slice", slice),
    ("sum", sum),
    ("mean", mean),
    ("mse", mse),
    ("softmax_cross_entropy", softmax_ce),
    ("l2_norm", l2_norm),
    ("gather", gather),
    ("straight_through", straight_through),
    ("detach", detach),
];

/// Runs `cases` random instances of every op.
pub fn op_suite(cases: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OPS.iter()
        .map(|&(name, check)| {
            let mut worst = 0.0f32;
            for _ in 0..cases {
                worst = worst.max(check(&mut rng).map_err(|e| crate::Error::usage(format!("{name}: {e}")))?);
            }
            Ok(SuiteEntry {
                name: name.to_string(),
                cases,
                max_rel_err: worst,
            })
        })
        .collect()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=5))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// `mse(out, target)`, which gives every output coordinate its own weight.
fn against(g: &mut Graph, out: Var, target: &Tensor) -> Result<Var> {
    let t = g.input(target.clone())?;
    g.mse(out, t)
}

/// Checks a binary op with respect to each operand in turn.
fn binary(a: Tensor, b: Tensor, out_shape: &[usize], op: fn(&mut Graph, Var, Var) -> Result<Var>, rng: &mut ChaCha8Rng) -> Result<f32> {
    let target = randn(out_shape, rng);
    let wrt_a = finite_difference_check(
        |g, x| {
            let y = g.input(b.clone())?;
            let o = op(g, x, y)?;
            against(g, o, &target)
        },
        &a,
        SUITE_EPS,
    )?;
    let wrt_b = finite_difference_check(
        |g, y| {
            let x = g.input(a.clone())?;
            let o = op(g, x, y)?;
            against(g, o, &target)
        },
        &b,
        SUITE_EPS,
    )?;
    Ok(wrt_a.max(wrt_b))
}

fn unary(a: &Tensor, out_shape: &[usize], op: impl Fn(&mut Graph, Var) -> Result<Var>, rng: &mut ChaCha8Rng) -> Result<f32> {
    let target = randn(out_shape, rng);
    finite_difference_check(
        |g, x| {
            let o = op(g, x)?;
            against(g, o, &target)
        },
        a,
        SUITE_EPS,
    )
}

fn matmul(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (m, k) = dims(rng);
    let n = rng.random_range(1..=5);
    binary(randn(&[m, k], rng), randn(&[k, n], rng), &[m, n], |g, a, b| g.matmul(a, b), rng)
}

fn add(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (r, c) = dims(rng);
    binary(randn(&[r, c], rng), randn(&[r, c], rng), &[r, c], |g, a, b| g.add(a, b), rng)
}

fn sub(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (r, c) = dims(rng);
    binary(randn(&[r, c], rng), randn(&[r, c], rng), &[r, c], |g, a, b| g.sub(a, b), rng)
}

fn add_row(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (r, c) = dims(rng);
    binary(randn(&[r, c], rng), randn(&[1, c], rng), &[r, c], |g, a, b| g.add_row(a, b), rng)
}

fn scale(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (r, c) = dims(rng);
    let s: f32 = rng.random_range(-3.0..3.0);
    unary(&randn(&[r, c], rng), &[r, c], move |g, x| g.scale(x, s), rng)
}

fn relu(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (r, c) = dims(rng);
    // keep clear of the kink so the central difference stays on one side
    let mut a = randn(&[r, c], rng);
    for v in a.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.05f32.copysign(*v) + *v;
        }
    }
    unary(&a, &[r, c], |g, x| g.relu(x), rng)
}

fn tanh(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (r, c) = dims(rng);
    unary(&randn(&[r, c], rng), &[r, c], |g, x| g.tanh(x), rng)
}

fn concat(rng: &mut ChaCha8Rng) -> Result<f32> {
    let r = rng.random_range(1..=4);
    let widths: Vec<usize> = (0..rng.random_range(2..=3)).map(|_| rng.random_range(1..=4)).collect();
    let parts: Vec<Tensor> = widths.iter().map(|&w| randn(&[r, w], rng)).collect();
    let target = randn(&[r, widths.iter().sum()], rng);
    let mut worst = 0.0f32;
    for i in 0..parts.len() {
        let err = finite_difference_check(
            |g, x| {
                let vars = parts
                    .iter()
                    .enumerate()
                    .map(|(j, p)| if j == i { Ok(x) } else { g.input(p.clone()) })
                    .collect::<Result<Vec<_>>>()?;
                let o = g.concat(&vars)?;
                against(g, o, &target)
            },
            &parts[i],
            SUITE_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn slice(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (r, c) = dims(rng);
    let start = rng.random_range(0..c);
    let end = rng.random_range(start + 1..=c);
    unary(&randn(&[r, c], rng), &[r, end - start], move |g, x| g.slice(x, start, end), rng)
}

fn sum(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (r, c) = dims(rng);
    unary(&randn(&[r, c], rng), &[1], |g, x| g.sum(x), rng)
}

fn mean(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (r, c) = dims(rng);
    unary(&randn(&[r, c], rng), &[1], |g, x| g.mean(x), rng)
}

fn mse(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (r, c) = dims(rng);
    let (a, b) = (randn(&[r, c], rng), randn(&[r, c], rng));
    let wrt_a = finite_difference_check(
        |g, x| {
            let y = g.input(b.clone())?;
            g.mse(x, y)
        },
        &a,
        SUITE_EPS,
    )?;
    let wrt_b = finite_difference_check(
        |g, y| {
            let x = g.input(a.clone())?;
            g.mse(x, y)
        },
        &b,
        SUITE_EPS,
    )?;
    Ok(wrt_a.max(wrt_b))
}

fn softmax_ce(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (r, c) = dims(rng);
    let c = c.max(2);
    let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    let logits = Tensor::randn(&[r, c], 2.0, rng);
    finite_difference_check(|g, x| g.softmax_cross_entropy(x, &targets), &logits, SUITE_EPS)
}

fn l2_norm(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (r, c) = dims(rng);
    unary(&randn(&[r, c], rng), &[1], |g, x| g.l2_norm(x), rng)
}

fn gather(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (rows, c) = dims(rng);
    let idx: Vec<usize> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..rows)).collect();
    let n = idx.len();
    unary(&randn(&[rows, c], rng), &[n, c], move |g, x| g.gather(x, &idx), rng)
}

/// The gradient reaching `a` must equal the gradient of the downstream
/// function taken at the emitted value.
fn straight_through(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (r, c) = dims(rng);
    let a = randn(&[r, c], rng);
    let q = randn(&[r, c], rng);
    let target = randn(&[r, c], rng);
    let downstream = |g: &mut Graph, v: Var| -> Result<Var> {
        let t = g.tanh(v)?;
        against(g, t, &target)
    };
    let analytic = analytic_gradient(
        |g, x| {
            let v = g.straight_through(x, q.clone())?;
            downstream(g, v)
        },
        &a,
    )?;
    let numeric = central_differences(downstream, &q, SUITE_EPS)?;
    Ok(max_relative_error(&analytic, &numeric))
}

fn detach(rng: &mut ChaCha8Rng) -> Result<f32> {
    let (r, c) = dims(rng);
    let target = randn(&[r, c], rng);
    finite_difference_check(
        |g, x| {
            let d = g.detach(x)?;
            let t = g.tanh(x)?;
            let s = g.add(d, t)?;
            against(g, s, &target)
        },
        &randn(&[r, c], rng),
        SUITE_EPS,
    )
}
