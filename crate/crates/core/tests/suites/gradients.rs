//! Central finite-difference checks of every differentiable graph
//! operation, 100 random instances each.

use paraal::numerics::{DropoutMask, Graph, ParamStore, Rng, Var};
use paraal::Result;

const TRIALS: usize = 100;
const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

struct Case {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

/// `sum(op(params) ⊙ r)` for a fixed random `r`.
fn loss(
    store: &ParamStore,
    ids: &[usize],
    build: &Build,
    weights: &mut Option<Vec<f64>>,
    seed: u64,
) -> (f64, Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
    let out = build(&mut g, &vars).expect("forward");
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let w = weights.get_or_insert_with(|| {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| rng.normal()).collect()
    });
    let r = g.input(shape, w.clone()).unwrap();
    let prod = g.mul(out, r).unwrap();
    let total = g.sum(prod).unwrap();
    (g.scalar(total), g, total, vars)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst per-tensor relative error `|a - n| / max(|a|, |n|)` over `TRIALS`
/// cases drawn by `gen`.
fn check(name: &str, gen: impl Fn(&mut Rng) -> Case, build: &Build) {
    let mut rng = Rng::new(0xfeed ^ name.len() as u64);
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let case = gen(&mut rng);
        let mut store = ParamStore::new();
        let ids: Vec<usize> = case
            .shapes
            .iter()
            .zip(&case.values)
            .enumerate()
            .map(|(k, (s, v))| store.add(&format!("p{k}"), s.clone(), v.clone()).unwrap())
            .collect();
        let mut weights = None;
        let seed = trial as u64;
        let (_, mut g, total, vars) = loss(&store, &ids, build, &mut weights, seed);
        g.backward(total).unwrap();
        for (k, &id) in ids.iter().enumerate() {
            let analytic = g
                .grad(vars[k])
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; case.values[k].len()]);
            let mut numeric = vec![0.0; analytic.len()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let orig = store.get(id).values[j];
                store.get_mut(id).values[j] = orig + STEP;
                let up = loss(&store, &ids, build, &mut weights, seed).0;
                store.get_mut(id).values[j] = orig - STEP;
                let down = loss(&store, &ids, build, &mut weights, seed).0;
                store.get_mut(id).values[j] = orig;
                *slot = (up - down) / (2.0 * STEP);
            }
            let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
            let scale = norm(&analytic).max(norm(&numeric));
            let rel = if scale < 1e-12 {
                norm(&diff)
            } else {
                norm(&diff) / scale
            };
            worst = worst.max(rel);
            assert!(
                rel < TOLERANCE,
                "{name}: trial {trial}, input {k}: relative error {rel:e}\n analytic {analytic:?}\n numeric  {numeric:?}"
            );
        }
    }
    eprintln!("{name}: worst relative error {worst:.2e} over {TRIALS} trials");
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (1 + rng.below(4), 1 + rng.below(5))
}

fn normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Values bounded away from zero, for kinked or singular ops.
fn away_from_zero(rng: &mut Rng, n: usize, lo: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = lo + rng.uniform() * 2.0;
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect()
}

fn unary(
    shape_gen: fn(&mut Rng) -> (usize, usize),
    values: fn(&mut Rng, usize) -> Vec<f64>,
) -> impl Fn(&mut Rng) -> Case {
    move |rng| {
        let (r, c) = shape_gen(rng);
        Case {
            shapes: vec![vec![r, c]],
            values: vec![values(rng, r * c)],
        }
    }
}

fn binary_same(rng: &mut Rng) -> Case {
    let (r, c) = dims(rng);
    Case {
        shapes: vec![vec![r, c], vec![r, c]],
        values: vec![normal(rng, r * c), normal(rng, r * c)],
    }
}

pub fn matmul() {
    check(
        "matmul",
        |rng| {
            let (r, k) = dims(rng);
            let c = 1 + rng.below(4);
            Case {
                shapes: vec![vec![r, k], vec![k, c]],
                values: vec![normal(rng, r * k), normal(rng, k * c)],
            }
        },
        &|g, v| g.matmul(v[0], v[1]),
    );
}

pub fn add_sub_mul() {
    check("add", binary_same, &|g, v| g.add(v[0], v[1]));
    check("sub", binary_same, &|g, v| g.sub(v[0], v[1]));
    check("multiply", binary_same, &|g, v| g.mul(v[0], v[1]));
}

pub fn add_bias_broadcast() {
    check(
        "add_bias",
        |rng| {
            let (r, c) = dims(rng);
            Case {
                shapes: vec![vec![r, c], vec![c]],
                values: vec![normal(rng, r * c), normal(rng, c)],
            }
        },
        &|g, v| g.add(v[0], v[1]),
    );
}

pub fn scale_and_shift() {
    check("scale", unary(dims, normal), &|g, v| g.scale(v[0], -1.7));
    check("add_scalar", unary(dims, normal), &|g, v| g.add_scalar(v[0], 0.3));
}

pub fn nonlinearities() {
    check("tanh", unary(dims, normal), &|g, v| g.tanh(v[0]));
    check("sigmoid", unary(dims, normal), &|g, v| g.sigmoid(v[0]));
    check("relu", unary(dims, |r, n| away_from_zero(r, n, 1e-2)), &|g, v| {
        g.relu(v[0])
    });
    check(
        "sqrt",
        unary(dims, |r, n| (0..n).map(|_| 0.2 + 2.0 * r.uniform()).collect()),
        &|g, v| g.sqrt(v[0]),
    );
    check(
        "log",
        unary(dims, |r, n| (0..n).map(|_| 0.2 + 2.0 * r.uniform()).collect()),
        &|g, v| g.log(v[0]),
    );
}

pub fn reductions_and_softmax() {
    check("mean", unary(dims, normal), &|g, v| g.mean(v[0]));
    check("sum", unary(dims, normal), &|g, v| g.sum(v[0]));
    check("softmax", unary(dims, normal), &|g, v| g.softmax(v[0]));
}

pub fn concat_both_axes() {
    check(
        "concat_rows",
        |rng| {
            let (r, c) = dims(rng);
            let r2 = 1 + rng.below(3);
            Case {
                shapes: vec![vec![r, c], vec![r2, c]],
                values: vec![normal(rng, r * c), normal(rng, r2 * c)],
            }
        },
        &|g, v| g.concat(&[v[0], v[1]], 0),
    );
    check(
        "concat_columns",
        |rng| {
            let (r, c) = dims(rng);
            let c2 = 1 + rng.below(3);
            Case {
                shapes: vec![vec![r, c], vec![r, c2]],
                values: vec![normal(rng, r * c), normal(rng, r * c2)],
            }
        },
        &|g, v| g.concat(&[v[0], v[1]], 1),
    );
}

pub fn embedding_lookup() {
    // repeated indices must accumulate
    check(
        "embedding",
        unary(|r| (4 + r.below(3), 1 + r.below(4)), normal),
        &|g, v| {
            let rows = g.shape(v[0])[0];
            g.embedding(v[0], vec![0, rows - 1, 0, 2])
        },
    );
}

pub fn distances() {
    check("sq_distance", binary_same, &|g, v| g.sq_distance(v[0], v[1]));
    check("distance", binary_same, &|g, v| g.distance(v[0], v[1], 1e-9));
}

pub fn dropout_mask() {
    check("dropout", unary(dims, normal), &|g, v| {
        let n = g.value(v[0]).len();
        let mask = DropoutMask::sample(n, 0.6, n as u64).unwrap();
        g.apply_mask(v[0], &mask)
    });
}

pub fn cross_entropy_with_ignored_positions() {
    check(
        "cross_entropy",
        |rng| {
            let r = 2 + rng.below(4);
            let c = 2 + rng.below(4);
            Case {
                shapes: vec![vec![r, c]],
                values: vec![normal(rng, r * c)],
            }
        },
        &|g, v| {
            let (r, c) = (g.shape(v[0])[0], g.shape(v[0])[1]);
            // the last row is ignored
            let mut targets: Vec<usize> = (0..r).map(|i| (i * 7 + 1) % c).collect();
            targets[r - 1] = c + 5;
            g.cross_entropy(v[0], targets, c + 5)
        },
    );
}

pub fn composed_network() {
    // a two-layer perceptron with a loss, as used in training
    check(
        "mlp",
        |rng| {
            let (b, d) = (2 + rng.below(3), 2 + rng.below(3));
            let h = 2 + rng.below(3);
            Case {
                shapes: vec![vec![b, d], vec![d, h], vec![h], vec![h, 3]],
                values: vec![
                    normal(rng, b * d),
                    normal(rng, d * h),
                    normal(rng, h),
                    normal(rng, h * 3),
                ],
            }
        },
        &|g, v| {
            let a = g.matmul(v[0], v[1])?;
            let a = g.add(a, v[2])?;
            let a = g.tanh(a)?;
            let logits = g.matmul(a, v[3])?;
            let b = g.shape(logits)[0];
            g.cross_entropy(logits, (0..b).map(|i| i % 3).collect(), 99)
        },
    );
}

#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("matmul", matmul),
    ("add_sub_mul", add_sub_mul),
    ("add_bias_broadcast", add_bias_broadcast),
    ("scale_and_shift", scale_and_shift),
    ("nonlinearities", nonlinearities),
    ("reductions_and_softmax", reductions_and_softmax),
    ("concat_both_axes", concat_both_axes),
    ("embedding_lookup", embedding_lookup),
    ("distances", distances),
    ("dropout_mask", dropout_mask),
    (
        "cross_entropy_with_ignored_positions",
        cross_entropy_with_ignored_positions,
    ),
    ("composed_network", composed_network),
];
