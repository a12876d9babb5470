//! Central finite-difference verification of the reverse-mode gradients.
//!
//! Each case builds a scalar loss from random leaf values, runs the tape
//! backward pass, and compares every gradient entry against a two-sided
//! difference quotient computed from fresh forward evaluations. The forward
//! path is shared, the derivative path is not, so this is an independent
//! check of `backward`.

use crate::autodiff::{DiffValue, Shape, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub cases: usize,
    pub gradients_checked: usize,
    pub max_rel_err: f64,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Evaluate `build` with the given inputs as recorded leaves and return
/// (loss value, per-input gradient buffers).
fn eval_with_grads<F>(inputs: &[(Vec<f64>, Shape)], build: &F) -> (f64, Vec<Vec<f64>>)
where
    F: Fn(&mut Tape, &[DiffValue]) -> DiffValue,
{
    let mut tape = Tape::new();
    let leaves: Vec<DiffValue> = inputs
        .iter()
        .map(|(data, shape)| tape.leaf(data.clone(), shape.clone()))
        .collect();
    let loss = build(&mut tape, &leaves);
    let grads = tape.backward(&loss).expect("gradcheck loss must be a recorded scalar");
    let out = leaves
        .iter()
        .map(|l| grads.grad(l.node().unwrap()).to_vec())
        .collect();
    (loss.scalar_value(), out)
}

fn eval_value<F>(inputs: &[(Vec<f64>, Shape)], build: &F) -> f64
where
    F: Fn(&mut Tape, &[DiffValue]) -> DiffValue,
{
    let mut tape = Tape::new();
    let leaves: Vec<DiffValue> = inputs
        .iter()
        .map(|(data, shape)| tape.leaf(data.clone(), shape.clone()))
        .collect();
    build(&mut tape, &leaves).scalar_value()
}

/// Compare backward against central finite differences for one case.
/// Returns (number of gradient entries, max relative error).
fn check_case<F>(inputs: &[(Vec<f64>, Shape)], build: F) -> (usize, f64)
where
    F: Fn(&mut Tape, &[DiffValue]) -> DiffValue,
{
    let (_, grads) = eval_with_grads(inputs, &build);
    let mut worst = 0.0f64;
    let mut count = 0;
    for (i, (data, _)) in inputs.iter().enumerate() {
        for j in 0..data.len() {
            let mut plus = inputs.to_vec();
            plus[i].0[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[i].0[j] -= FD_EPS;
            let fd = (eval_value(&plus, &build) - eval_value(&minus, &build)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(grads[i][j], fd));
            count += 1;
        }
    }
    (count, worst)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Run the full finite-difference suite: every primitive plus a 3-layer MLP,
/// `cases` random configurations spread across them.
pub fn run(seed: u64, cases: usize) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total_cases = 0;
    let mut total_grads = 0;
    let mut worst = 0.0f64;

    let mut record = |(n, e): (usize, f64)| {
        total_cases += 1;
        total_grads += n;
        worst = worst.max(e);
    };

    for case in 0..cases {
        let m = rng.gen_range(1..5usize);
        let k = rng.gen_range(1..5usize);
        let n = rng.gen_range(1..5usize);
        match case % 10 {
            0 => {
                // add / sub with optional scalar broadcast
                let a = (rand_vec(&mut rng, m * k), Shape::matrix(m, k));
                let b = if case % 20 < 10 && rng.gen_bool(0.3) {
                    (rand_vec(&mut rng, 1), Shape::vector(1))
                } else {
                    (rand_vec(&mut rng, m * k), Shape::matrix(m, k))
                };
                record(check_case(&[a, b], |t, l| {
                    let s = t.add(&l[0], &l[1]).unwrap();
                    let d = t.sub(&s, &l[0]).unwrap();
                    let sq = t.square(&d);
                    t.mean(&sq)
                }));
            }
            1 => {
                // elementwise mul, scalar broadcast half the time
                let a = (rand_vec(&mut rng, k), Shape::vector(k));
                let b = if rng.gen_bool(0.5) {
                    (rand_vec(&mut rng, 1), Shape::vector(1))
                } else {
                    (rand_vec(&mut rng, k), Shape::vector(k))
                };
                record(check_case(&[a, b], |t, l| {
                    let p = t.mul(&l[0], &l[1]).unwrap();
                    t.sum(&p)
                }));
            }
            2 => {
                let a = (rand_vec(&mut rng, m * k), Shape::matrix(m, k));
                let b = (rand_vec(&mut rng, k * n), Shape::matrix(k, n));
                record(check_case(&[a, b], |t, l| {
                    let p = t.matmul(&l[0], &l[1]).unwrap();
                    let sq = t.square(&p);
                    t.mean(&sq)
                }));
            }
            3 => {
                let x = (rand_vec(&mut rng, m * k), Shape::matrix(m, k));
                let w = (rand_vec(&mut rng, k * n), Shape::matrix(k, n));
                let b = (rand_vec(&mut rng, n), Shape::vector(n));
                record(check_case(&[x, w, b], |t, l| {
                    let y = t.affine(&l[0], &l[1], &l[2]).unwrap();
                    let sq = t.square(&y);
                    t.mean(&sq)
                }));
            }
            4 => {
                let x = (rand_vec(&mut rng, k), Shape::vector(k));
                record(check_case(&[x], |t, l| {
                    let y = t.tanh(&l[0]);
                    t.sum(&y)
                }));
            }
            5 => {
                let x = (rand_vec(&mut rng, k), Shape::vector(k));
                record(check_case(&[x], |t, l| {
                    let y = t.silu(&l[0]);
                    t.mean(&y)
                }));
            }
            6 => {
                let c = rng.gen_range(-2.0..2.0);
                let x = (rand_vec(&mut rng, m * k), Shape::matrix(m, k));
                record(check_case(&[x], move |t, l| {
                    let y = t.scalar_mul(c, &l[0]);
                    let sq = t.square(&y);
                    t.sum(&sq)
                }));
            }
            7 => {
                let a = (rand_vec(&mut rng, m * k), Shape::matrix(m, k));
                let b = (rand_vec(&mut rng, n * k), Shape::matrix(n, k));
                record(check_case(&[a, b], |t, l| {
                    let cat = t.concat_rows(&l[0], &l[1]).unwrap();
                    let sq = t.square(&cat);
                    t.mean(&sq)
                }));
            }
            8 => {
                let mtx = (rand_vec(&mut rng, m * k), Shape::matrix(m, k));
                let s = (rand_vec(&mut rng, m), Shape::vector(m));
                record(check_case(&[mtx, s], |t, l| {
                    let y = t.row_scale(&l[0], &l[1]).unwrap();
                    let sq = t.square(&y);
                    t.mean(&sq)
                }));
            }
            _ => {
                // 3-layer MLP: x -> silu(affine) -> tanh(affine) -> affine -> mean of squares
                let h = rng.gen_range(2..5usize);
                let batch = rng.gen_range(1..4usize);
                let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..m)).collect();
                let table = (rand_vec(&mut rng, m * k), Shape::matrix(m, k));
                let w1 = (rand_vec(&mut rng, k * h), Shape::matrix(k, h));
                let b1 = (rand_vec(&mut rng, h), Shape::vector(h));
                let w2 = (rand_vec(&mut rng, h * h), Shape::matrix(h, h));
                let b2 = (rand_vec(&mut rng, h), Shape::vector(h));
                let w3 = (rand_vec(&mut rng, h * n), Shape::matrix(h, n));
                let b3 = (rand_vec(&mut rng, n), Shape::vector(n));
                record(check_case(
                    &[table, w1, b1, w2, b2, w3, b3],
                    move |t, l| {
                        let x = t.gather_rows(&l[0], &idx).unwrap();
                        let h1 = t.affine(&x, &l[1], &l[2]).unwrap();
                        let h1 = t.silu(&h1);
                        let h2 = t.affine(&h1, &l[3], &l[4]).unwrap();
                        let h2 = t.tanh(&h2);
                        let y = t.affine(&h2, &l[5], &l[6]).unwrap();
                        let sq = t.square(&y);
                        t.mean(&sq)
                    },
                ));
            }
        }
    }

    GradCheckReport {
        cases: total_cases,
        gradients_checked: total_grads,
        max_rel_err: worst,
    }
}
