//! Shared helpers for the integration suites: seeded tensors and the
//! finite-difference gradient check harness.
#![allow(dead_code)]

use dewarp::gradcheck::{max_rel_err, numeric_grad};
use dewarp::tape::{Tape, Var};
use dewarp::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighs a non-scalar output by a fixed random functional so gradient
/// checks exercise non-uniform cotangents, then sums to a scalar.
pub fn spear(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, &shape);
    let wv = tape.constant(w);
    let prod = tape.mul(y, wv).unwrap();
    tape.sum_all(prod)
}

/// Checks d(loss)/d(inputs[which]) for the graph `build` constructs
/// against central differences. `build` must end in a scalar node.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], which: usize, tol: f64, build: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    assert_eq!(tape.value(loss).data().len(), 1, "{name}: loss is not scalar");
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(vars[which]).expect("missing gradient");

    let numeric = numeric_grad(
        |v| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| tape.param(if i == which { v.clone() } else { t.clone() }))
                .collect();
            let loss = build(&mut tape, &vars);
            Ok(tape.value(loss).data()[0])
        },
        &inputs[which],
        1e-5,
    )
    .unwrap();

    let err = max_rel_err(analytic, &numeric);
    assert!(err < tol, "{name} input {which}: rel err {err:.3e} >= {tol:.0e}");
}
