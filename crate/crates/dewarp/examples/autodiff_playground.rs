//! Tour of the reverse-mode tape: build a small graph by hand, pull
//! gradients back through it, and cross-check every one against central
//! differences. Run with `cargo run --example autodiff_playground`.

use dewarp::gradcheck::{max_rel_err, numeric_grad};
use dewarp::tape::Tape;
use dewarp::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // A two-layer block with a residual connection and a masked loss:
    // the same shapes the encoder uses, shrunk to stay readable.
    let x0 = randn(&mut rng, &[6, 8]);
    let w0 = randn(&mut rng, &[8, 8]);
    let b0 = randn(&mut rng, &[8]);
    let g0 = randn(&mut rng, &[8]);
    let z0 = randn(&mut rng, &[8]);
    let target = randn(&mut rng, &[6, 8]);
    let kept = Rc::new(vec![0usize, 2, 5]);

    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let w = tape.param(w0.clone());
    let b = tape.param(b0.clone());
    let gamma = tape.param(g0.clone());
    let beta = tape.param(z0.clone());
    let t = tape.constant(target.clone());

    let normed = tape.layer_norm(x, gamma, beta, 1e-6).unwrap();
    let lin = tape.linear(normed, w, b).unwrap();
    let act = tape.gelu(lin);
    let res = tape.add(act, x).unwrap();
    let loss = tape.masked_mse(res, t, kept.clone()).unwrap();

    println!("graph of {} nodes, loss {:.6}", tape.len(), tape.value(loss).data()[0]);

    let grads = tape.backward(loss).unwrap();

    // Re-run the whole forward as a closure of each input in turn and
    // compare the tape's gradient against central differences.
    let inputs: [(&str, &Tensor<f64>, usize); 5] = [
        ("x", &x0, 0),
        ("w", &w0, 1),
        ("b", &b0, 2),
        ("gamma", &g0, 3),
        ("beta", &z0, 4),
    ];
    for (name, value, slot) in inputs {
        let kept = kept.clone();
        let f = |v: &Tensor<f64>| {
            let mut tape = Tape::new();
            let mut vars = [
                tape.param(x0.clone()),
                tape.param(w0.clone()),
                tape.param(b0.clone()),
                tape.param(g0.clone()),
                tape.param(z0.clone()),
            ];
            vars[slot] = tape.param(v.clone());
            let [x, w, b, gamma, beta] = vars;
            let t = tape.constant(target.clone());
            let normed = tape.layer_norm(x, gamma, beta, 1e-6)?;
            let lin = tape.linear(normed, w, b)?;
            let act = tape.gelu(lin);
            let res = tape.add(act, x)?;
            let loss = tape.masked_mse(res, t, kept.clone())?;
            Ok(tape.value(loss).data()[0])
        };
        let numeric = numeric_grad(f, value, 1e-5).unwrap();
        let var = [x, w, b, gamma, beta][slot];
        let analytic = grads.get(var).unwrap();
        let err = max_rel_err(analytic, &numeric);
        println!("d loss / d {name:<5}  max rel err {err:.2e}");
        assert!(err < 1e-6, "{name} gradient disagrees with finite differences");
    }

    // The warp operator differentiates through both its inputs: the image
    // being resampled and the flow that says where to look.
    let img = randn(&mut rng, &[5, 7, 3]);
    let flow = randn(&mut rng, &[5, 7, 2]);
    let mut tape = Tape::new();
    let i = tape.param(img.clone());
    let fl = tape.param(flow.clone());
    let warped = tape.bilinear_warp(i, fl).unwrap();
    let loss = tape.mean_all(warped);
    let grads = tape.backward(loss).unwrap();
    let nf = numeric_grad(
        |v| {
            let mut tape = Tape::new();
            let i = tape.constant(img.clone());
            let fl = tape.param(v.clone());
            let warped = tape.bilinear_warp(i, fl)?;
            let loss = tape.mean_all(warped);
            Ok(tape.value(loss).data()[0])
        },
        &flow,
        1e-5,
    )
    .unwrap();
    let err = max_rel_err(grads.get(fl).unwrap(), &nf);
    println!("d warp / d flow   max rel err {err:.2e}");
    assert!(err < 1e-5);

    println!("all analytic gradients confirmed");
}
