//! Rough single-core throughput probe for the matrix kernels.

use dewarp::tensor::{gemm_nn, gemm_nt, gemm_tn};
use std::time::Instant;

fn bench(name: &str, f: impl Fn() -> Vec<f32>, flops_per_call: f64) {
    // warmup
    let mut sink = 0.0f32;
    sink += f()[0];
    let t0 = Instant::now();
    let mut calls = 0u32;
    while t0.elapsed().as_secs_f64() < 1.0 {
        sink += f()[0];
        calls += 1;
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{name}: {:.2} GFLOP/s ({calls} calls, sink {sink:e})",
        flops_per_call * calls as f64 / dt / 1e9
    );
}

fn main() {
    for &(m, k, n) in &[
        (144usize, 128usize, 512usize),
        (144, 512, 128),
        (144, 128, 384),
        (144, 144, 128),
        (36, 128, 512),
        (144, 128, 576),
    ] {
        let a = vec![0.5f32; m * k];
        let b = vec![0.25f32; k * n];
        let flops = 2.0 * (m * k * n) as f64;
        bench(
            &format!("gemm_nn {m}x{k}x{n}"),
            || gemm_nn(&a, &b, m, k, n),
            flops,
        );
    }
    let a = vec![0.5f32; 144 * 128];
    let b = vec![0.25f32; 144 * 128];
    bench(
        "gemm_nt 144x128x144",
        || gemm_nt(&a, &b, 144, 128, 144),
        2.0 * (144 * 128 * 144) as f64,
    );
    bench(
        "gemm_tn 128x144x128 (kxm a)",
        || gemm_tn(&a, &b, 128, 144, 128),
        2.0 * (128 * 144 * 128) as f64,
    );
}
