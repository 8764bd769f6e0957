//! A complete but small pretraining run: generate a corpus in memory,
//! train the masked reconstruction model for a few epochs, print the loss
//! trajectory, and finish with a side-by-side triptych (masked input,
//! reconstruction composite, target) written as PPM.
//!
//! Usage: pretrain_small [out_dir] [n_samples] [epochs]
//! Defaults are sized to finish in about a minute.

use dewarp::config::RunConfig;
use dewarp::dataset::corpus_specs;
use dewarp::mae::{reconstruct_demo, MaeModel};
use dewarp::optim::Adam;
use dewarp::patch::make_mask_plan;
use dewarp::rectifier::background_exclude;
use dewarp::synth::gen_sample;
use dewarp::tensor::Tensor;
use dewarp::train::{pretrain_run, LossTrace};
use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("pretrain_small_out"));
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(24);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    std::fs::create_dir_all(&out).unwrap();

    let mut cfg = RunConfig::desk();
    cfg.dim = 64;
    cfg.k1 = 2;
    cfg.k2 = 1;
    cfg.epochs = epochs;
    cfg.seed = 5;

    println!("generating {n} samples at {}x{}", cfg.h, cfg.w);
    let images: Vec<Tensor<f32>> = (0..n)
        .map(|i| {
            let (page, warp, bg) = corpus_specs(cfg.h, cfg.w, cfg.seed, i);
            let s = gen_sample::<f32>(&page, &warp, bg).unwrap();
            background_exclude(&s.distorted, &s.mask).unwrap()
        })
        .collect();

    let mut model = MaeModel::<f32>::init(cfg.dims(), cfg.seed).unwrap();
    let mut opt = Adam::new();
    let mut trace = LossTrace::default();
    let t0 = std::time::Instant::now();
    pretrain_run(&cfg, &images, &mut model, &mut opt, 0..cfg.epochs, &mut trace).unwrap();
    for e in 0..cfg.epochs {
        let rows: Vec<f64> = trace
            .rows
            .iter()
            .filter(|(ep, _, _)| *ep == e)
            .map(|(_, _, l)| *l)
            .collect();
        let mean = rows.iter().sum::<f64>() / rows.len() as f64;
        println!("epoch {e}: mean loss {mean:.5} over {} steps", rows.len());
    }
    println!("trained in {:.0} s", t0.elapsed().as_secs_f64());

    // Show what the model reconstructs on an image it never saw.
    let (page, warp, bg) = corpus_specs(cfg.h, cfg.w, cfg.seed + 1, 0);
    let unseen = gen_sample::<f32>(&page, &warp, bg).unwrap();
    let excluded = background_exclude(&unseen.distorted, &unseen.mask).unwrap();
    let plan = make_mask_plan(cfg.dims().n_patches(), cfg.mask_ratio, 123).unwrap();
    let demo = reconstruct_demo(&model, &excluded, &plan).unwrap();

    let panels = [
        ("masked", &demo.masked),
        ("composite", &demo.composite),
        ("target", &demo.target),
    ];
    for (name, img) in panels {
        dewarp::io::write_ppm(&out.join(format!("{name}.ppm")), img).unwrap();
    }
    println!("wrote masked/composite/target panels under {}", out.display());
}
