//! Overfit a small rectifier on a handful of samples, then rectify one of
//! them and report flow error and image recovery. Also demonstrates the
//! ground-truth short-circuit: resampling through the stored gt flow
//! recovers the flat page up to interpolation, which bounds what a perfect
//! model could achieve.
//!
//! Usage: rectify_roundtrip [out_dir] [n_samples] [epochs]

use dewarp::config::RunConfig;
use dewarp::dataset::corpus_specs;
use dewarp::io::{write_flo, write_ppm};
use dewarp::metrics::{ld_epe, ms_ssim};
use dewarp::optim::Adam;
use dewarp::rectifier::{background_exclude, FlowField, RectModel};
use dewarp::synth::{gen_sample, round_trip_error, SyntheticSample};
use dewarp::tensor::Tensor;
use dewarp::train::{finetune_run, LossTrace};
use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("rectify_roundtrip_out"));
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    std::fs::create_dir_all(&out).unwrap();

    let mut cfg = RunConfig::desk();
    cfg.dim = 64;
    cfg.k1 = 2;
    cfg.k2 = 1;
    cfg.epochs = epochs;
    cfg.batch = 4;
    cfg.seed = 17;

    let samples: Vec<SyntheticSample<f32>> = (0..n)
        .map(|i| {
            let (page, warp, bg) = corpus_specs(cfg.h, cfg.w, 77, i);
            gen_sample::<f32>(&page, &warp, bg).unwrap()
        })
        .collect();
    let pairs: Vec<(Tensor<f32>, FlowField<f32>)> = samples
        .iter()
        .map(|s| {
            let excluded = background_exclude(&s.distorted, &s.mask).unwrap();
            (excluded, FlowField::new(s.gt_flow.disp.clone()).unwrap())
        })
        .collect();

    // The bound a perfect predictor faces: the stored flow itself only
    // recovers the page up to bilinear interpolation loss.
    let s0 = &samples[0];
    let gt_err = round_trip_error(&s0.clean, &s0.distorted, &s0.mask, &s0.gt_flow).unwrap();
    println!("gt-flow round trip error on sample 0: {gt_err:.4}");

    let mut model = RectModel::<f32>::init(cfg.dims(), cfg.seed).unwrap();
    let mut opt = Adam::new();
    let mut trace = LossTrace::default();
    let t0 = std::time::Instant::now();
    finetune_run(&cfg, &pairs, &mut model, &mut opt, 0..cfg.epochs, false, &mut trace).unwrap();
    println!(
        "flow loss {:.4} -> {:.4} over {} steps in {:.0} s",
        trace.first().unwrap(),
        trace.last().unwrap(),
        trace.rows.len(),
        t0.elapsed().as_secs_f64()
    );

    let (rectified, flow) = model.rectify(&s0.distorted, &s0.mask).unwrap();
    let gt_flow = FlowField::new(s0.gt_flow.disp.clone()).unwrap();
    let epe = ld_epe(&flow, &gt_flow, &s0.mask).unwrap();
    let fidelity = ms_ssim(&rectified, &s0.clean).unwrap();
    println!("predicted flow epe vs gt: {epe:.3} px");
    println!("ms_ssim(rectified, clean page): {:.4}", fidelity.score);

    write_ppm(&out.join("distorted.ppm"), &s0.distorted).unwrap();
    write_ppm(&out.join("rectified.ppm"), &rectified).unwrap();
    write_ppm(&out.join("clean.ppm"), &s0.clean).unwrap();
    write_flo(&out.join("predicted.flo"), &flow).unwrap();
    println!("wrote distorted/rectified/clean panels under {}", out.display());
}
