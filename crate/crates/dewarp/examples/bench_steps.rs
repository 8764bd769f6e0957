//! Wall-clock probe for the pipeline's hot paths at the desk preset:
//! sample generation, one pretraining step, one fine-tune step, one
//! rectification. Budget numbers in the docs come from here.

use std::time::Instant;

use dewarp::config::RunConfig;
use dewarp::dataset::corpus_specs;
use dewarp::mae::{MaeModel, PretrainBatch};
use dewarp::optim::Adam;
use dewarp::rectifier::{background_exclude, FinetuneBatch, FlowField, RectModel};
use dewarp::synth::gen_sample;
use dewarp::tensor::Tensor;

fn main() {
    let cfg = RunConfig::desk();
    let dims = cfg.dims();

    let t0 = Instant::now();
    let samples: Vec<_> = (0..cfg.batch)
        .map(|i| {
            let (page, warp, bg) = corpus_specs(cfg.h, cfg.w, 1, i);
            gen_sample::<f32>(&page, &warp, bg).unwrap()
        })
        .collect();
    println!("gen_sample: {:.1} ms each", t0.elapsed().as_secs_f64() * 1e3 / cfg.batch as f64);

    let images: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| background_exclude(&s.distorted, &s.mask).unwrap())
        .collect();

    let mut mae = MaeModel::<f32>::init(dims, 1).unwrap();
    let mut opt = Adam::new();
    let batch =
        PretrainBatch::with_plans_from_seed(images.clone(), dims.n_patches(), cfg.mask_ratio, 7)
            .unwrap();
    dewarp::mae::pretrain_step(&mut mae, &batch, &mut opt, 1e-4, 0).unwrap();
    let t0 = Instant::now();
    let reps = 3;
    for step in 1..=reps {
        dewarp::mae::pretrain_step(&mut mae, &batch, &mut opt, 1e-4, step).unwrap();
    }
    println!(
        "pretrain_step (batch {}): {:.2} s",
        cfg.batch,
        t0.elapsed().as_secs_f64() / reps as f64
    );

    let mut rect = RectModel::<f32>::init(dims, 1).unwrap();
    let mut opt = Adam::new();
    let pairs = FinetuneBatch::new(
        images.clone(),
        samples.iter().map(|s| FlowField::new(s.gt_flow.disp.clone()).unwrap()).collect(),
    )
    .unwrap();
    dewarp::rectifier::finetune_step(&mut rect, &pairs, &mut opt, 1e-4, false, 0).unwrap();
    let t0 = Instant::now();
    for step in 1..=reps {
        dewarp::rectifier::finetune_step(&mut rect, &pairs, &mut opt, 1e-4, false, step).unwrap();
    }
    println!(
        "finetune_step (batch {}): {:.2} s",
        cfg.batch,
        t0.elapsed().as_secs_f64() / reps as f64
    );

    let t0 = Instant::now();
    for s in &samples {
        rect.rectify(&s.distorted, &s.mask).unwrap();
    }
    println!("rectify: {:.1} ms each", t0.elapsed().as_secs_f64() * 1e3 / samples.len() as f64);
}
