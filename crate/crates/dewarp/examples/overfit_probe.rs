//! Calibration probe for the two overfit smokes: 8 fixed desk-preset
//! samples, 300 steps, batch 8. Prints the loss trajectory so the drop
//! fractions backing the smoke thresholds can be read off directly.
//!
//! Usage: overfit_probe [mae|rect] [steps] [max_lr]

use dewarp::config::RunConfig;
use dewarp::dataset::corpus_specs;
use dewarp::mae::MaeModel;
use dewarp::optim::Adam;
use dewarp::rectifier::{background_exclude, FlowField, RectModel};
use dewarp::synth::gen_sample;
use dewarp::tensor::Tensor;
use dewarp::train::{finetune_run, pretrain_run, LossTrace};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("mae");
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let mut cfg = RunConfig::desk();
    if let Some(lr) = args.get(3).and_then(|s| s.parse().ok()) {
        cfg.max_lr = lr;
    }
    if args.iter().any(|a| a == "--toy") {
        cfg.dim = 64;
        cfg.k1 = 2;
        cfg.k2 = 1;
    }
    let corpus_seed: u64 = args
        .iter()
        .position(|a| a == "--corpus-seed")
        .and_then(|i| args.get(i + 1))
        .and_then(|v| v.parse().ok())
        .unwrap_or(11);
    if let Some(wf) = args
        .iter()
        .position(|a| a == "--warmup")
        .and_then(|i| args.get(i + 1))
        .and_then(|v| v.parse().ok())
    {
        cfg.warmup_frac = wf;
    }
    cfg.epochs = steps; // batch == sample count, so one step per epoch
    cfg.seed = 1;

    let samples: Vec<_> = (0..cfg.batch)
        .map(|i| {
            let (page, warp, bg) = corpus_specs(cfg.h, cfg.w, corpus_seed, i);
            gen_sample::<f32>(&page, &warp, bg).unwrap()
        })
        .collect();
    let images: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| background_exclude(&s.distorted, &s.mask).unwrap())
        .collect();

    let mut trace = LossTrace::default();
    let t0 = std::time::Instant::now();
    match which {
        "mae" => {
            let mut model = MaeModel::<f32>::init(cfg.dims(), cfg.seed).unwrap();
            let mut opt = Adam::new();
            pretrain_run(&cfg, &images, &mut model, &mut opt, 0..cfg.epochs, &mut trace).unwrap();
        }
        "rect" => {
            let pairs: Vec<(Tensor<f32>, FlowField<f32>)> = images
                .iter()
                .zip(&samples)
                .map(|(img, s)| (img.clone(), FlowField::new(s.gt_flow.disp.clone()).unwrap()))
                .collect();
            let mut model = RectModel::<f32>::init(cfg.dims(), cfg.seed).unwrap();
            let mut opt = Adam::new();
            finetune_run(&cfg, &pairs, &mut model, &mut opt, 0..cfg.epochs, false, &mut trace)
                .unwrap();
        }
        other => panic!("unknown probe {other:?}"),
    }
    let first = trace.first().unwrap();
    for (e, _, l) in trace.rows.iter().step_by(25) {
        println!("step {e:4}  loss {l:.6}  drop {:.1}%", 100.0 * (1.0 - l / first));
    }
    let last = trace.last().unwrap();
    println!(
        "final: first {first:.6} last {last:.6} drop {:.1}% in {:.0} s",
        100.0 * (1.0 - last / first),
        t0.elapsed().as_secs_f64()
    );
}
