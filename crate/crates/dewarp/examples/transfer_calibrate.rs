//! One-off mirror of the acceptance transfer study for calibration.

use dewarp::config::RunConfig;
use dewarp::experiment::{run_transfer, TransferSpec};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let grab = |flag: &str, default: usize| -> usize {
        args.iter()
            .position(|a| a == flag)
            .and_then(|i| args.get(i + 1))
            .and_then(|v| v.parse().ok())
            .unwrap_or(default)
    };
    let mut pretrain = RunConfig::desk();
    pretrain.epochs = grab("--pretrain-epochs", 6);
    pretrain.max_lr = 1e-3;
    let mut finetune = RunConfig::desk();
    finetune.epochs = grab("--finetune-epochs", 2);
    finetune.max_lr = 1e-3;
    let spec = TransferSpec {
        pretrain,
        finetune,
        corpus_seed: 707,
        train_count: 1000,
        heldout_count: 200,
        seeds: vec![1, 2, 3],
        frozen_probe: true,
        ratio_probes: vec![],
    };
    spec.validate().unwrap();
    let t0 = std::time::Instant::now();
    let mut log = std::io::stderr();
    let outcome = run_transfer(&spec, &mut log).unwrap();
    println!("{}", outcome.report());
    println!(
        "scratch median {:.4}, pretrained median {:.4}, improvement {:.2}%, frozen {:?}",
        outcome.scratch_median(),
        outcome.pretrained_median(),
        100.0 * outcome.improvement(),
        outcome.frozen
    );
    println!("total {:.0} s", t0.elapsed().as_secs_f64());
}
