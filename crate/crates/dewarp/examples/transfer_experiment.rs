//! Does reconstruction pretraining help the rectifier? This runs the
//! transfer study end to end: pretrain an encoder, fine-tune rectifiers
//! from that encoder and from scratch across several seeds, and compare
//! median held-out flow error.
//!
//! The defaults are a miniature (a couple of minutes). The full-scale
//! numbers come from the same harness via flags:
//!
//!   transfer_experiment --train 1000 --heldout 200 --seeds 3 \
//!       --pretrain-epochs 6 --finetune-epochs 2 --frozen-probe
//!
//! which takes roughly half an hour of CPU.

use dewarp::config::RunConfig;
use dewarp::experiment::{run_transfer, TransferSpec};

fn flag(args: &[String], name: &str) -> Option<usize> {
    args.iter().position(|a| a == name).and_then(|i| args.get(i + 1)).and_then(|v| v.parse().ok())
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let train = flag(&args, "--train").unwrap_or(40);
    let heldout = flag(&args, "--heldout").unwrap_or(10);
    let n_seeds = flag(&args, "--seeds").unwrap_or(2);
    let pre_epochs = flag(&args, "--pretrain-epochs").unwrap_or(2);
    let fin_epochs = flag(&args, "--finetune-epochs").unwrap_or(1);
    let frozen = args.iter().any(|a| a == "--frozen-probe");

    let mut pretrain = RunConfig::desk();
    pretrain.dim = 64;
    pretrain.k1 = 2;
    pretrain.k2 = 1;
    pretrain.epochs = pre_epochs;
    let mut finetune = pretrain.clone();
    finetune.epochs = fin_epochs;

    let spec = TransferSpec {
        pretrain,
        finetune,
        corpus_seed: 23,
        train_count: train,
        heldout_count: heldout,
        seeds: (1..=n_seeds as u64).collect(),
        frozen_probe: frozen,
        ratio_probes: vec![],
    };
    spec.validate().unwrap();

    let t0 = std::time::Instant::now();
    let mut log = std::io::stderr();
    let outcome = run_transfer(&spec, &mut log).unwrap();

    println!("{}", outcome.report());
    println!(
        "scratch median {:.3}, pretrained median {:.3}, improvement {:.1}%",
        outcome.scratch_median(),
        outcome.pretrained_median(),
        100.0 * outcome.improvement()
    );
    if let Some(f) = outcome.frozen {
        println!("frozen-encoder probe: {f:.3}");
    }
    println!("total {:.0} s", t0.elapsed().as_secs_f64());
}
