//! Walk through the three evaluation metrics on controlled inputs where
//! the right answer is known: multi-scale SSIM under growing noise, edit
//! distance with its operation counts, character error rate, and masked
//! flow end-point error.

use dewarp::metrics::{cer, edit_distance, ld_epe, ms_ssim, MS_SSIM_WEIGHTS};
use dewarp::rectifier::FlowField;
use dewarp::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // A structured grayscale test card: smooth ramp plus stripes, enough
    // texture that SSIM has something to measure at every scale.
    let h = 128;
    let w = 128;
    let card: Vec<f64> = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let ramp = 0.3 + 0.4 * (r as f64 / h as f64);
            let stripe = if (c / 8) % 2 == 0 { 0.15 } else { -0.15 };
            ramp + stripe
        })
        .collect();
    let a = Tensor::new(vec![h, w, 1], card.clone()).unwrap();

    let same = ms_ssim(&a, &a).unwrap();
    println!("ms_ssim(x, x) = {:.9} over {} scales", same.score, same.scales_used);
    println!("scale weights: {MS_SSIM_WEIGHTS:?}");

    println!("\nsigma    ms_ssim");
    for sigma in [0.01, 0.03, 0.06, 0.1, 0.2] {
        let noisy: Vec<f64> = card
            .iter()
            .map(|&v| (v + rng.gen_range(-1.0..1.0) * sigma).clamp(0.0, 1.0))
            .collect();
        let b = Tensor::new(vec![h, w, 1], noisy).unwrap();
        let m = ms_ssim(&a, &b).unwrap();
        println!("{sigma:.2}     {:.6}", m.score);
    }

    // Edit distance decomposes into the three operation kinds; CER divides
    // the total by the reference length.
    println!();
    for (pred, target) in [
        ("kitten", "sitting"),
        ("abcdef", "abcdef"),
        ("", "lines"),
        ("acbd", "abcd"),
    ] {
        let ed = edit_distance(pred, target);
        let rate = cer(&ed, target.chars().count()).unwrap();
        println!(
            "ed({pred:?}, {target:?}) = {} (sub {}, ins {}, del {}), cer {:.4}",
            ed.total, ed.substitutions, ed.insertions, ed.deletions, rate
        );
    }

    // Flow end-point error, measured only where the mask says the page is.
    let hw = 16;
    let zeros = FlowField::new(Tensor::new(vec![hw, hw, 2], vec![0f64; hw * hw * 2]).unwrap()).unwrap();
    let mut disp = vec![0f64; hw * hw * 2];
    for px in disp.iter_mut().step_by(2) {
        *px = 3.0; // dy = 3 everywhere, dx = 0
    }
    let shifted = FlowField::new(Tensor::new(vec![hw, hw, 2], disp).unwrap()).unwrap();
    let full = Tensor::new(vec![hw, hw, 1], vec![1f64; hw * hw]).unwrap();
    let mut half_data = vec![0f64; hw * hw];
    for r in 0..hw / 2 {
        for c in 0..hw {
            half_data[r * hw + c] = 1.0;
        }
    }
    let half = Tensor::new(vec![hw, hw, 1], half_data).unwrap();
    println!();
    println!("ld_epe(zero vs dy=3, full mask) = {:.4}", ld_epe(&zeros, &shifted, &full).unwrap());
    println!("ld_epe(zero vs dy=3, half mask) = {:.4}", ld_epe(&zeros, &shifted, &half).unwrap());
    println!("ld_epe(f, f)                    = {:.4}", ld_epe(&shifted, &shifted, &full).unwrap());
}
