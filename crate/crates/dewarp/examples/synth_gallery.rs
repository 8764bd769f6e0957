//! Render a small gallery of synthetic training samples so the generator's
//! output can be eyeballed: for each seed, the flat page, its warped copy
//! on a cluttered background, the segmentation mask, and the
//! background-excluded crop the models actually consume. Ground-truth flow
//! goes out as .flo next to the images.
//!
//! Usage: synth_gallery [out_dir] [count]

use dewarp::dataset::corpus_specs;
use dewarp::io::{write_flo, write_ppm};
use dewarp::rectifier::{background_exclude, FlowField};
use dewarp::synth::{extract_line_signature, gen_sample, round_trip_error};
use dewarp::tape::Tape;
use dewarp::tensor::Tensor;
use std::path::PathBuf;

/// Resample `image` through `flow` the same way the rectifier does.
fn pull_through(image: &Tensor<f32>, flow: &FlowField<f32>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let src = tape.constant(image.clone());
    let fl = tape.constant(flow.disp.clone());
    let warped = tape.bilinear_warp(src, fl).unwrap();
    tape.value(warped).clone()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("gallery"));
    let count: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    std::fs::create_dir_all(&out).unwrap();

    for i in 0..count {
        let (page, warp, bg) = corpus_specs(96, 96, 31, i);
        let s = gen_sample::<f32>(&page, &warp, bg).unwrap();
        let excluded = background_exclude(&s.distorted, &s.mask).unwrap();

        let stem = format!("sample_{i:02}");
        write_ppm(&out.join(format!("{stem}.clean.ppm")), &s.clean).unwrap();
        write_ppm(&out.join(format!("{stem}.distorted.ppm")), &s.distorted).unwrap();
        write_ppm(&out.join(format!("{stem}.mask.ppm")), &s.mask).unwrap();
        write_ppm(&out.join(format!("{stem}.excluded.ppm")), &excluded).unwrap();
        write_flo(&out.join(format!("{stem}.flow.flo")), &s.gt_flow).unwrap();

        // The stored flow really does undo the warp: resample the distorted
        // image through it and measure what's left against the clean page.
        let restored = pull_through(&s.distorted, &s.gt_flow);
        write_ppm(&out.join(format!("{stem}.restored.ppm")), &restored).unwrap();
        let err = round_trip_error(&s.clean, &s.distorted, &s.mask, &s.gt_flow).unwrap();

        let sig = extract_line_signature(&s.clean, &page).unwrap();
        println!(
            "{stem}: round-trip err {err:.4}, {} text lines, signature {}",
            sig.len(),
            if sig.len() > 12 { format!("{}..", &sig[..12]) } else { sig.clone() }
        );
    }

    // A flow field is just displacements; build one by hand to show the
    // convention (row 0 = dy, row 1 = dx offsets in pixels, sampled at the
    // output grid).
    let h = 96;
    let w = 96;
    let mut disp = vec![0f32; h * w * 2];
    for r in 0..h {
        for c in 0..w {
            disp[(r * w + c) * 2] = 6.0 * (c as f32 / w as f32 * std::f32::consts::TAU).sin();
        }
    }
    let swirl = FlowField::new(Tensor::new(vec![h, w, 2], disp).unwrap()).unwrap();
    write_flo(&out.join("handmade_swirl.flo"), &swirl).unwrap();

    println!("wrote gallery under {}", out.display());
}
