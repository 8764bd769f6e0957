//! Evaluation metrics: multi-scale structural similarity, Levenshtein edit
//! distance with character error rate, and mean end-point error between
//! flow fields.

use crate::error::{Error, Result};
use crate::rectifier::FlowField;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// MS-SSIM score plus the number of scales actually used; fewer than five
/// signals the inputs were too small for the full pyramid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsSsim {
    pub score: f64,
    pub scales_used: usize,
}

fn luma<S: Scalar>(image: &Tensor<S>) -> Result<(Vec<f64>, usize, usize)> {
    match image.shape() {
        [h, w, 3] => {
            let mut out = vec![0.0; h * w];
            for i in 0..h * w {
                let r = image.data()[i * 3].as_f64();
                let g = image.data()[i * 3 + 1].as_f64();
                let b = image.data()[i * 3 + 2].as_f64();
                out[i] = 0.299 * r + 0.587 * g + 0.114 * b;
            }
            Ok((out, *h, *w))
        }
        [h, w, 1] => Ok((image.data().iter().map(|v| v.as_f64()).collect(), *h, *w)),
        s => Err(Error::Geometry(format!("expected [H,W,3] or [H,W,1] image, got {s:?}"))),
    }
}

fn gaussian_kernel() -> [f64; 11] {
    let sigma = 1.5;
    let mut k = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable 11x11 Gaussian blur with clamp-to-edge borders.
fn blur(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let xx = (x as i64 + i as i64 - 5).clamp(0, w as i64 - 1) as usize;
                acc += kv * img[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let yy = (y as i64 + i as i64 - 5).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn downsample2(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (nh, nw) = (h / 2, w / 2);
    let mut out = vec![0.0; nh * nw];
    for y in 0..nh {
        for x in 0..nw {
            out[y * nw + x] = 0.25
                * (img[2 * y * w + 2 * x]
                    + img[2 * y * w + 2 * x + 1]
                    + img[(2 * y + 1) * w + 2 * x]
                    + img[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, nh, nw)
}

/// Mean SSIM and mean contrast-structure term over one scale.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let mu_a = blur(a, h, w);
    let mu_b = blur(b, h, w);
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let aa = blur(&sq(a), h, w);
    let bb = blur(&sq(b), h, w);
    let ab = blur(&prod, h, w);
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..h * w {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = (aa[i] - ma * ma).max(0.0);
        let vb = (bb[i] - mb * mb).max(0.0);
        let cov = ab[i] - ma * mb;
        let cs = (2.0 * cov + C2) / (va + vb + C2);
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        ssim_sum += l * cs;
        cs_sum += cs;
    }
    let n = (h * w) as f64;
    (ssim_sum / n, cs_sum / n)
}

/// Multi-scale structural similarity on [0,1]-range images. Color inputs
/// are converted to luma. Small images use fewer scales (each scale wants
/// at least 11 pixels per side after halving) and report how many.
pub fn ms_ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<MsSsim> {
    if a.shape() != b.shape() {
        return Err(Error::Geometry(format!(
            "image extents differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (mut xa, mut h, mut w) = luma(a)?;
    let (mut xb, _, _) = luma(b)?;
    let mut scales = 0usize;
    let mut sizes = (h, w);
    while scales < MS_SSIM_WEIGHTS.len() {
        scales += 1;
        if sizes.0 / 2 < 11 || sizes.1 / 2 < 11 {
            break;
        }
        sizes = (sizes.0 / 2, sizes.1 / 2);
    }
    // renormalize the standard weights over the scales we can afford
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let mut score = 1.0f64;
    for (level, &weight) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&xa, &xb, h, w);
        let term = if level + 1 == scales { ssim } else { cs };
        // terms can be marginally negative; clamp before the power
        score *= term.max(1e-12).powf(weight / wsum);
        if level + 1 < scales {
            let (na, nh, nw) = downsample2(&xa, h, w);
            let (nb, _, _) = downsample2(&xb, h, w);
            xa = na;
            xb = nb;
            h = nh;
            w = nw;
        }
    }
    Ok(MsSsim { score, scales_used: scales })
}

/// Levenshtein distance with its witness decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditDistance {
    pub total: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub substitutions: usize,
}

/// Unit-cost Levenshtein DP from `pred` to `target`: deletions remove
/// pred characters, insertions add target characters.
pub fn edit_distance(pred: &str, target: &str) -> EditDistance {
    let a: Vec<char> = pred.chars().collect();
    let b: Vec<char> = target.chars().collect();
    let (n, m) = (a.len(), b.len());
    let mut dist = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dist[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dist[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            dist[idx(i, j)] = (dist[idx(i - 1, j)] + 1)
                .min(dist[idx(i, j - 1)] + 1)
                .min(dist[idx(i - 1, j - 1)] + sub_cost);
        }
    }
    // walk one optimal path back to decompose the total
    let (mut i, mut j) = (n, m);
    let (mut d, mut ins, mut s) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && dist[idx(i, j)] == dist[idx(i - 1, j - 1)] && a[i - 1] == b[j - 1] {
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && dist[idx(i, j)] == dist[idx(i - 1, j - 1)] + 1 {
            s += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && dist[idx(i, j)] == dist[idx(i - 1, j)] + 1 {
            d += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    EditDistance { total: dist[idx(n, m)], deletions: d, insertions: ins, substitutions: s }
}

/// Character error rate `(d+i+s) / target_len`.
pub fn cer(ed: &EditDistance, target_len: usize) -> Result<f64> {
    if target_len == 0 {
        return Err(Error::Contract("character error rate needs a non-empty target".into()));
    }
    Ok((ed.deletions + ed.insertions + ed.substitutions) as f64 / target_len as f64)
}

/// Mean Euclidean distance between two displacement fields over the pixels
/// where `mask` is positive. Pass an all-ones mask for a full-frame mean.
pub fn ld_epe<S: Scalar>(
    pred: &FlowField<S>,
    gt: &FlowField<S>,
    mask: &Tensor<S>,
) -> Result<f64> {
    if pred.disp.shape() != gt.disp.shape() {
        return Err(Error::Geometry(format!(
            "flow geometries differ: {:?} vs {:?}",
            pred.disp.shape(),
            gt.disp.shape()
        )));
    }
    let (h, w) = (pred.h(), pred.w());
    if mask.shape() != [h, w, 1] {
        return Err(Error::Geometry(format!(
            "mask shape {:?} does not match flow [{h},{w}]",
            mask.shape()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..h * w {
        if mask.data()[i].as_f64() <= 0.0 {
            continue;
        }
        let du = pred.disp.data()[i * 2].as_f64() - gt.disp.data()[i * 2].as_f64();
        let dv = pred.disp.data()[i * 2 + 1].as_f64() - gt.disp.data()[i * 2 + 1].as_f64();
        sum += (du * du + dv * dv).sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract("mask selects no pixels".into()));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn page_image(seed: u64) -> Tensor<f64> {
        let spec = crate::synth::PageSpec::desk(176, 176, seed);
        crate::synth::gen_page(&spec).unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let img = page_image(0);
        let r = ms_ssim(&img, &img).unwrap();
        assert!((r.score - 1.0).abs() < 1e-6, "score {}", r.score);
        assert_eq!(r.scales_used, 5);
    }

    #[test]
    fn symmetry() {
        let a = page_image(1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = Tensor::from_fn(a.shape(), |i| {
            (a.data()[i] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)
        });
        let ab = ms_ssim(&a, &b).unwrap().score;
        let ba = ms_ssim(&b, &a).unwrap().score;
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn noise_sweep_strictly_degrades() {
        let img = page_image(2);
        let mut scores = Vec::new();
        for (i, sigma) in [0.02, 0.05, 0.1].iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            // crude gaussian via sum of uniforms; only monotonicity matters
            let noisy = Tensor::from_fn(img.shape(), |j| {
                let g: f64 = (0..12).map(|_| rng.gen_range(0.0..1.0)).sum::<f64>() - 6.0;
                (img.data()[j] + sigma * g).clamp(0.0, 1.0)
            });
            scores.push(ms_ssim(&img, &noisy).unwrap().score);
        }
        assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
        assert!(scores.iter().all(|&s| s < 1.0 && s > 0.0));
    }

    #[test]
    fn small_images_reduce_scales() {
        let img: Tensor<f64> = Tensor::from_fn(&[24, 24, 1], |i| (i % 7) as f64 / 7.0);
        let r = ms_ssim(&img, &img).unwrap();
        assert!(r.scales_used < 5);
        assert!((r.score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn extent_mismatch_rejected() {
        let a: Tensor<f64> = Tensor::zeros(&[32, 32, 3]);
        let b: Tensor<f64> = Tensor::zeros(&[32, 48, 3]);
        assert!(matches!(ms_ssim(&a, &b), Err(Error::Geometry(_))));
    }

    #[test]
    fn score_below_one_for_different_images() {
        let a = page_image(3);
        let b: Tensor<f64> = Tensor::from_fn(a.shape(), |i| 1.0 - a.data()[i]);
        assert!(ms_ssim(&a, &b).unwrap().score < 0.99);
    }

    #[test]
    fn edit_distance_oracles() {
        let e = edit_distance("", "abc");
        assert_eq!((e.total, e.insertions, e.deletions, e.substitutions), (3, 3, 0, 0));
        let same = edit_distance("warp", "warp");
        assert_eq!(same.total, 0);
        let k = edit_distance("kitten", "sitting");
        assert_eq!(k.total, 3);
        assert_eq!(k.deletions + k.insertions + k.substitutions, 3);
    }

    #[test]
    fn cer_oracles() {
        let e = EditDistance { total: 3, deletions: 1, insertions: 1, substitutions: 1 };
        assert_relative_eq!(cer(&e, 7).unwrap(), 3.0 / 7.0);
        let zero = EditDistance { total: 0, deletions: 0, insertions: 0, substitutions: 0 };
        assert_eq!(cer(&zero, 5).unwrap(), 0.0);
        let long = edit_distance("aaaa", "a");
        assert_relative_eq!(cer(&long, 1).unwrap(), 3.0);
        assert!(cer(&e, 0).is_err());
    }

    /// Reference implementation without the witness walk, recursive
    /// definition memoized directly.
    fn oracle_distance(a: &[u8], b: &[u8]) -> usize {
        let mut memo = vec![usize::MAX; (a.len() + 1) * (b.len() + 1)];
        fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut [usize], m: usize) -> usize {
            if memo[i * m + j] != usize::MAX {
                return memo[i * m + j];
            }
            let r = if i == 0 {
                j
            } else if j == 0 {
                i
            } else {
                let sub = go(a, b, i - 1, j - 1, memo, m) + usize::from(a[i - 1] != b[j - 1]);
                let del = go(a, b, i - 1, j, memo, m) + 1;
                let ins = go(a, b, i, j - 1, memo, m) + 1;
                sub.min(del).min(ins)
            };
            memo[i * m + j] = r;
            r
        }
        go(a, b, a.len(), b.len(), &mut memo, b.len() + 1)
    }

    #[test]
    fn witness_sums_to_total_and_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let la = rng.gen_range(0..=12);
            let lb = rng.gen_range(0..=12);
            let a: String = (0..la).map(|_| (b'a' + rng.gen_range(0..4)) as char).collect();
            let b: String = (0..lb).map(|_| (b'a' + rng.gen_range(0..4)) as char).collect();
            let e = edit_distance(&a, &b);
            assert_eq!(e.total, e.deletions + e.insertions + e.substitutions, "{a} {b}");
            assert_eq!(e.total, oracle_distance(a.as_bytes(), b.as_bytes()), "{a} {b}");
        }
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(
            a in "[a-c]{0,10}",
            b in "[a-c]{0,10}",
            c in "[a-c]{0,10}",
        ) {
            let ab = edit_distance(&a, &b).total;
            let ba = edit_distance(&b, &a).total;
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(edit_distance(&a, &a).total, 0);
            if ab == 0 {
                prop_assert_eq!(&a, &b);
            }
            let ac = edit_distance(&a, &c).total;
            let bc = edit_distance(&b, &c).total;
            prop_assert!(ac <= ab + bc);
        }
    }

    fn flow_of(f: impl Fn(usize) -> f64) -> FlowField<f64> {
        FlowField::new(Tensor::from_fn(&[16, 16, 2], f)).unwrap()
    }

    #[test]
    fn ld_epe_oracles() {
        let ones: Tensor<f64> = Tensor::full(&[16, 16, 1], 1.0);
        let gt = flow_of(|i| ((i * 11 % 13) as f64 - 6.0) * 0.5);
        assert_eq!(ld_epe(&gt, &gt, &ones).unwrap(), 0.0);
        let shifted = flow_of(|i| gt.disp.data()[i] + if i % 2 == 0 { 3.0 } else { 4.0 });
        assert_relative_eq!(ld_epe(&shifted, &gt, &ones).unwrap(), 5.0);
    }

    #[test]
    fn ld_epe_matches_loop_oracle() {
        let ones: Tensor<f64> = Tensor::full(&[16, 16, 1], 1.0);
        let a = flow_of(|i| ((i * 7 % 23) as f64 - 11.0) * 0.37);
        let b = flow_of(|i| ((i * 19 % 29) as f64 - 14.0) * 0.21);
        let mut sum = 0.0;
        for i in 0..256 {
            let du = a.disp.data()[i * 2] - b.disp.data()[i * 2];
            let dv = a.disp.data()[i * 2 + 1] - b.disp.data()[i * 2 + 1];
            sum += du.hypot(dv);
        }
        let expect = sum / 256.0;
        assert_relative_eq!(ld_epe(&a, &b, &ones).unwrap(), expect, epsilon = 1e-6);
        // symmetry and nonnegativity
        assert_relative_eq!(ld_epe(&b, &a, &ones).unwrap(), expect, epsilon = 1e-12);
        assert!(expect >= 0.0);
    }

    #[test]
    fn ld_epe_respects_mask() {
        let a = flow_of(|_| 0.0);
        let b = flow_of(|i| if i / 2 == 0 { 10.0 } else { 0.0 });
        // mask out the one disagreeing pixel
        let mask: Tensor<f64> = Tensor::from_fn(&[16, 16, 1], |i| if i == 0 { 0.0 } else { 1.0 });
        assert_eq!(ld_epe(&a, &b, &mask).unwrap(), 0.0);
        let none: Tensor<f64> = Tensor::zeros(&[16, 16, 1]);
        assert!(matches!(ld_epe(&a, &b, &none), Err(Error::Contract(_))));
        let wrong: Tensor<f64> = Tensor::full(&[8, 16, 1], 1.0);
        assert!(ld_epe(&a, &b, &wrong).is_err());
    }
}
