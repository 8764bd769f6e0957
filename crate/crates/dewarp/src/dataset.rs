//! On-disk corpus layout: per sample a clean page, a distorted page, a
//! mask, and a ground-truth flow, plus one CSV manifest whose seeds and
//! specs reproduce the corpus exactly.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::flo::{read_flo, write_flo};
use crate::io::ppm::{read_mask, read_ppm, write_ppm};
use crate::rectifier::FlowField;
use crate::synth::{gen_sample, line_signature, PageSpec, SyntheticSample, WarpSpec};
use crate::tensor::Tensor;

pub fn sample_paths(dir: &Path, stem: &str) -> [PathBuf; 4] {
    [
        dir.join(format!("{stem}.clean.ppm")),
        dir.join(format!("{stem}.distorted.ppm")),
        dir.join(format!("{stem}.mask.ppm")),
        dir.join(format!("{stem}.flow.flo")),
    ]
}

pub fn write_sample(dir: &Path, stem: &str, sample: &SyntheticSample<f32>) -> Result<()> {
    let [clean, distorted, mask, flow] = sample_paths(dir, stem);
    write_ppm(&clean, &sample.clean)?;
    write_ppm(&distorted, &sample.distorted)?;
    write_ppm(&mask, &sample.mask)?;
    write_flo(&flow, &sample.gt_flow)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct StoredSample {
    pub clean: Tensor<f32>,
    pub distorted: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub gt_flow: FlowField<f32>,
}

pub fn read_sample(dir: &Path, stem: &str) -> Result<StoredSample> {
    let [clean, distorted, mask, flow] = sample_paths(dir, stem);
    Ok(StoredSample {
        clean: read_ppm(&clean)?,
        distorted: read_ppm(&distorted)?,
        mask: read_mask(&mask)?,
        gt_flow: read_flo(&flow)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub stem: String,
    pub page: PageSpec,
    pub warp: WarpSpec,
    pub background_seed: u64,
    pub attempts: u32,
    pub signature: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

const MANIFEST_HEADER: &str = "stem,h,w,line_count,line_thickness,margin,ink,paper,border_ink,\
border_thickness,page_seed,homography_px,fold_amp_x,fold_amp_y,fold_freq_x,fold_freq_y,\
bump_count,bump_amp,bump_sigma,warp_seed,background_seed,attempts,signature";

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.rows {
            let p = &r.page;
            let w = &r.warp;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.stem,
                p.h,
                p.w,
                p.line_count,
                p.line_thickness,
                p.margin,
                p.ink,
                p.paper,
                p.border_ink,
                p.border_thickness,
                p.seed,
                w.homography_px,
                w.fold_amp_x,
                w.fold_amp_y,
                w.fold_freq_x,
                w.fold_freq_y,
                w.bump_count,
                w.bump_amp,
                w.bump_sigma,
                w.seed,
                r.background_seed,
                r.attempts,
                r.signature,
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            _ => return Err(Error::format(path, "missing or unexpected manifest header")),
        }
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 23 {
                return Err(Error::format(
                    path,
                    format!("line {}: {} fields, expected 23", lineno + 2, f.len()),
                ));
            }
            fn num<T: std::str::FromStr>(path: &Path, lineno: usize, s: &str) -> Result<T> {
                s.parse().map_err(|_| {
                    Error::format(path, format!("line {}: bad number {s:?}", lineno + 2))
                })
            }
            let page = PageSpec {
                h: num(path, lineno, f[1])?,
                w: num(path, lineno, f[2])?,
                line_count: num(path, lineno, f[3])?,
                line_thickness: num(path, lineno, f[4])?,
                margin: num(path, lineno, f[5])?,
                ink: num(path, lineno, f[6])?,
                paper: num(path, lineno, f[7])?,
                border_ink: num(path, lineno, f[8])?,
                border_thickness: num(path, lineno, f[9])?,
                seed: num(path, lineno, f[10])?,
            };
            let warp = WarpSpec {
                homography_px: num(path, lineno, f[11])?,
                fold_amp_x: num(path, lineno, f[12])?,
                fold_amp_y: num(path, lineno, f[13])?,
                fold_freq_x: num(path, lineno, f[14])?,
                fold_freq_y: num(path, lineno, f[15])?,
                bump_count: num(path, lineno, f[16])?,
                bump_amp: num(path, lineno, f[17])?,
                bump_sigma: num(path, lineno, f[18])?,
                seed: num(path, lineno, f[19])?,
            };
            rows.push(ManifestRow {
                stem: f[0].to_string(),
                page,
                warp,
                background_seed: num(path, lineno, f[20])?,
                attempts: num(path, lineno, f[21])?,
                signature: f[22].to_string(),
            });
        }
        Ok(Manifest { rows })
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Independent per-sample seed stream: parallel and serial generation see
/// the same values.
fn derive_seed(corpus_seed: u64, index: usize, lane: u64) -> u64 {
    splitmix64(corpus_seed ^ splitmix64((index as u64) << 8 | lane))
}

/// The page, warp, and background seeds for one corpus slot, with seeded
/// per-sample variation in layout and distortion strength.
pub fn corpus_specs(h: usize, w: usize, corpus_seed: u64, index: usize) -> (PageSpec, WarpSpec, u64) {
    let mut page = PageSpec::desk(h, w, derive_seed(corpus_seed, index, 0));
    let mut vary = ChaCha8Rng::seed_from_u64(derive_seed(corpus_seed, index, 1));
    let base_lines = page.line_count;
    page.line_count = (base_lines as i64 + vary.gen_range(-2i64..=2)).max(2) as usize;
    let scale = h.min(w) as f64 / 96.0;
    let jitter = |rng: &mut ChaCha8Rng, v: f64| v * scale * rng.gen_range(0.7..1.3);
    let base = WarpSpec::desk(derive_seed(corpus_seed, index, 2));
    let warp = WarpSpec {
        homography_px: jitter(&mut vary, base.homography_px),
        fold_amp_x: jitter(&mut vary, base.fold_amp_x),
        fold_amp_y: jitter(&mut vary, base.fold_amp_y),
        fold_freq_x: base.fold_freq_x * vary.gen_range(0.8..1.2),
        fold_freq_y: base.fold_freq_y * vary.gen_range(0.8..1.2),
        bump_count: base.bump_count,
        bump_amp: jitter(&mut vary, base.bump_amp),
        bump_sigma: base.bump_sigma * scale,
        seed: base.seed,
    };
    (page, warp, derive_seed(corpus_seed, index, 3))
}

pub fn stem_for(index: usize) -> String {
    format!("s{index:05}")
}

/// Generates `count` samples into `dir` and returns the manifest
/// (also written to `dir/manifest.csv`).
pub fn gen_corpus(dir: &Path, h: usize, w: usize, count: usize, corpus_seed: u64) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for i in 0..count {
        let (page, warp, bg_seed) = corpus_specs(h, w, corpus_seed, i);
        let sample: SyntheticSample<f32> = gen_sample(&page, &warp, bg_seed)?;
        let stem = stem_for(i);
        write_sample(dir, &stem, &sample)?;
        manifest.rows.push(ManifestRow {
            stem,
            signature: line_signature(&sample.meta.page)?,
            page: sample.meta.page,
            warp: sample.meta.warp,
            background_seed: sample.meta.background_seed,
            attempts: sample.meta.attempts,
        });
    }
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Every sample the manifest promises, loaded from disk. Stems listed but
/// missing on disk surface as IO errors naming the file.
pub fn load_corpus(dir: &Path) -> Result<(Manifest, Vec<StoredSample>)> {
    let manifest = Manifest::load(&dir.join("manifest.csv"))?;
    let mut samples = Vec::with_capacity(manifest.rows.len());
    for row in &manifest.rows {
        samples.push(read_sample(dir, &row.stem)?);
    }
    Ok((manifest, samples))
}
