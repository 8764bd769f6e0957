//! The five pipeline commands plus the reconstruction demo, as library
//! functions. The CLI binary is a thin argument parser over these; every
//! behavior here is exercised by tests without spawning a process.
//!
//! Each training command writes three artifacts next to each other: the
//! checkpoint, a loss-trace CSV, and a resolved-config echo.

use std::path::{Path, PathBuf};

use crate::checkpoint::{pack_state, unpack_optimizer, unpack_params, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{gen_corpus, read_sample, sample_paths, Manifest};
use crate::error::{Error, Result};
use crate::io::{read_flo, read_mask, read_ppm, write_flo, write_ppm};
use crate::mae::MaeModel;
use crate::metrics::{cer, edit_distance, ld_epe, ms_ssim};
use crate::optim::Adam;
use crate::params::ParamMap;
use crate::patch::{make_mask_plan, MaskPlan};
use crate::rectifier::{background_exclude, RectModel};
use crate::synth::{
    extract_line_signature, round_trip_error, threshold_segment, ROUND_TRIP_TOL,
};
use crate::tensor::Tensor;
use crate::train::{finetune_run, pretrain_run, LossTrace};

const STAGE_KEY: &str = "stage";
const STAGE_RECONSTRUCT: &str = "reconstruct";
const STAGE_RECTIFY: &str = "rectify";
const EPOCHS_DONE_KEY: &str = "epochs_done";
const SCHEDULE_EPOCHS_KEY: &str = "schedule_epochs";

fn trace_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("trace.csv")
}

fn echo_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("echo.txt")
}

#[derive(Debug)]
pub struct GenDataOutcome {
    pub manifest: Manifest,
    /// Stems whose stored files were re-verified against the round-trip
    /// certificate.
    pub spot_checked: Vec<String>,
}

/// Generates `count` corpus samples under `out_dir`. With `spot_check`,
/// re-reads every tenth sample from disk and re-runs the round-trip
/// certificate on the stored bytes.
pub fn cmd_gen_data(
    cfg: &RunConfig,
    count: usize,
    out_dir: &Path,
    spot_check: bool,
) -> Result<GenDataOutcome> {
    cfg.validate()?;
    let manifest = gen_corpus(out_dir, cfg.h, cfg.w, count, cfg.seed)?;
    cfg.write_echo(&out_dir.join("config.echo.txt"))?;
    let mut spot_checked = Vec::new();
    if spot_check {
        for row in manifest.rows.iter().step_by(10) {
            let s = read_sample(out_dir, &row.stem)?;
            let mae = round_trip_error(&s.clean, &s.distorted, &s.mask, &s.gt_flow)?;
            if mae >= ROUND_TRIP_TOL {
                return Err(Error::Validation(format!(
                    "stored sample {} fails the round-trip certificate: \
                     mean error {mae:.4} at tolerance {ROUND_TRIP_TOL}",
                    row.stem
                )));
            }
            spot_checked.push(row.stem.clone());
        }
    }
    Ok(GenDataOutcome { manifest, spot_checked })
}

fn load_corpus_checked(cfg: &RunConfig, dir: &Path) -> Result<Vec<crate::dataset::StoredSample>> {
    let (manifest, samples) = crate::dataset::load_corpus(dir)?;
    for (row, s) in manifest.rows.iter().zip(&samples) {
        if s.clean.shape() != [cfg.h, cfg.w, 3] {
            return Err(Error::Validation(format!(
                "corpus sample {} is {:?}, config wants [{}, {}, 3]",
                row.stem,
                s.clean.shape(),
                cfg.h,
                cfg.w
            )));
        }
    }
    Ok(samples)
}

fn meta_usize(ckpt: &Checkpoint, key: &str) -> Result<usize> {
    ckpt.meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {key} metadata")))?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("checkpoint {key} metadata is not a number")))
}

fn check_stage(ckpt: &Checkpoint, want: &str) -> Result<()> {
    match ckpt.meta.get(STAGE_KEY) {
        Some(s) if s == want => Ok(()),
        Some(s) => Err(Error::Checkpoint(format!(
            "checkpoint holds a {s} model, this command needs a {want} model"
        ))),
        None => Err(Error::Checkpoint("checkpoint lacks a stage marker".into())),
    }
}

fn save_stage_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    params: &ParamMap<f32>,
    opt: &Adam<f32>,
    stage: &str,
    epochs_done: usize,
) -> Result<()> {
    let mut ckpt = pack_state(cfg.to_kv(false), params, Some(opt))?;
    ckpt.meta.insert(STAGE_KEY.into(), stage.into());
    ckpt.meta.insert(EPOCHS_DONE_KEY.into(), epochs_done.to_string());
    ckpt.meta.insert(SCHEDULE_EPOCHS_KEY.into(), cfg.epochs.to_string());
    ckpt.save(path)
}

/// Replaces every tensor of `target` with the same-named tensor from a
/// checkpoint's parameter set.
fn install_params(target: &mut ParamMap<f32>, source: &ParamMap<f32>) -> Result<()> {
    let names: Vec<String> = target.names().map(String::from).collect();
    for name in names {
        let incoming = source
            .get(&name)
            .map_err(|_| Error::Checkpoint(format!("checkpoint lacks tensor {name:?}")))?
            .clone();
        target.set(&name, incoming).map_err(|e| match e {
            Error::Dim(msg) => Error::Checkpoint(msg),
            other => other,
        })?;
    }
    Ok(())
}

/// Runs stage-1 training over a generated corpus and writes checkpoint,
/// loss trace, and config echo. `resume` continues a partial run;
/// `stop_epoch` ends this invocation early (the schedule still spans all
/// configured epochs), which is how a resumable partial checkpoint is made.
/// Returns the final step's loss.
pub fn cmd_pretrain(
    cfg: &RunConfig,
    corpus_dir: &Path,
    out_checkpoint: &Path,
    resume: Option<&Path>,
    stop_epoch: Option<usize>,
) -> Result<f64> {
    cfg.validate()?;
    let samples = load_corpus_checked(cfg, corpus_dir)?;
    let images: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| background_exclude(&s.distorted, &s.mask))
        .collect::<Result<_>>()?;

    let mut model = MaeModel::<f32>::init(cfg.dims(), cfg.seed)?;
    let mut opt = Adam::new();
    let mut trace = LossTrace::default();
    let mut start_epoch = 0;
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        check_stage(&ckpt, STAGE_RECONSTRUCT)?;
        cfg.check_compatible(&ckpt.config)?;
        if meta_usize(&ckpt, SCHEDULE_EPOCHS_KEY)? != cfg.epochs {
            return Err(Error::Validation(format!(
                "resumed schedule spans {} epochs, config says {}",
                ckpt.meta[SCHEDULE_EPOCHS_KEY], cfg.epochs
            )));
        }
        model.params = unpack_params(&ckpt)?;
        opt = unpack_optimizer(&ckpt)?.ok_or_else(|| {
            Error::Checkpoint("cannot resume: checkpoint has no optimizer state".into())
        })?;
        start_epoch = meta_usize(&ckpt, EPOCHS_DONE_KEY)?;
        trace = LossTrace::load(&trace_path(path))?;
    }

    let end_epoch = stop_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
    pretrain_run(cfg, &images, &mut model, &mut opt, start_epoch..end_epoch, &mut trace)?;
    save_stage_checkpoint(out_checkpoint, cfg, &model.params, &opt, STAGE_RECONSTRUCT, end_epoch)?;
    trace.save(&trace_path(out_checkpoint))?;
    cfg.write_echo(&echo_path(out_checkpoint))?;
    trace.last().ok_or_else(|| Error::Validation("training produced no steps".into()))
}

/// Runs stage-2 training. Unless `from_scratch` is set, `in_checkpoint`
/// must name a stage-1 checkpoint whose encoder weights seed the model.
/// Returns the final step's loss.
pub fn cmd_finetune(
    cfg: &RunConfig,
    corpus_dir: &Path,
    in_checkpoint: Option<&Path>,
    out_checkpoint: &Path,
) -> Result<f64> {
    cfg.validate()?;
    match (cfg.from_scratch, in_checkpoint) {
        (true, Some(_)) => {
            return Err(Error::Validation(
                "from_scratch starts with a fresh encoder; drop the input checkpoint".into(),
            ))
        }
        (false, None) => {
            return Err(Error::Validation(
                "fine-tuning needs a stage-1 checkpoint (or set from_scratch)".into(),
            ))
        }
        _ => {}
    }
    let samples = load_corpus_checked(cfg, corpus_dir)?;
    let pairs: Vec<_> = samples
        .iter()
        .map(|s| {
            background_exclude(&s.distorted, &s.mask).map(|img| (img, s.gt_flow.clone()))
        })
        .collect::<Result<_>>()?;

    let mut model = RectModel::<f32>::init(cfg.dims(), cfg.seed)?;
    if let Some(path) = in_checkpoint {
        let ckpt = Checkpoint::load(path)?;
        check_stage(&ckpt, STAGE_RECONSTRUCT)?;
        cfg.check_compatible(&ckpt.config)?;
        model.load_encoder_from(&unpack_params(&ckpt)?)?;
    }
    let mut opt = Adam::new();
    let mut trace = LossTrace::default();
    finetune_run(cfg, &pairs, &mut model, &mut opt, 0..cfg.epochs, cfg.freeze_encoder, &mut trace)?;
    save_stage_checkpoint(out_checkpoint, cfg, &model.params, &opt, STAGE_RECTIFY, cfg.epochs)?;
    trace.save(&trace_path(out_checkpoint))?;
    cfg.write_echo(&echo_path(out_checkpoint))?;
    trace.last().ok_or_else(|| Error::Validation("training produced no steps".into()))
}

fn load_rect_model(checkpoint: &Path) -> Result<(RunConfig, RectModel<f32>)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    check_stage(&ckpt, STAGE_RECTIFY)?;
    let cfg = RunConfig::from_kv(&ckpt.config)?;
    let mut model = RectModel::<f32>::init(cfg.dims(), cfg.seed)?;
    install_params(&mut model.params, &unpack_params(&ckpt)?)?;
    Ok((cfg, model))
}

/// Mask file conventions recognized next to a bare input image.
fn mask_candidates(image: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let dir = image.parent().unwrap_or(Path::new(""));
    let name = image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if let Some(base) = name.strip_suffix(".distorted.ppm") {
        out.push(dir.join(format!("{base}.mask.ppm")));
    }
    if let Some(base) = name.strip_suffix(".ppm") {
        out.push(dir.join(format!("{base}.mask.ppm")));
    }
    out
}

fn rectify_one(
    model: &RectModel<f32>,
    image_path: &Path,
    mask_path: Option<&Path>,
    out_dir: &Path,
    stem: &str,
) -> Result<()> {
    let image: Tensor<f32> = read_ppm(image_path)?;
    let mask = match mask_path {
        Some(p) => read_mask(p)?,
        None => threshold_segment(&image)?,
    };
    let (rectified, flow) = model.rectify(&image, &mask)?;
    write_ppm(&out_dir.join(format!("{stem}.rect.ppm")), &rectified)?;
    write_flo(&out_dir.join(format!("{stem}.flow.flo")), &flow)
}

#[derive(Debug)]
pub struct RectifyOutcome {
    /// Stems written (one `.rect.ppm` + one `.flow.flo` each).
    pub written: Vec<String>,
    /// (stem, error) for inputs that failed; the run continues past them.
    pub failures: Vec<(String, String)>,
}

/// Rectifies a corpus directory (every manifest entry) or a single image
/// file. Masks come from the sample's mask file when present, otherwise
/// from intensity segmentation. Failed inputs are reported, not fatal.
pub fn cmd_rectify(checkpoint: &Path, input: &Path, out_dir: &Path) -> Result<RectifyOutcome> {
    let (_, model) = load_rect_model(checkpoint)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut outcome = RectifyOutcome { written: Vec::new(), failures: Vec::new() };

    let mut jobs: Vec<(String, PathBuf, Option<PathBuf>)> = Vec::new();
    if input.is_dir() {
        let manifest = Manifest::load(&input.join("manifest.csv"))?;
        for row in &manifest.rows {
            let [_, distorted, mask, _] = sample_paths(input, &row.stem);
            let mask = mask.exists().then_some(mask);
            jobs.push((row.stem.clone(), distorted, mask));
        }
    } else {
        let name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let stem = name
            .strip_suffix(".distorted.ppm")
            .or_else(|| name.strip_suffix(".ppm"))
            .unwrap_or(&name)
            .to_string();
        let mask = mask_candidates(input).into_iter().find(|p| p.exists());
        jobs.push((stem, input.to_path_buf(), mask));
    }

    for (stem, image_path, mask_path) in jobs {
        match rectify_one(&model, &image_path, mask_path.as_deref(), out_dir, &stem) {
            Ok(()) => outcome.written.push(stem),
            Err(e) => outcome.failures.push((stem, e.to_string())),
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub stem: String,
    pub ms_ssim: f64,
    pub scales_used: usize,
    pub ld_epe: f64,
    pub edit_distance: usize,
    pub cer: f64,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub rows: Vec<EvalRow>,
    pub missing: Vec<String>,
    pub report: String,
}

impl EvalOutcome {
    fn mean(&self, f: impl Fn(&EvalRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_ms_ssim(&self) -> f64 {
        self.mean(|r| r.ms_ssim)
    }

    pub fn mean_ld_epe(&self) -> f64 {
        self.mean(|r| r.ld_epe)
    }

    pub fn mean_cer(&self) -> f64 {
        self.mean(|r| r.cer)
    }
}

/// Scores `pred_dir`'s rectified images and flows against the ground-truth
/// corpus, writing a CSV report. Pairs with missing prediction files are
/// listed and excluded from aggregates; more than 10% missing is an error
/// (after the report is written).
pub fn cmd_eval(pred_dir: &Path, corpus_dir: &Path, out_report: &Path) -> Result<EvalOutcome> {
    let manifest = Manifest::load(&corpus_dir.join("manifest.csv"))?;
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for row in &manifest.rows {
        let rect_path = pred_dir.join(format!("{}.rect.ppm", row.stem));
        let flow_path = pred_dir.join(format!("{}.flow.flo", row.stem));
        if !rect_path.exists() || !flow_path.exists() {
            missing.push(row.stem.clone());
            continue;
        }
        let rect: Tensor<f32> = read_ppm(&rect_path)?;
        let flow = read_flo(&flow_path)?;
        let gt = read_sample(corpus_dir, &row.stem)?;
        let ms = ms_ssim(&rect, &gt.clean)?;
        let epe = ld_epe(&flow, &gt.gt_flow, &gt.mask)?;
        let predicted_sig = extract_line_signature(&rect, &row.page).unwrap_or_default();
        let ed = edit_distance(&predicted_sig, &row.signature);
        let c = cer(&ed, row.signature.chars().count())?;
        rows.push(EvalRow {
            stem: row.stem.clone(),
            ms_ssim: ms.score,
            scales_used: ms.scales_used,
            ld_epe: epe,
            edit_distance: ed.total,
            cer: c,
        });
    }

    let mut report = String::new();
    report.push_str("# scored on grayscale-converted, un-resized images; flow error over the ground-truth mask\n");
    report.push_str("stem,ms_ssim,scales_used,ld_epe,edit_distance,cer\n");
    for r in &rows {
        report.push_str(&format!(
            "{},{:.6},{},{:.6},{},{:.6}\n",
            r.stem, r.ms_ssim, r.scales_used, r.ld_epe, r.edit_distance, r.cer
        ));
    }
    let outcome_probe = EvalOutcome { rows: rows.clone(), missing: missing.clone(), report: String::new() };
    if !rows.is_empty() {
        report.push_str(&format!(
            "aggregate,{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            outcome_probe.mean_ms_ssim(),
            outcome_probe.mean(|r| r.scales_used as f64),
            outcome_probe.mean_ld_epe(),
            outcome_probe.mean(|r| r.edit_distance as f64),
            outcome_probe.mean_cer(),
        ));
    }
    for stem in &missing {
        report.push_str(&format!("missing,{stem}\n"));
    }
    std::fs::write(out_report, &report).map_err(|e| Error::io(out_report, e))?;

    if !manifest.rows.is_empty() && missing.len() * 10 > manifest.rows.len() {
        return Err(Error::Validation(format!(
            "{} of {} prediction pairs missing (first: {})",
            missing.len(),
            manifest.rows.len(),
            missing[0]
        )));
    }
    Ok(EvalOutcome { rows, missing, report })
}

/// Joins three same-sized panels left to right with a 2 px white gap.
fn triptych(panels: [&Tensor<f32>; 3]) -> Result<Tensor<f32>> {
    let shape = panels[0].shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    const GAP: usize = 2;
    let out_w = 3 * w + 2 * GAP;
    let mut out = Tensor::full(&[h, out_w, 3], 1.0f32);
    for (k, panel) in panels.iter().enumerate() {
        if panel.shape() != shape.as_slice() {
            return Err(Error::Geometry("triptych panels must share extents".into()));
        }
        let x0 = k * (w + GAP);
        for v in 0..h {
            for u in 0..w {
                for ch in 0..3 {
                    out.data_mut()[(v * out_w + x0 + u) * 3 + ch] = panel.at3(v, u, ch);
                }
            }
        }
    }
    Ok(out)
}

/// Writes masked/reconstruction/target triptychs for the first `count`
/// corpus samples through a stage-1 checkpoint. Returns the stems written.
pub fn cmd_demo_reconstruct(
    checkpoint: &Path,
    corpus_dir: &Path,
    out_dir: &Path,
    count: usize,
) -> Result<Vec<String>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    check_stage(&ckpt, STAGE_RECONSTRUCT)?;
    let cfg = RunConfig::from_kv(&ckpt.config)?;
    let mut model = MaeModel::<f32>::init(cfg.dims(), cfg.seed)?;
    install_params(&mut model.params, &unpack_params(&ckpt)?)?;

    let manifest = Manifest::load(&corpus_dir.join("manifest.csv"))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (i, row) in manifest.rows.iter().take(count).enumerate() {
        let s = read_sample(corpus_dir, &row.stem)?;
        let excluded = background_exclude(&s.distorted, &s.mask)?;
        let plan: MaskPlan =
            make_mask_plan(cfg.dims().n_patches(), cfg.mask_ratio, cfg.seed.wrapping_add(i as u64))?;
        let demo = crate::mae::reconstruct_demo(&model, &excluded, &plan)?;
        let sheet = triptych([&demo.masked, &demo.composite, &demo.target])?;
        write_ppm(&out_dir.join(format!("{}.triptych.ppm", row.stem)), &sheet)?;
        written.push(row.stem.clone());
    }
    Ok(written)
}
