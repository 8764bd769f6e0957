//! Transfer study: does pretraining the encoder on masked reconstruction
//! buy a better rectifier than training from scratch at an equal
//! fine-tune budget? One shared pretrained encoder, several fine-tune
//! seeds per arm, held-out flow error as the yardstick. Optional probes
//! report the frozen-encoder and alternative-mask-ratio variants.

use std::io::Write;
use std::ops::Range;

use crate::config::RunConfig;
use crate::dataset::corpus_specs;
use crate::error::{Error, Result};
use crate::mae::MaeModel;
use crate::metrics::ld_epe;
use crate::optim::Adam;
use crate::rectifier::{background_exclude, FlowField, RectModel};
use crate::synth::gen_sample;
use crate::tensor::Tensor;
use crate::train::{finetune_run, pretrain_run, LossTrace};

pub struct TransferSpec {
    /// Pretraining schedule; also fixes the shared geometry and mask ratio.
    pub pretrain: RunConfig,
    /// Fine-tune schedule for every arm. Geometry must match `pretrain`.
    pub finetune: RunConfig,
    pub corpus_seed: u64,
    pub train_count: usize,
    pub heldout_count: usize,
    /// Fine-tune seeds; the reported number is the per-arm median.
    pub seeds: Vec<u64>,
    /// Also fine-tune with the pretrained encoder frozen (first seed only).
    pub frozen_probe: bool,
    /// Extra mask ratios to pretrain and fine-tune at (first seed only).
    pub ratio_probes: Vec<f64>,
}

impl TransferSpec {
    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.pretrain.dims() != self.finetune.dims() {
            return Err(Error::Validation(
                "pretrain and fine-tune stages must share model geometry".into(),
            ));
        }
        if self.train_count == 0 || self.heldout_count == 0 || self.seeds.is_empty() {
            return Err(Error::Validation(
                "need training samples, held-out samples, and at least one seed".into(),
            ));
        }
        for &r in &self.ratio_probes {
            if !(0.0..1.0).contains(&r) || r <= 0.0 {
                return Err(Error::Validation(format!("probe mask ratio {r} outside (0,1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    /// Held-out mean flow end-point error per seed, scratch arm.
    pub scratch: Vec<f64>,
    /// Same, with the encoder initialized from the pretrained checkpoint.
    pub pretrained: Vec<f64>,
    pub frozen: Option<f64>,
    /// (mask ratio, held-out error) pairs for the probe ratios.
    pub ratio_probes: Vec<(f64, f64)>,
    pub final_pretrain_loss: f64,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    }
}

impl TransferOutcome {
    pub fn scratch_median(&self) -> f64 {
        median(&self.scratch)
    }

    pub fn pretrained_median(&self) -> f64 {
        median(&self.pretrained)
    }

    /// Fraction by which pretraining lowers the median held-out error.
    pub fn improvement(&self) -> f64 {
        let s = self.scratch_median();
        (s - self.pretrained_median()) / s
    }

    pub fn passes_gate(&self, min_improvement: f64) -> bool {
        self.improvement() >= min_improvement
    }

    pub fn report(&self) -> String {
        let mut out = String::new();
        out.push_str("arm,seed_errors,median\n");
        let line = |name: &str, xs: &[f64]| {
            let joined: Vec<String> = xs.iter().map(|v| format!("{v:.6}")).collect();
            format!("{name},{},{:.6}\n", joined.join(" "), median(xs))
        };
        out.push_str(&line("scratch", &self.scratch));
        out.push_str(&line("pretrained", &self.pretrained));
        if let Some(f) = self.frozen {
            out.push_str(&format!("frozen,{f:.6},{f:.6}\n"));
        }
        for (r, e) in &self.ratio_probes {
            out.push_str(&format!("ratio_{r:.2},{e:.6},{e:.6}\n"));
        }
        out.push_str(&format!(
            "improvement,{:.4},{}\n",
            self.improvement(),
            if self.passes_gate(0.05) { "pretrained" } else { "inconclusive" }
        ));
        out
    }
}

struct TrainSet {
    images: Vec<Tensor<f32>>,
    pairs: Vec<(Tensor<f32>, FlowField<f32>)>,
}

struct HeldoutSample {
    distorted: Tensor<f32>,
    mask: Tensor<f32>,
    gt_flow: FlowField<f32>,
}

fn generate(
    spec: &TransferSpec,
    log: &mut dyn Write,
) -> Result<(TrainSet, Vec<HeldoutSample>)> {
    let cfg = &spec.pretrain;
    let mut images = Vec::with_capacity(spec.train_count);
    let mut pairs = Vec::with_capacity(spec.train_count);
    let mut heldout = Vec::with_capacity(spec.heldout_count);
    for i in 0..spec.train_count + spec.heldout_count {
        let (page, warp, bg) = corpus_specs(cfg.h, cfg.w, spec.corpus_seed, i);
        let s = gen_sample::<f32>(&page, &warp, bg)?;
        if i < spec.train_count {
            let excluded = background_exclude(&s.distorted, &s.mask)?;
            images.push(excluded.clone());
            pairs.push((excluded, s.gt_flow));
        } else {
            heldout.push(HeldoutSample {
                distorted: s.distorted,
                mask: s.mask,
                gt_flow: s.gt_flow,
            });
        }
        if (i + 1) % 200 == 0 {
            log_line(log, &format!("corpus {}/{}", i + 1, spec.train_count + spec.heldout_count))?;
        }
    }
    Ok((TrainSet { images, pairs }, heldout))
}

fn log_line(log: &mut dyn Write, msg: &str) -> Result<()> {
    writeln!(log, "{msg}").map_err(|e| Error::io("<transfer log>", e))
}

fn pretrain_encoder(
    cfg: &RunConfig,
    images: &[Tensor<f32>],
    log: &mut dyn Write,
) -> Result<(MaeModel<f32>, f64)> {
    let mut model = MaeModel::<f32>::init(cfg.dims(), cfg.seed)?;
    let mut opt = Adam::new();
    let mut trace = LossTrace::default();
    for epoch in 0..cfg.epochs {
        pretrain_run(cfg, images, &mut model, &mut opt, epoch..epoch + 1, &mut trace)?;
        log_line(
            log,
            &format!(
                "pretrain ratio={:.2} epoch {}/{} loss={:.5}",
                cfg.mask_ratio,
                epoch + 1,
                cfg.epochs,
                trace.last().unwrap_or(f64::NAN)
            ),
        )?;
    }
    let last = trace.last().ok_or_else(|| Error::Validation("empty pretrain trace".into()))?;
    Ok((model, last))
}

fn heldout_error(model: &RectModel<f32>, heldout: &[HeldoutSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in heldout {
        let (_, flow) = model.rectify(&s.distorted, &s.mask)?;
        total += ld_epe(&flow, &s.gt_flow, &s.mask)?;
    }
    Ok(total / heldout.len() as f64)
}

fn finetune_arm(
    cfg: &RunConfig,
    seed: u64,
    encoder_from: Option<&MaeModel<f32>>,
    freeze: bool,
    pairs: &[(Tensor<f32>, FlowField<f32>)],
    heldout: &[HeldoutSample],
) -> Result<f64> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let mut model = RectModel::<f32>::init(cfg.dims(), cfg.seed)?;
    if let Some(mae) = encoder_from {
        model.load_encoder_from(&mae.params)?;
    }
    let mut opt = Adam::new();
    let mut trace = LossTrace::default();
    let epochs: Range<usize> = 0..cfg.epochs;
    finetune_run(&cfg, pairs, &mut model, &mut opt, epochs, freeze, &mut trace)?;
    heldout_error(&model, heldout)
}

/// Runs the full study: one corpus, one pretrained encoder per mask ratio,
/// and a scratch plus a pretrained fine-tune per seed.
pub fn run_transfer(spec: &TransferSpec, log: &mut dyn Write) -> Result<TransferOutcome> {
    spec.validate()?;
    let (train, heldout) = generate(spec, log)?;
    let (mae, final_pretrain_loss) = pretrain_encoder(&spec.pretrain, &train.images, log)?;

    let mut scratch = Vec::new();
    let mut pretrained = Vec::new();
    for &seed in &spec.seeds {
        let s = finetune_arm(&spec.finetune, seed, None, false, &train.pairs, &heldout)?;
        log_line(log, &format!("scratch seed={seed} heldout_epe={s:.5}"))?;
        scratch.push(s);
        let p = finetune_arm(&spec.finetune, seed, Some(&mae), false, &train.pairs, &heldout)?;
        log_line(log, &format!("pretrained seed={seed} heldout_epe={p:.5}"))?;
        pretrained.push(p);
    }

    let frozen = if spec.frozen_probe {
        let f = finetune_arm(&spec.finetune, spec.seeds[0], Some(&mae), true, &train.pairs, &heldout)?;
        log_line(log, &format!("frozen seed={} heldout_epe={f:.5}", spec.seeds[0]))?;
        Some(f)
    } else {
        None
    };

    let mut ratio_probes = Vec::new();
    for &ratio in &spec.ratio_probes {
        let mut cfg = spec.pretrain.clone();
        cfg.mask_ratio = ratio;
        let (mae_r, _) = pretrain_encoder(&cfg, &train.images, log)?;
        let e = finetune_arm(&spec.finetune, spec.seeds[0], Some(&mae_r), false, &train.pairs, &heldout)?;
        log_line(log, &format!("ratio={ratio:.2} heldout_epe={e:.5}"))?;
        ratio_probes.push((ratio, e));
    }

    Ok(TransferOutcome { scratch, pretrained, frozen, ratio_probes, final_pretrain_loss })
}
