//! Training drivers for both stages. Batch order, mask plans, and the
//! learning-rate schedule are all pure functions of (config seed, epoch,
//! step), so a run resumed from a checkpoint retraces the uninterrupted
//! run bit for bit.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mae::{pretrain_step, MaeModel, PretrainBatch};
use crate::optim::{Adam, OneCycle};
use crate::rectifier::{finetune_step, FinetuneBatch, FlowField, RectModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    /// (epoch, step-within-epoch, loss)
    pub rows: Vec<(usize, usize, f64)>,
}

impl LossTrace {
    pub fn push(&mut self, epoch: usize, step: usize, loss: f64) {
        self.rows.push((epoch, step, loss));
    }

    pub fn first(&self) -> Option<f64> {
        self.rows.first().map(|r| r.2)
    }

    pub fn last(&self) -> Option<f64> {
        self.rows.last().map(|r| r.2)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,step,loss\n");
        for (e, s, l) in &self.rows {
            out.push_str(&format!("{e},{s},{l}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<LossTrace> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some("epoch,step,loss") {
            return Err(Error::format(path, "missing trace header"));
        }
        let mut rows = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(Error::format(path, format!("bad trace row {line:?}")));
            }
            let parse_err = || Error::format(path, format!("bad trace row {line:?}"));
            rows.push((
                f[0].parse().map_err(|_| parse_err())?,
                f[1].parse().map_err(|_| parse_err())?,
                f[2].parse().map_err(|_| parse_err())?,
            ));
        }
        Ok(LossTrace { rows })
    }
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E3779B97F4A7C15) ^ b.wrapping_mul(0xC2B2AE3D27D4EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51AFD7ED558CCD);
    x ^= x >> 33;
    x
}

/// Sample visit order for one epoch, a seeded shuffle recomputable at any
/// resume point.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x45504F43, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Seed for the mask plans of one batch.
pub fn plan_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    mix(seed, 0x504C414E ^ (epoch as u64) << 20, step as u64)
}

fn schedule_for(cfg: &RunConfig, n: usize) -> Result<OneCycle> {
    let total = cfg.epochs * steps_per_epoch(n, cfg.batch);
    if total < 2 {
        return Err(Error::Validation(format!(
            "{} samples at batch {} over {} epochs give {total} steps; need at least 2",
            n, cfg.batch, cfg.epochs
        )));
    }
    OneCycle::new(cfg.max_lr, total, cfg.warmup_frac)
}

fn check_epoch_range(cfg: &RunConfig, epochs: &std::ops::Range<usize>) -> Result<()> {
    if epochs.end > cfg.epochs {
        return Err(Error::Validation(format!(
            "epoch range ends at {} but the schedule spans {} epochs",
            epochs.end, cfg.epochs
        )));
    }
    Ok(())
}

/// Runs the given stage-1 epochs over background-excluded images, appending
/// one trace row per step. The schedule always spans all `cfg.epochs`, so an
/// interrupted run continued over the remaining range retraces the
/// uninterrupted one.
pub fn pretrain_run(
    cfg: &RunConfig,
    images: &[Tensor<f32>],
    model: &mut MaeModel<f32>,
    opt: &mut Adam<f32>,
    epochs: std::ops::Range<usize>,
    trace: &mut LossTrace,
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Validation("no training images".into()));
    }
    check_epoch_range(cfg, &epochs)?;
    let schedule = schedule_for(cfg, images.len())?;
    let spe = steps_per_epoch(images.len(), cfg.batch);
    for epoch in epochs {
        let order = epoch_order(cfg.seed, epoch, images.len());
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let global = epoch * spe + step;
            let batch_images: Vec<Tensor<f32>> = chunk.iter().map(|&i| images[i].clone()).collect();
            let batch = PretrainBatch::with_plans_from_seed(
                batch_images,
                cfg.dims().n_patches(),
                cfg.mask_ratio,
                plan_seed(cfg.seed, epoch, step),
            )?;
            let loss = pretrain_step(model, &batch, opt, schedule.lr_at(global)?, global)?;
            trace.push(epoch, step, loss);
        }
    }
    Ok(())
}

/// Runs the given stage-2 epochs over (excluded image, ground-truth flow)
/// pairs.
pub fn finetune_run(
    cfg: &RunConfig,
    pairs: &[(Tensor<f32>, FlowField<f32>)],
    model: &mut RectModel<f32>,
    opt: &mut Adam<f32>,
    epochs: std::ops::Range<usize>,
    freeze_encoder: bool,
    trace: &mut LossTrace,
) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Validation("no training pairs".into()));
    }
    check_epoch_range(cfg, &epochs)?;
    let schedule = schedule_for(cfg, pairs.len())?;
    let spe = steps_per_epoch(pairs.len(), cfg.batch);
    for epoch in epochs {
        let order = epoch_order(cfg.seed, epoch, pairs.len());
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let global = epoch * spe + step;
            let images: Vec<Tensor<f32>> = chunk.iter().map(|&i| pairs[i].0.clone()).collect();
            let flows: Vec<FlowField<f32>> = chunk
                .iter()
                .map(|&i| FlowField::new(pairs[i].1.disp.clone()))
                .collect::<Result<_>>()?;
            let batch = FinetuneBatch::new(images, flows)?;
            let loss = finetune_step(
                model,
                &batch,
                opt,
                schedule.lr_at(global)?,
                freeze_encoder,
                global,
            )?;
            trace.push(epoch, step, loss);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{pack_state, unpack_optimizer, unpack_params, Checkpoint};
    use crate::mae::ModelDims;
    use std::collections::BTreeMap;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.h = 16;
        cfg.w = 24;
        cfg.patch = 8;
        cfg.dim = 16;
        cfg.k1 = 1;
        cfg.k2 = 1;
        cfg.epochs = 4;
        cfg.batch = 2;
        cfg.seed = 11;
        cfg
    }

    fn tiny_images(cfg: &RunConfig, count: usize) -> Vec<Tensor<f32>> {
        (0..count)
            .map(|k| {
                Tensor::from_fn(&[cfg.h, cfg.w, 3], |i| {
                    ((i * 13 + k * 31 + 5) % 97) as f32 / 97.0
                })
            })
            .collect()
    }

    fn tiny_pairs(cfg: &RunConfig, count: usize) -> Vec<(Tensor<f32>, FlowField<f32>)> {
        // every sample shares one constant target so the flow-head bias can
        // close the gap on its own and each step provably descends
        tiny_images(cfg, count)
            .into_iter()
            .map(|img| {
                let flow = FlowField::new(Tensor::from_fn(&[cfg.h, cfg.w, 2], |i| {
                    if i % 2 == 0 { 0.9 } else { -0.6 }
                }))
                .unwrap();
                (img, flow)
            })
            .collect()
    }

    #[test]
    fn epoch_order_is_a_permutation_and_varies() {
        let a = epoch_order(1, 0, 20);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_ne!(a, epoch_order(1, 1, 20));
        assert_eq!(a, epoch_order(1, 0, 20));
    }

    #[test]
    fn trace_bookkeeping_and_round_trip() {
        let cfg = tiny_cfg();
        let images = tiny_images(&cfg, 5);
        let dims: ModelDims = cfg.dims();
        let mut model = MaeModel::<f32>::init(dims, cfg.seed).unwrap();
        let mut opt = Adam::new();
        let mut trace = LossTrace::default();
        pretrain_run(&cfg, &images, &mut model, &mut opt, 0..cfg.epochs, &mut trace).unwrap();
        assert_eq!(trace.rows.len(), cfg.epochs * steps_per_epoch(5, cfg.batch));
        assert!(trace.rows.iter().all(|r| r.2.is_finite()));
        let dir = std::env::temp_dir().join("dewarp-train-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("trace.csv");
        trace.save(&p).unwrap();
        assert_eq!(LossTrace::load(&p).unwrap(), trace);
    }

    #[test]
    fn pretrain_replays_bit_identically() {
        let cfg = tiny_cfg();
        let images = tiny_images(&cfg, 4);
        let run = || {
            let mut model = MaeModel::<f32>::init(cfg.dims(), cfg.seed).unwrap();
            let mut opt = Adam::new();
            let mut trace = LossTrace::default();
            pretrain_run(&cfg, &images, &mut model, &mut opt, 0..cfg.epochs, &mut trace).unwrap();
            (model.params, trace)
        };
        let (pa, ta) = run();
        let (pb, tb) = run();
        assert_eq!(ta, tb);
        for (name, t) in pa.iter() {
            let other = pb.get(name).unwrap();
            for (x, y) in t.data().iter().zip(other.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn pretrain_resume_matches_uninterrupted_run() {
        let cfg = tiny_cfg();
        let images = tiny_images(&cfg, 4);
        // uninterrupted
        let mut full = MaeModel::<f32>::init(cfg.dims(), cfg.seed).unwrap();
        let mut full_opt = Adam::new();
        let mut full_trace = LossTrace::default();
        pretrain_run(&cfg, &images, &mut full, &mut full_opt, 0..cfg.epochs, &mut full_trace).unwrap();
        // first half, through a checkpoint file, then the second half
        let mut half = MaeModel::<f32>::init(cfg.dims(), cfg.seed).unwrap();
        let mut half_opt = Adam::new();
        let mut half_trace = LossTrace::default();
        pretrain_run(&cfg, &images, &mut half, &mut half_opt, 0..2, &mut half_trace).unwrap();
        let ckpt = pack_state(BTreeMap::new(), &half.params, Some(&half_opt)).unwrap();
        let dir = std::env::temp_dir().join("dewarp-train-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("resume.ckpt");
        ckpt.save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        let mut resumed = MaeModel::<f32>::init(cfg.dims(), cfg.seed).unwrap();
        resumed.params = unpack_params(&loaded).unwrap();
        let mut resumed_opt = unpack_optimizer(&loaded).unwrap().unwrap();
        let mut resumed_trace = half_trace.clone();
        pretrain_run(&cfg, &images, &mut resumed, &mut resumed_opt, 2..cfg.epochs, &mut resumed_trace).unwrap();
        assert_eq!(resumed_trace, full_trace);
        for (name, t) in full.params.iter() {
            let other = resumed.params.get(name).unwrap();
            for (x, y) in t.data().iter().zip(other.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn finetune_run_descends_and_respects_freeze() {
        let mut cfg = tiny_cfg();
        cfg.epochs = 6;
        cfg.max_lr = 3e-3;
        let pairs = tiny_pairs(&cfg, 4);
        let mut model = RectModel::<f32>::init(cfg.dims(), cfg.seed).unwrap();
        let before = model.params.clone();
        let mut opt = Adam::new();
        let mut trace = LossTrace::default();
        finetune_run(&cfg, &pairs, &mut model, &mut opt, 0..cfg.epochs, true, &mut trace).unwrap();
        assert!(trace.last().unwrap() < trace.first().unwrap());
        for (name, t) in before.iter() {
            if crate::mae::is_encoder_param(name) {
                assert_eq!(t.data(), model.params.get(name).unwrap().data(), "{name}");
            }
        }
    }

    #[test]
    fn degenerate_budgets_are_rejected() {
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        cfg.batch = 8;
        let images = tiny_images(&cfg, 2);
        let mut model = MaeModel::<f32>::init(cfg.dims(), cfg.seed).unwrap();
        let mut opt = Adam::new();
        let mut trace = LossTrace::default();
        // 1 epoch x 1 step is too short for the schedule
        assert!(pretrain_run(&cfg, &images, &mut model, &mut opt, 0..cfg.epochs, &mut trace).is_err());
        assert!(pretrain_run(&cfg, &[], &mut model, &mut opt, 0..cfg.epochs, &mut trace).is_err());
    }
}
