//! Stage-1 model: masked reconstruction of background-excluded document
//! images. Hidden patches are predicted from visible ones; the loss sees
//! masked-patch pixels only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamMap};
use crate::patch::{make_mask_plan, patchify, unpatchify, MaskPlan, PatchGeometry, PatchSequence};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{
    bind_block, decoder_forward, default_heads, encoder_forward, init_block, sincos_pos_2d, Block, PosTable,
};

/// Shared shape vocabulary for both training stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub h: usize,
    pub w: usize,
    pub p: usize,
    pub d: usize,
    pub k1: usize,
    pub k2: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let g = PatchGeometry::new(self.h, self.w, self.p)?;
        if self.d % 4 != 0 {
            return Err(Error::Validation(format!(
                "model width must be divisible by 4 for positional codes, got {}",
                self.d
            )));
        }
        let heads = self.heads();
        if self.d % heads != 0 {
            return Err(Error::Validation(format!(
                "model width {} not divisible by head count {heads}",
                self.d
            )));
        }
        let _ = g;
        Ok(())
    }

    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry { h: self.h, w: self.w, p: self.p }
    }

    pub fn heads(&self) -> usize {
        default_heads(self.d)
    }

    /// Patch-grid extents.
    pub fn grid(&self) -> (usize, usize) {
        (self.h / self.p, self.w / self.p)
    }

    pub fn n_patches(&self) -> usize {
        self.geometry().n()
    }

    pub fn patch_row_len(&self) -> usize {
        self.p * self.p * 3
    }
}

/// Registers the shared front end: patch embedding and the K1 encoder
/// blocks. Stage 2 reuses these names so encoder weights move between
/// checkpoints unchanged.
pub fn init_encoder_params<S: Scalar>(
    params: &mut ParamMap<S>,
    dims: &ModelDims,
    rng: &mut impl rand::Rng,
) -> Result<()> {
    params.insert("patch_embed.w", Tensor::trunc_normal(&[dims.patch_row_len(), dims.d], 0.02, rng))?;
    params.insert("patch_embed.b", Tensor::zeros(&[dims.d]))?;
    for i in 0..dims.k1 {
        init_block(params, &format!("encoder.block{i}"), dims.d, rng)?;
    }
    Ok(())
}

/// Names of every stage-1-transferable parameter (patch embed + encoder).
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("patch_embed.") || name.starts_with("encoder.")
}

pub struct MaeModel<S: Scalar> {
    pub dims: ModelDims,
    pub params: ParamMap<S>,
    pub pos: PosTable<S>,
}

impl<S: Scalar> MaeModel<S> {
    /// Fresh model: truncated-normal weights, zero biases, and a mask token
    /// that starts exactly at zero.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        init_encoder_params(&mut params, &dims, &mut rng)?;
        params.insert("mask_token", Tensor::zeros(&[dims.d]))?;
        for i in 0..dims.k2 {
            init_block(&mut params, &format!("decoder.block{i}"), dims.d, &mut rng)?;
        }
        params.insert("output_proj.w", Tensor::trunc_normal(&[dims.d, dims.patch_row_len()], 0.02, &mut rng))?;
        params.insert("output_proj.b", Tensor::zeros(&[dims.patch_row_len()]))?;
        let (gh, gw) = dims.grid();
        let pos = sincos_pos_2d(gh, gw, dims.d)?;
        Ok(MaeModel { dims, params, pos })
    }

    fn bind_blocks(&self, bound: &BoundParams, prefix: &str, count: usize) -> Result<Vec<Block>> {
        (0..count)
            .map(|i| bind_block(bound, &format!("{prefix}.block{i}"), self.dims.d, self.dims.heads()))
            .collect()
    }

    /// Differentiable forward to predicted patch rows `[N, P^2*3]`.
    /// `patches` must already be on the tape (constant input rows).
    pub fn forward_rows(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        patches: Var,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let n = self.dims.n_patches();
        if plan.n() != n {
            return Err(Error::Geometry(format!(
                "mask plan covers {} patches, model expects {n}",
                plan.n()
            )));
        }
        let embed_w = bound.var("patch_embed.w")?;
        let embed_b = bound.var("patch_embed.b")?;
        let tokens_all = tape.linear(patches, embed_w, embed_b)?;
        let visible = tape.gather_rows(tokens_all, plan.keep.clone())?;
        let enc_blocks = self.bind_blocks(bound, "encoder", self.dims.k1)?;
        let encoded = encoder_forward(tape, visible, &self.pos, plan, &enc_blocks)?;
        let token = bound.var("mask_token")?;
        let full = tape.restore_rows(encoded, token, plan.keep.clone(), plan.masked.clone())?;
        let dec_blocks = self.bind_blocks(bound, "decoder", self.dims.k2)?;
        let decoded = decoder_forward(tape, full, &self.pos, &dec_blocks)?;
        let out_w = bound.var("output_proj.w")?;
        let out_b = bound.var("output_proj.b")?;
        tape.linear(decoded, out_w, out_b)
    }

    /// Inference-only reconstruction of a whole image.
    pub fn forward_image(&self, image: &Tensor<S>, plan: &MaskPlan) -> Result<Tensor<S>> {
        self.check_image(image)?;
        let seq = patchify(image, self.dims.p)?;
        let mut tape = Tape::new();
        // bound as constants: no gradient bookkeeping on the inference path
        let bound = BoundParams::bind(&mut tape, &self.params, |_| true);
        let patches = tape.constant(seq.rows.clone());
        let rows = self.forward_rows(&mut tape, &bound, patches, plan)?;
        unpatchify(&PatchSequence { geom: seq.geom, rows: tape.value(rows).clone() })
    }

    fn check_image(&self, image: &Tensor<S>) -> Result<()> {
        if image.shape() != [self.dims.h, self.dims.w, 3] {
            return Err(Error::Geometry(format!(
                "image shape {:?} does not match model geometry [{},{},3]",
                image.shape(),
                self.dims.h,
                self.dims.w
            )));
        }
        Ok(())
    }
}

/// Masked-patch reconstruction error between two images: mean squared
/// error over the pixels of masked patches only (n = N_m * P^2 * 3). The
/// flag reports the degenerate no-masked-patches case, where the loss is
/// defined as zero.
pub fn pretrain_loss<S: Scalar>(
    reconstructed: &Tensor<S>,
    target: &Tensor<S>,
    p: usize,
    plan: &MaskPlan,
) -> Result<(S, bool)> {
    let rec = patchify(reconstructed, p)?;
    let tgt = patchify(target, p)?;
    if rec.geom != tgt.geom {
        return Err(Error::Geometry("reconstruction and target geometry differ".into()));
    }
    if plan.n() != rec.geom.n() {
        return Err(Error::Geometry(format!(
            "mask plan covers {} patches, images have {}",
            plan.n(),
            rec.geom.n()
        )));
    }
    let d = rec.geom.row_len();
    let n = plan.masked.len() * d;
    if n == 0 {
        return Ok((S::zero(), true));
    }
    let mut sum = S::zero();
    for &r in plan.masked.iter() {
        for j in r * d..(r + 1) * d {
            let e = rec.rows.data()[j] - tgt.rows.data()[j];
            sum = sum + e * e;
        }
    }
    Ok((sum * S::from_f64(1.0 / n as f64), false))
}

/// One pre-training batch: background-excluded images plus their plans.
pub struct PretrainBatch<S: Scalar> {
    pub images: Vec<Tensor<S>>,
    pub plans: Vec<MaskPlan>,
}

impl<S: Scalar> PretrainBatch<S> {
    pub fn new(images: Vec<Tensor<S>>, plans: Vec<MaskPlan>) -> Result<Self> {
        if images.is_empty() || images.len() != plans.len() {
            return Err(Error::Contract(format!(
                "batch needs matched non-empty images/plans, got {}/{}",
                images.len(),
                plans.len()
            )));
        }
        let shape = images[0].shape().to_vec();
        if images.iter().any(|i| i.shape() != shape) {
            return Err(Error::Contract("batch images must share geometry".into()));
        }
        let r = plans[0].ratio;
        if plans.iter().any(|p| p.ratio != r) {
            return Err(Error::Contract("batch plans must share the mask ratio".into()));
        }
        Ok(PretrainBatch { images, plans })
    }

    /// Convenience constructor drawing per-sample plans from one base seed.
    pub fn with_plans_from_seed(images: Vec<Tensor<S>>, n: usize, r: f64, seed: u64) -> Result<Self> {
        let plans = (0..images.len())
            .map(|i| make_mask_plan(n, r, seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(images, plans)
    }
}

/// One optimization step over a batch: forward each sample, average the
/// masked losses, backprop, Adam-update at `lr`. Returns the pre-update
/// loss. `step` only labels errors.
pub fn pretrain_step<S: Scalar>(
    model: &mut MaeModel<S>,
    batch: &PretrainBatch<S>,
    opt: &mut crate::optim::Adam<S>,
    lr: f64,
    step: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind_all(&mut tape, &model.params);
    let mut losses = Vec::with_capacity(batch.images.len());
    for (image, plan) in batch.images.iter().zip(&batch.plans) {
        model.check_image(image)?;
        let seq = patchify(image, model.dims.p)?;
        let patches = tape.constant(seq.rows.clone());
        let pred = model.forward_rows(&mut tape, &bound, patches, plan)?;
        let target = tape.constant(seq.rows);
        losses.push(tape.masked_mse(pred, target, plan.masked.clone())?);
    }
    let total = tape.add_n(&losses)?;
    let loss = tape.scale(total, S::from_f64(1.0 / losses.len() as f64));
    let loss_value = tape.value(loss).data()[0].as_f64();
    if !loss_value.is_finite() {
        return Err(Error::Poisoned(format!(
            "pre-training loss became non-finite at step {step}"
        )));
    }
    let mut grads = tape.backward(loss)?;
    let collected = bound.collect_grads(&mut grads);
    opt.step(&mut model.params, &collected, lr)
        .map_err(|e| match e {
            Error::Poisoned(msg) => Error::Poisoned(format!("{msg} (step {step})")),
            other => other,
        })?;
    Ok(loss_value)
}

/// The three panels of a reconstruction demo.
pub struct ReconstructionDemo<S: Scalar> {
    /// Input with masked patches grayed out.
    pub masked: Tensor<S>,
    /// Visible patches copied from the input, masked patches predicted.
    pub composite: Tensor<S>,
    /// The input itself.
    pub target: Tensor<S>,
}

/// Runs the model once and assembles the masked/composite/target triple.
/// Visible patches of the composite are copied bit-exactly from the input.
pub fn reconstruct_demo<S: Scalar>(
    model: &MaeModel<S>,
    image: &Tensor<S>,
    plan: &MaskPlan,
) -> Result<ReconstructionDemo<S>> {
    let reconstructed = model.forward_image(image, plan)?;
    let seq = patchify(image, model.dims.p)?;
    let pred_seq = patchify(&reconstructed, model.dims.p)?;
    let d = seq.geom.row_len();
    let gray = S::from_f64(0.5);
    let mut masked_rows = seq.rows.clone();
    let mut composite_rows = seq.rows.clone();
    for &r in plan.masked.iter() {
        for j in r * d..(r + 1) * d {
            masked_rows.data_mut()[j] = gray;
            composite_rows.data_mut()[j] = pred_seq.rows.data()[j];
        }
    }
    Ok(ReconstructionDemo {
        masked: unpatchify(&PatchSequence { geom: seq.geom, rows: masked_rows })?,
        composite: unpatchify(&PatchSequence { geom: seq.geom, rows: composite_rows })?,
        target: image.clone(),
    })
}
