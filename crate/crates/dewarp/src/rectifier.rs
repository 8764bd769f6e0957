//! Stage-2 model: flow-field rectification of warped documents.
//!
//! The stage-1 encoder (same tensor names, loadable from its checkpoints)
//! feeds a fresh decoder whose tokens are projected to a coarse per-patch
//! displacement field, upsampled to full resolution by learned convex
//! combinations, and finally used to resample the input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mae::{init_encoder_params, is_encoder_param, ModelDims};
use crate::params::{BoundParams, ParamMap};
use crate::patch::patchify;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{bind_block, decoder_forward, init_block, sincos_pos_2d, Block, PosTable};

/// Per-pixel displacement field `(du, dv)` in pixels: the rectified image
/// reads its `(u,v)` pixel from source coordinate `(u+du, v+dv)`.
#[derive(Debug, Clone)]
pub struct FlowField<S: Scalar> {
    pub disp: Tensor<S>,
}

impl<S: Scalar> FlowField<S> {
    pub fn new(disp: Tensor<S>) -> Result<Self> {
        match disp.shape() {
            [_, _, 2] => {}
            s => return Err(Error::Dim(format!("flow field must be [H,W,2], got {s:?}"))),
        }
        if !disp.all_finite() {
            return Err(Error::Poisoned("flow field contains non-finite values".into()));
        }
        Ok(FlowField { disp })
    }

    pub fn h(&self) -> usize {
        self.disp.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.disp.shape()[1]
    }
}

/// Zeroes non-document pixels: every channel is multiplied by the mask.
pub fn background_exclude<S: Scalar>(image: &Tensor<S>, mask: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::Geometry(format!("image must be [H,W,3], got {s:?}"))),
    };
    if mask.shape() != [h, w, 1] {
        return Err(Error::Geometry(format!(
            "mask shape {:?} does not match image [{h},{w},1]",
            mask.shape()
        )));
    }
    if mask.data().iter().any(|&v| v < S::zero() || v > S::one()) {
        return Err(Error::Validation("mask values must lie in [0,1]".into()));
    }
    let mut out = image.clone();
    for (i, px) in out.data_mut().chunks_exact_mut(3).enumerate() {
        let m = mask.data()[i];
        for c in px {
            *c = *c * m;
        }
    }
    Ok(out)
}

pub struct RectModel<S: Scalar> {
    pub dims: ModelDims,
    pub params: ParamMap<S>,
    pub pos: PosTable<S>,
}

impl<S: Scalar> RectModel<S> {
    /// Fresh model: encoder and decoder truncated-normal, flow head exactly
    /// zero so the initial prediction is the identity warp.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        init_encoder_params(&mut params, &dims, &mut rng)?;
        for i in 0..dims.k2 {
            init_block(&mut params, &format!("rect_decoder.block{i}"), dims.d, &mut rng)?;
        }
        params.insert("flow_head.w", Tensor::zeros(&[dims.d, 2]))?;
        params.insert("flow_head.b", Tensor::zeros(&[2]))?;
        let nine = dims.p * dims.p * 9;
        params.insert("upsample_head.w", Tensor::trunc_normal(&[dims.d, nine], 0.02, &mut rng))?;
        params.insert("upsample_head.b", Tensor::zeros(&[nine]))?;
        let (gh, gw) = dims.grid();
        let pos = sincos_pos_2d(gh, gw, dims.d)?;
        Ok(RectModel { dims, params, pos })
    }

    /// Replaces the encoder-side weights (patch embed + encoder blocks)
    /// with values from a stage-1 parameter set.
    pub fn load_encoder_from(&mut self, source: &ParamMap<S>) -> Result<()> {
        let names: Vec<String> = self
            .params
            .names()
            .filter(|n| is_encoder_param(n))
            .map(String::from)
            .collect();
        for name in names {
            let incoming = source.get(&name).map_err(|_| {
                Error::Checkpoint(format!("source parameters lack encoder tensor {name:?}"))
            })?;
            self.params.set(&name, incoming.clone()).map_err(|_| {
                Error::Checkpoint(format!(
                    "encoder tensor {name:?} has shape {:?}, expected {:?}",
                    incoming.shape(),
                    self.params.get(&name).map(|t| t.shape().to_vec()).unwrap_or_default()
                ))
            })?;
        }
        Ok(())
    }

    fn bind_blocks(&self, bound: &BoundParams, prefix: &str, count: usize) -> Result<Vec<Block>> {
        (0..count)
            .map(|i| bind_block(bound, &format!("{prefix}.block{i}"), self.dims.d, self.dims.heads()))
            .collect()
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

    /// Differentiable trunk: all-patch encoding (no masking in this stage),
    /// rectification decoding, and the per-token flow projection. Returns
    /// the coarse displacement `[H/P, W/P, 2]` and the decoder features
    /// `[N, D]` that also drive the upsampler.
    pub fn coarse_forward(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        patches: Var,
    ) -> Result<(Var, Var)> {
        let n = self.dims.n_patches();
        if tape.value(patches).rows() != n {
            return Err(Error::Geometry(format!(
                "expected {n} patch rows, got {}",
                tape.value(patches).rows()
            )));
        }
        let embed_w = bound.var("patch_embed.w")?;
        let embed_b = bound.var("patch_embed.b")?;
        let tokens = tape.linear(patches, embed_w, embed_b)?;
        let enc_blocks = self.bind_blocks(bound, "encoder", self.dims.k1)?;
        // all tokens are visible here, so the encoder takes the full table
        let encoded = decoder_forward(tape, tokens, &self.pos, &enc_blocks)?;
        let dec_blocks = self.bind_blocks(bound, "rect_decoder", self.dims.k2)?;
        let feats = decoder_forward(tape, encoded, &self.pos, &dec_blocks)?;
        let fw = bound.var("flow_head.w")?;
        let fb = bound.var("flow_head.b")?;
        let flow_tokens = tape.linear(feats, fw, fb)?;
        let (gh, gw) = self.dims.grid();
        let coarse = tape.reshape(flow_tokens, &[gh, gw, 2])?;
        Ok((coarse, feats))
    }

    /// Learned convex upsampling: per coarse cell the features emit
    /// `P*P*9` logits, softmaxed over the 3x3 neighborhood axis; each
    /// full-res pixel mixes its cell's (clamped) neighbors and the result
    /// is scaled by P to convert cell units to pixels.
    pub fn convex_upsample(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        coarse: Var,
        feats: Var,
    ) -> Result<Var> {
        let n = self.dims.n_patches();
        if tape.value(feats).rows() != n {
            return Err(Error::Dim(format!(
                "upsampler expects {n} feature rows, got {}",
                tape.value(feats).rows()
            )));
        }
        let uw = bound.var("upsample_head.w")?;
        let ub = bound.var("upsample_head.b")?;
        let logits = tape.linear(feats, uw, ub)?;
        let p = self.dims.p;
        let grouped = tape.reshape(logits, &[n * p * p, 9])?;
        let weights = tape.softmax_rows(grouped)?;
        tape.convex_combine(weights, coarse, p)
    }

    /// Full inference: background exclusion, flow prediction, and the
    /// bilinear resampling of the excluded image.
    pub fn rectify(&self, image: &Tensor<S>, mask: &Tensor<S>) -> Result<(Tensor<S>, FlowField<S>)> {
        self.check_image(image)?;
        let excluded = background_exclude(image, mask)?;
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params, |_| true);
        let seq = patchify(&excluded, self.dims.p)?;
        let patches = tape.constant(seq.rows);
        let (coarse, feats) = self.coarse_forward(&mut tape, &bound, patches)?;
        let flow = self.convex_upsample(&mut tape, &bound, coarse, feats)?;
        let src = tape.constant(excluded);
        let warped = tape.bilinear_warp(src, flow)?;
        let flow_field = FlowField::new(tape.value(flow).clone())?;
        Ok((tape.value(warped).clone(), flow_field))
    }
}

/// Mean absolute flow error over all 2*H*W coordinates.
pub fn finetune_loss<S: Scalar>(predicted: &FlowField<S>, gt: &FlowField<S>) -> Result<S> {
    if predicted.disp.shape() != gt.disp.shape() {
        return Err(Error::Geometry(format!(
            "flow geometries differ: {:?} vs {:?}",
            predicted.disp.shape(),
            gt.disp.shape()
        )));
    }
    let mut sum = S::zero();
    for (&a, &b) in predicted.disp.data().iter().zip(gt.disp.data()) {
        sum = sum + (a - b).abs();
    }
    Ok(sum * S::from_f64(1.0 / predicted.disp.numel() as f64))
}

/// One fine-tuning batch: background-excluded images with their
/// ground-truth flows.
pub struct FinetuneBatch<S: Scalar> {
    pub images: Vec<Tensor<S>>,
    pub flows: Vec<FlowField<S>>,
}

impl<S: Scalar> FinetuneBatch<S> {
    pub fn new(images: Vec<Tensor<S>>, flows: Vec<FlowField<S>>) -> Result<Self> {
        if images.is_empty() || images.len() != flows.len() {
            return Err(Error::Contract(format!(
                "batch needs matched non-empty images/flows, got {}/{}",
                images.len(),
                flows.len()
            )));
        }
        let shape = images[0].shape().to_vec();
        if images.iter().any(|i| i.shape() != shape) {
            return Err(Error::Contract("batch images must share geometry".into()));
        }
        if flows
            .iter()
            .any(|f| f.disp.shape() != [shape[0], shape[1], 2])
        {
            return Err(Error::Contract("batch flows must match image geometry".into()));
        }
        Ok(FinetuneBatch { images, flows })
    }
}

/// One optimization step against ground-truth flow. With `freeze_encoder`
/// the patch embedding and encoder blocks are bound as constants, so they
/// receive no gradient and cannot move. Returns the pre-update loss.
pub fn finetune_step<S: Scalar>(
    model: &mut RectModel<S>,
    batch: &FinetuneBatch<S>,
    opt: &mut crate::optim::Adam<S>,
    lr: f64,
    freeze_encoder: bool,
    step: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &model.params, |name| {
        freeze_encoder && is_encoder_param(name)
    });
    let mut losses = Vec::with_capacity(batch.images.len());
    for (image, gt) in batch.images.iter().zip(&batch.flows) {
        model.check_image(image)?;
        let seq = patchify(image, model.dims.p)?;
        let patches = tape.constant(seq.rows);
        let (coarse, feats) = model.coarse_forward(&mut tape, &bound, patches)?;
        let flow = model.convex_upsample(&mut tape, &bound, coarse, feats)?;
        let target = tape.constant(gt.disp.clone());
        losses.push(tape.l1_mean(flow, target)?);
    }
    let total = tape.add_n(&losses)?;
    let loss = tape.scale(total, S::from_f64(1.0 / losses.len() as f64));
    let loss_value = tape.value(loss).data()[0].as_f64();
    if !loss_value.is_finite() {
        return Err(Error::Poisoned(format!(
            "fine-tuning loss became non-finite at step {step}"
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
