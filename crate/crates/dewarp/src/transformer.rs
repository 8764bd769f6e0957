//! Sine-cosine positional tables and pre-norm attention blocks.
//!
//! The same block stack backs the distortion encoder and both decoders;
//! widths and depths come from the run configuration.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamMap};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Shared layer-norm epsilon for every block.
pub const LN_EPS: f64 = 1e-6;

/// Heads scale with width: one per 64 channels, never fewer than two.
pub fn default_heads(d: usize) -> usize {
    (d / 64).max(2)
}

/// Fixed positional table over a patch grid. Never trained.
#[derive(Debug, Clone)]
pub struct PosTable<S: Scalar> {
    pub grid: (usize, usize),
    /// `[grid_h * grid_w, D]`
    pub table: Tensor<S>,
}

/// Builds the 2-D sine-cosine table: each entry concatenates the 1-D code
/// of its row coordinate with the 1-D code of its column coordinate, D/2
/// wide each, each half laid out as a sin block then a cos block with
/// frequency base 10000.
pub fn sincos_pos_2d<S: Scalar>(grid_h: usize, grid_w: usize, d: usize) -> Result<PosTable<S>> {
    if d % 4 != 0 {
        return Err(Error::Contract(format!(
            "positional width must be divisible by 4 (row/col, sin/cos), got {d}"
        )));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::Contract(format!("positional grid must be non-empty, got {grid_h}x{grid_w}")));
    }
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter).map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64)).collect();
    let mut data = Vec::with_capacity(grid_h * grid_w * d);
    for r in 0..grid_h {
        for c in 0..grid_w {
            for &coord in &[r as f64, c as f64] {
                for &w in &omega {
                    data.push(S::from_f64((coord * w).sin()));
                }
                for &w in &omega {
                    data.push(S::from_f64((coord * w).cos()));
                }
            }
        }
    }
    Ok(PosTable {
        grid: (grid_h, grid_w),
        table: Tensor::new(vec![grid_h * grid_w, d], data)?,
    })
}

/// Tape handles for one attention block's weights.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub d: usize,
    pub heads: usize,
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
    mlp1_w: Var,
    mlp1_b: Var,
    mlp2_w: Var,
    mlp2_b: Var,
    norm1_g: Var,
    norm1_b: Var,
    norm2_g: Var,
    norm2_b: Var,
}

/// Parameter names for one block under `prefix`, e.g. `encoder.block0`.
fn block_names(prefix: &str) -> [String; 12] {
    [
        format!("{prefix}.qkv.w"),
        format!("{prefix}.qkv.b"),
        format!("{prefix}.proj.w"),
        format!("{prefix}.proj.b"),
        format!("{prefix}.mlp1.w"),
        format!("{prefix}.mlp1.b"),
        format!("{prefix}.mlp2.w"),
        format!("{prefix}.mlp2.b"),
        format!("{prefix}.norm1.g"),
        format!("{prefix}.norm1.b"),
        format!("{prefix}.norm2.g"),
        format!("{prefix}.norm2.b"),
    ]
}

/// Registers one block's parameters: truncated-normal weights (std 0.02,
/// cut at two sigma), zero biases, unit norm gains.
pub fn init_block<S: Scalar>(
    params: &mut ParamMap<S>,
    prefix: &str,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let [qw, qb, pw, pb, m1w, m1b, m2w, m2b, n1g, n1b, n2g, n2b] = block_names(prefix);
    let std = 0.02;
    params.insert(qw, Tensor::trunc_normal(&[d, 3 * d], std, rng))?;
    params.insert(qb, Tensor::zeros(&[3 * d]))?;
    params.insert(pw, Tensor::trunc_normal(&[d, d], std, rng))?;
    params.insert(pb, Tensor::zeros(&[d]))?;
    params.insert(m1w, Tensor::trunc_normal(&[d, 4 * d], std, rng))?;
    params.insert(m1b, Tensor::zeros(&[4 * d]))?;
    params.insert(m2w, Tensor::trunc_normal(&[4 * d, d], std, rng))?;
    params.insert(m2b, Tensor::zeros(&[d]))?;
    params.insert(n1g, Tensor::full(&[d], S::one()))?;
    params.insert(n1b, Tensor::zeros(&[d]))?;
    params.insert(n2g, Tensor::full(&[d], S::one()))?;
    params.insert(n2b, Tensor::zeros(&[d]))?;
    Ok(())
}

/// Looks up one block's bound vars. `d`/`heads` must match what was
/// registered; the head count must divide the width.
pub fn bind_block(bound: &BoundParams, prefix: &str, d: usize, heads: usize) -> Result<Block> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Dim(format!("head count {heads} must divide width {d}")));
    }
    let [qw, qb, pw, pb, m1w, m1b, m2w, m2b, n1g, n1b, n2g, n2b] = block_names(prefix);
    Ok(Block {
        d,
        heads,
        qkv_w: bound.var(&qw)?,
        qkv_b: bound.var(&qb)?,
        proj_w: bound.var(&pw)?,
        proj_b: bound.var(&pb)?,
        mlp1_w: bound.var(&m1w)?,
        mlp1_b: bound.var(&m1b)?,
        mlp2_w: bound.var(&m2w)?,
        mlp2_b: bound.var(&m2b)?,
        norm1_g: bound.var(&n1g)?,
        norm1_b: bound.var(&n1b)?,
        norm2_g: bound.var(&n2g)?,
        norm2_b: bound.var(&n2b)?,
    })
}

/// Pre-norm residual block: `x + MHSA(LN(x))`, then `+ MLP(LN(.))`.
pub fn block_forward<S: Scalar>(tape: &mut Tape<S>, x: Var, blk: &Block) -> Result<Var> {
    let d = blk.d;
    if tape.value(x).cols() != d {
        return Err(Error::Dim(format!(
            "block expects width {d}, tokens have {}",
            tape.value(x).cols()
        )));
    }
    let eps = S::from_f64(LN_EPS);
    let dh = d / blk.heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());

    let normed = tape.layer_norm(x, blk.norm1_g, blk.norm1_b, eps)?;
    let qkv = tape.linear(normed, blk.qkv_w, blk.qkv_b)?;
    let mut ctx = Vec::with_capacity(blk.heads);
    for h in 0..blk.heads {
        let q = tape.col_slice(qkv, h * dh, dh)?;
        let k = tape.col_slice(qkv, d + h * dh, dh)?;
        let v = tape.col_slice(qkv, 2 * d + h * dh, dh)?;
        let scores = tape.matmul_nt(q, k)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scaled)?;
        ctx.push(tape.matmul(attn, v)?);
    }
    let merged = tape.concat_cols(&ctx)?;
    let attn_out = tape.linear(merged, blk.proj_w, blk.proj_b)?;
    let z = tape.add(x, attn_out)?;

    let normed2 = tape.layer_norm(z, blk.norm2_g, blk.norm2_b, eps)?;
    let hidden = tape.linear(normed2, blk.mlp1_w, blk.mlp1_b)?;
    let act = tape.gelu(hidden);
    let mlp_out = tape.linear(act, blk.mlp2_w, blk.mlp2_b)?;
    tape.add(z, mlp_out)
}

pub fn apply_blocks<S: Scalar>(tape: &mut Tape<S>, x: Var, blocks: &[Block]) -> Result<Var> {
    let mut cur = x;
    for blk in blocks {
        cur = block_forward(tape, cur, blk)?;
    }
    Ok(cur)
}

/// Encoder stack over visible tokens: adds positional rows gathered at the
/// plan's kept indices, then runs the blocks.
pub fn encoder_forward<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: Var,
    pos: &PosTable<S>,
    plan: &crate::patch::MaskPlan,
    blocks: &[Block],
) -> Result<Var> {
    let n = pos.table.rows();
    if plan.n() != n {
        return Err(Error::Contract(format!(
            "mask plan covers {} patches, positional table has {n}",
            plan.n()
        )));
    }
    if tape.value(tokens).rows() != plan.keep.len() {
        return Err(Error::Contract(format!(
            "encoder got {} tokens but plan keeps {}",
            tape.value(tokens).rows(),
            plan.keep.len()
        )));
    }
    let d = pos.table.cols();
    let mut rows = Vec::with_capacity(plan.keep.len() * d);
    for &i in plan.keep.iter() {
        rows.extend_from_slice(&pos.table.data()[i * d..(i + 1) * d]);
    }
    let gathered = tape.constant(Tensor::new(vec![plan.keep.len(), d], rows)?);
    let x = tape.add(tokens, gathered)?;
    apply_blocks(tape, x, blocks)
}

/// Decoder stack over a full-length token sequence: adds the whole
/// positional table, then runs the blocks.
pub fn decoder_forward<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: Var,
    pos: &PosTable<S>,
    blocks: &[Block],
) -> Result<Var> {
    if tape.value(tokens).rows() != pos.table.rows() {
        return Err(Error::Contract(format!(
            "decoder got {} tokens, positional table has {}",
            tape.value(tokens).rows(),
            pos.table.rows()
        )));
    }
    let p = tape.constant(pos.table.clone());
    let x = tape.add(tokens, p)?;
    apply_blocks(tape, x, blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_err, numeric_grad};
    use crate::patch::make_mask_plan;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heads_scale_with_width() {
        assert_eq!(default_heads(512), 8);
        assert_eq!(default_heads(128), 2);
        assert_eq!(default_heads(64), 2);
    }

    #[test]
    fn origin_row_is_zeros_then_ones() {
        let pos = sincos_pos_2d::<f64>(3, 3, 16).unwrap();
        let row = &pos.table.data()[..16];
        // layout: row-coord sins, row-coord coss, col-coord sins, col-coord coss
        for &v in &row[0..4] {
            assert_eq!(v, 0.0);
        }
        for &v in &row[4..8] {
            assert_eq!(v, 1.0);
        }
        for &v in &row[8..12] {
            assert_eq!(v, 0.0);
        }
        for &v in &row[12..16] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn every_entry_has_norm_sqrt_half_d() {
        let d = 32;
        let pos = sincos_pos_2d::<f64>(5, 7, d).unwrap();
        for row in pos.table.data().chunks_exact(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_relative_eq!(norm, (d as f64 / 2.0).sqrt(), epsilon = 1e-9);
        }
    }

    #[test]
    fn all_grid_positions_are_distinct_at_18x18() {
        let d = 64;
        let pos = sincos_pos_2d::<f64>(18, 18, d).unwrap();
        let rows: Vec<&[f64]> = pos.table.data().chunks_exact(d).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i], rows[j], "rows {i} and {j} collide");
            }
        }
    }

    #[test]
    fn width_not_divisible_by_four_is_rejected() {
        assert!(sincos_pos_2d::<f64>(2, 2, 6).is_err());
    }

    fn build_block(d: usize, seed: u64) -> ParamMap<f64> {
        let mut params = ParamMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_block(&mut params, "blk", d, &mut rng).unwrap();
        params
    }

    #[test]
    fn zeroed_residual_branches_make_identity() {
        let d = 16;
        let mut params = build_block(d, 1);
        params.set("blk.proj.w", Tensor::zeros(&[d, d])).unwrap();
        params.set("blk.mlp2.w", Tensor::zeros(&[4 * d, d])).unwrap();
        let x0 = Tensor::from_fn(&[5, d], |i| ((i * 13 + 5) % 23) as f64 * 0.1 - 1.0);
        let mut tape = Tape::new();
        let bound = BoundParams::bind_all(&mut tape, &params);
        let blk = bind_block(&bound, "blk", d, 2).unwrap();
        let x = tape.constant(x0.clone());
        let y = block_forward(&mut tape, x, &blk).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x0.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let d = 16;
        let params = build_block(d, 2);
        let t = 5;
        let x0 = Tensor::from_fn(&[t, d], |i| ((i * 7 + 3) % 19) as f64 * 0.17 - 1.5);
        let perm = [3usize, 0, 4, 2, 1];
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::new();
            let bound = BoundParams::bind_all(&mut tape, &params);
            let blk = bind_block(&bound, "blk", d, 2).unwrap();
            let x = tape.constant(input.clone());
            let y = block_forward(&mut tape, x, &blk).unwrap();
            tape.value(y).clone()
        };
        let y_plain = run(&x0);
        let permuted = Tensor::from_fn(&[t, d], |i| x0.at2(perm[i / d], i % d));
        let y_perm = run(&permuted);
        for r in 0..t {
            for c in 0..d {
                assert_relative_eq!(y_perm.at2(r, c), y_plain.at2(perm[r], c), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        // replicate the in-block score path and inspect the probabilities
        let d = 16;
        let params = build_block(d, 3);
        let x0 = Tensor::from_fn(&[6, d], |i| ((i * 11 + 1) % 13) as f64 * 0.2 - 1.2);
        let mut tape = Tape::new();
        let bound = BoundParams::bind_all(&mut tape, &params);
        let blk = bind_block(&bound, "blk", d, 2).unwrap();
        let x = tape.constant(x0);
        let eps = 1e-6;
        let normed = tape.layer_norm(x, blk.norm1_g, blk.norm1_b, eps).unwrap();
        let qkv = tape.linear(normed, blk.qkv_w, blk.qkv_b).unwrap();
        let dh = d / 2;
        for h in 0..2 {
            let q = tape.col_slice(qkv, h * dh, dh).unwrap();
            let k = tape.col_slice(qkv, d + h * dh, dh).unwrap();
            let scores = tape.matmul_nt(q, k).unwrap();
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax_rows(scaled).unwrap();
            for row in tape.value(attn).data().chunks_exact(6) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn empty_encoder_stack_adds_gathered_positions() {
        let d = 8;
        let pos = sincos_pos_2d::<f64>(2, 2, d).unwrap();
        let plan = make_mask_plan(4, 0.5, 9).unwrap();
        let nv = plan.keep.len();
        let tokens0 = Tensor::from_fn(&[nv, d], |i| i as f64 * 0.01);
        let mut tape = Tape::new();
        let tokens = tape.constant(tokens0.clone());
        let out = encoder_forward(&mut tape, tokens, &pos, &plan, &[]).unwrap();
        for (j, &i) in plan.keep.iter().enumerate() {
            for c in 0..d {
                assert_relative_eq!(
                    tape.value(out).at2(j, c),
                    tokens0.at2(j, c) + pos.table.at2(i, c)
                );
            }
        }
    }

    #[test]
    fn empty_decoder_stack_adds_full_table() {
        let d = 8;
        let pos = sincos_pos_2d::<f64>(2, 3, d).unwrap();
        let tokens0 = Tensor::from_fn(&[6, d], |i| (i as f64).cos());
        let mut tape = Tape::new();
        let tokens = tape.constant(tokens0.clone());
        let out = decoder_forward(&mut tape, tokens, &pos, &[]).unwrap();
        for i in 0..6 {
            for c in 0..d {
                assert_relative_eq!(tape.value(out).at2(i, c), tokens0.at2(i, c) + pos.table.at2(i, c));
            }
        }
    }

    #[test]
    fn mismatched_plan_and_table_is_rejected() {
        let d = 8;
        let pos = sincos_pos_2d::<f64>(2, 2, d).unwrap();
        let plan = make_mask_plan(9, 0.5, 0).unwrap();
        let mut tape = Tape::new();
        let tokens = tape.constant(Tensor::zeros(&[5, d]));
        assert!(encoder_forward(&mut tape, tokens, &pos, &plan, &[]).is_err());
    }

    #[test]
    fn tiny_block_passes_finite_difference_check() {
        let d = 8;
        let params = build_block(d, 4);
        let x0 = Tensor::from_fn(&[3, d], |i| ((i * 5 + 2) % 11) as f64 * 0.15 - 0.75);
        let loss_of = |p: &ParamMap<f64>, input: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let bound = BoundParams::bind_all(&mut tape, p);
            let blk = bind_block(&bound, "blk", d, 2).unwrap();
            let x = tape.constant(input.clone());
            let y = block_forward(&mut tape, x, &blk).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum_all(sq);
            tape.value(loss).data()[0]
        };
        // analytic grads once
        let mut tape = Tape::new();
        let bound = BoundParams::bind_all(&mut tape, &params);
        let blk = bind_block(&bound, "blk", d, 2).unwrap();
        let x = tape.constant(x0.clone());
        let y = block_forward(&mut tape, x, &blk).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum_all(sq);
        let mut grads = tape.backward(loss).unwrap();
        let analytic = bound.collect_grads(&mut grads);
        assert_eq!(analytic.len(), params.len(), "every weight should get a gradient");
        for (name, g) in &analytic {
            let numeric = numeric_grad(
                |t| {
                    let mut probe = params.clone();
                    probe.set(name, t.clone()).unwrap();
                    Ok(loss_of(&probe, &x0))
                },
                params.get(name).unwrap(),
                1e-5,
            )
            .unwrap();
            let err = max_rel_err(g, &numeric);
            assert!(err < 1e-3, "{name}: rel err {err}");
        }
    }
}
