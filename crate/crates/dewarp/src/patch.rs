//! Patch layout and the random-masking protocol.
//!
//! Images are `[H,W,3]` row-major with interleaved channels. A patch
//! sequence stores one patch per row in raster patch order; within a row,
//! pixels are raster-ordered with channels interleaved.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub h: usize,
    pub w: usize,
    pub p: usize,
}

impl PatchGeometry {
    pub fn new(h: usize, w: usize, p: usize) -> Result<Self> {
        if p == 0 || h == 0 || w == 0 {
            return Err(Error::Geometry(format!("extents must be positive: H={h}, W={w}, P={p}")));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::Geometry(format!(
                "patch size must divide both extents: H={h}, W={w}, P={p}"
            )));
        }
        Ok(PatchGeometry { h, w, p })
    }

    /// Patch count N = H·W/P².
    pub fn n(&self) -> usize {
        (self.h / self.p) * (self.w / self.p)
    }

    /// Patch-grid extents (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (self.h / self.p, self.w / self.p)
    }

    /// Scalars per patch row.
    pub fn row_len(&self) -> usize {
        self.p * self.p * 3
    }
}

#[derive(Debug, Clone)]
pub struct PatchSequence<S: Scalar> {
    pub geom: PatchGeometry,
    /// `[N, P²·3]`
    pub rows: Tensor<S>,
}

/// Splits an `[H,W,3]` image into non-overlapping P×P patches.
pub fn patchify<S: Scalar>(image: &Tensor<S>, p: usize) -> Result<PatchSequence<S>> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::Geometry(format!("patchify expects [H,W,3], got {s:?}"))),
    };
    let geom = PatchGeometry::new(h, w, p)?;
    let (gh, gw) = geom.grid();
    let src = image.data();
    let mut data = Vec::with_capacity(geom.n() * geom.row_len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                let y = gy * p + py;
                let x0 = gx * p;
                data.extend_from_slice(&src[(y * w + x0) * 3..(y * w + x0 + p) * 3]);
            }
        }
    }
    let rows = Tensor::new(vec![geom.n(), geom.row_len()], data)?;
    Ok(PatchSequence { geom, rows })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(seq: &PatchSequence<S>) -> Result<Tensor<S>> {
    let geom = seq.geom;
    if seq.rows.shape() != [geom.n(), geom.row_len()] {
        return Err(Error::Geometry(format!(
            "patch rows {:?} do not match geometry (N={}, row={})",
            seq.rows.shape(),
            geom.n(),
            geom.row_len()
        )));
    }
    let (gh, gw) = geom.grid();
    let p = geom.p;
    let (h, w) = (geom.h, geom.w);
    let src = seq.rows.data();
    let mut data = vec![S::zero(); h * w * 3];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &src[(gy * gw + gx) * geom.row_len()..][..geom.row_len()];
            for py in 0..p {
                let y = gy * p + py;
                let x0 = gx * p;
                data[(y * w + x0) * 3..(y * w + x0 + p) * 3]
                    .copy_from_slice(&row[py * p * 3..(py + 1) * p * 3]);
            }
        }
    }
    Tensor::new(vec![h, w, 3], data)
}

/// Which patches stay visible and which are hidden, for one sample.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub ratio: f64,
    /// Visible patch indices, ascending.
    pub keep: Rc<Vec<usize>>,
    /// Hidden patch indices, ascending.
    pub masked: Rc<Vec<usize>>,
    /// `restore[i]` is the position of patch `i` in `keep ++ masked`.
    pub restore: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn n(&self) -> usize {
        self.keep.len() + self.masked.len()
    }
}

/// Draws a masking plan: a seeded uniform shuffle of `0..n`, first
/// `round(n*(1-r))` entries kept (round half up). Both index lists are
/// sorted ascending.
pub fn make_mask_plan(n: usize, r: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Contract(format!("mask ratio must lie in [0,1), got {r}")));
    }
    if n == 0 {
        return Err(Error::Contract("mask plan needs at least one patch".into()));
    }
    let n_v = ((n as f64) * (1.0 - r) + 0.5).floor() as usize;
    if n_v == 0 {
        return Err(Error::Contract(format!(
            "mask ratio {r} with {n} patches leaves zero visible patches"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut keep: Vec<usize> = order[..n_v].to_vec();
    let mut masked: Vec<usize> = order[n_v..].to_vec();
    keep.sort_unstable();
    masked.sort_unstable();
    let mut restore = vec![0usize; n];
    for (j, &k) in keep.iter().enumerate() {
        restore[k] = j;
    }
    for (j, &m) in masked.iter().enumerate() {
        restore[m] = n_v + j;
    }
    Ok(MaskPlan { ratio: r, keep: Rc::new(keep), masked: Rc::new(masked), restore, seed })
}

/// Rows of `seq` at the plan's kept indices, in keep order.
pub fn gather_visible<S: Scalar>(seq: &PatchSequence<S>, plan: &MaskPlan) -> Result<Tensor<S>> {
    if plan.n() != seq.geom.n() {
        return Err(Error::Contract(format!(
            "mask plan covers {} patches, sequence has {}",
            plan.n(),
            seq.geom.n()
        )));
    }
    let d = seq.geom.row_len();
    let src = seq.rows.data();
    let mut data = Vec::with_capacity(plan.keep.len() * d);
    for &i in plan.keep.iter() {
        data.extend_from_slice(&src[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![plan.keep.len(), d], data)
}

/// Rebuilds a full-length sequence: visible rows return to their original
/// positions, every masked position takes the (broadcast) `mask_token`.
pub fn restore_with_mask_tokens<S: Scalar>(
    visible: &Tensor<S>,
    mask_token: &Tensor<S>,
    plan: &MaskPlan,
) -> Result<Tensor<S>> {
    let (nv, d) = match visible.shape() {
        [nv, d] => (*nv, *d),
        s => return Err(Error::Dim(format!("visible rows must be rank 2, got {s:?}"))),
    };
    if nv != plan.keep.len() {
        return Err(Error::Contract(format!(
            "plan keeps {} rows, visible has {nv}",
            plan.keep.len()
        )));
    }
    if mask_token.numel() != d {
        return Err(Error::Dim(format!(
            "mask token has {} elements, rows have {d}",
            mask_token.numel()
        )));
    }
    let n = plan.n();
    let mut data = vec![S::zero(); n * d];
    for (j, &i) in plan.keep.iter().enumerate() {
        data[i * d..(i + 1) * d].copy_from_slice(&visible.data()[j * d..(j + 1) * d]);
    }
    for &i in plan.masked.iter() {
        data[i * d..(i + 1) * d].copy_from_slice(mask_token.data());
    }
    Tensor::new(vec![n, d], data)
}
