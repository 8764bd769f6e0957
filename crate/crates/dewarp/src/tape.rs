//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] is rebuilt for every forward pass (define-by-run). Each op
//! pushes one node holding the computed value plus whatever the backward
//! pass needs; [`Tape::backward`] walks the tape once in reverse and
//! accumulates gradients, so a value used twice receives the sum of both
//! contributions.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, same_shape, Tensor};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Leaf,
    Add { a: Var, b: Var },
    AddN { xs: Vec<Var> },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: S },
    Matmul { a: Var, b: Var },
    MatmulNt { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Gelu { x: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<S>, rstd: Vec<S> },
    GatherRows { x: Var, idx: Rc<Vec<usize>> },
    RestoreRows { visible: Var, token: Var, keep: Rc<Vec<usize>>, masked: Rc<Vec<usize>> },
    ColSlice { x: Var, start: usize, len: usize },
    ConcatCols { xs: Vec<Var>, widths: Vec<usize> },
    Reshape { x: Var },
    BilinearWarp { image: Var, flow: Var },
    ConvexCombine { weights: Var, coarse: Var, p: usize },
    MaskedMse { pred: Var, target: Var, rows: Rc<Vec<usize>> },
    L1Mean { a: Var, b: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<S: Scalar> {
    by_node: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the loss with respect to `v`, if any was accumulated.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.by_node.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value held by `v`.
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that never receives a gradient (inputs, targets, tables).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient (model parameters).
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let value = zip(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.wants(a) || self.wants(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    /// Elementwise sum of any number of same-shaped vars.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Contract("add_n needs at least one input".into()))?;
        let mut value = self.value(first).clone();
        for &x in &xs[1..] {
            same_shape(self.value(first), self.value(x), "add_n")?;
            for (o, &v) in value.data_mut().iter_mut().zip(self.value(x).data()) {
                *o = *o + v;
            }
        }
        let needs = xs.iter().any(|&x| self.wants(x));
        Ok(self.push(value, Op::AddN { xs: xs.to_vec() }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let value = zip(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.wants(a) || self.wants(b);
        Ok(self.push(value, Op::Sub { a, b }, needs))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let value = zip(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.wants(a) || self.wants(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    /// Multiplication by a compile-time constant scalar.
    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let value = self.value(x).map(|v| v * c);
        let needs = self.wants(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = rank2(self.value(a), "matmul lhs")?;
        let (kb, n) = rank2(self.value(b), "matmul rhs")?;
        if ka != kb {
            return Err(Error::Dim(format!("matmul inner dims differ: [{m},{ka}] x [{kb},{n}]")));
        }
        let mut data = vec![S::zero(); m * n];
        gemm_nn_acc(self.value(a).data(), self.value(b).data(), m, ka, n, &mut data);
        let value = Tensor::new(vec![m, n], data)?;
        let needs = self.wants(a) || self.wants(b);
        Ok(self.push(value, Op::Matmul { a, b }, needs))
    }

    /// `[m,k] x [n,k]^T -> [m,n]` (rows of `b` are dotted against rows of `a`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = rank2(self.value(a), "matmul_nt lhs")?;
        let (n, kb) = rank2(self.value(b), "matmul_nt rhs")?;
        if ka != kb {
            return Err(Error::Dim(format!("matmul_nt inner dims differ: [{m},{ka}] x [{n},{kb}]^T")));
        }
        let mut data = vec![S::zero(); m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), m, ka, n, &mut data);
        let value = Tensor::new(vec![m, n], data)?;
        let needs = self.wants(a) || self.wants(b);
        Ok(self.push(value, Op::MatmulNt { a, b }, needs))
    }

    /// `x·w + b` with `b` broadcast over rows. `x` is `[t,d_in]`, `w` is
    /// `[d_in,d_out]`, `b` is `[d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t, d_in) = rank2(self.value(x), "linear input")?;
        let (wi, d_out) = rank2(self.value(w), "linear weight")?;
        if d_in != wi {
            return Err(Error::Dim(format!("linear: input cols {d_in} vs weight rows {wi}")));
        }
        let bias = self.value(b);
        if bias.shape() != [d_out] {
            return Err(Error::Dim(format!(
                "linear: bias shape {:?} does not match output width {d_out}",
                bias.shape()
            )));
        }
        // seed the output with tiled bias rows, then accumulate x·w on top
        let mut data = Vec::with_capacity(t * d_out);
        for _ in 0..t {
            data.extend_from_slice(bias.data());
        }
        gemm_nn_acc(self.value(x).data(), self.value(w).data(), t, d_in, d_out, &mut data);
        let value = Tensor::new(vec![t, d_out], data)?;
        let needs = self.wants(x) || self.wants(w) || self.wants(b);
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// Exact GELU: `0.5·x·(1 + erf(x/sqrt(2)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = S::from_f64(0.5);
        let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let value = self.value(x).map(|v| half * v * (S::one() + (v * inv_sqrt2).erf()));
        let needs = self.wants(x);
        self.push(value, Op::Gelu { x }, needs)
    }

    /// Softmax over each row of a rank-2 tensor, max-subtracted for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rank2(self.value(x), "softmax_rows")?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_exact_mut(c) {
            let mut m = row[0];
            for &v in row.iter() {
                if v > m {
                    m = v;
                }
            }
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum = sum + *v;
            }
            let inv = S::one() / sum;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        let _ = r;
        let needs = self.wants(x);
        Ok(self.push(value, Op::SoftmaxRows { x }, needs))
    }

    /// Per-row normalization with learnable affine: rows of `x` are `[t,d]`,
    /// `gamma`/`beta` are `[d]`. Population variance, `rstd = 1/sqrt(var+eps)`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (t, d) = rank2(self.value(x), "layer_norm input")?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::Dim(format!(
                "layer_norm: gamma {:?} / beta {:?} must both be [{d}]",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let inv_d = S::from_f64(1.0 / d as f64);
        let mut mean = Vec::with_capacity(t);
        let mut rstd = Vec::with_capacity(t);
        let mut data = Vec::with_capacity(t * d);
        let g = self.value(gamma).data().to_vec();
        let bet = self.value(beta).data().to_vec();
        for row in self.value(x).data().chunks_exact(d) {
            let mut mu = S::zero();
            for &v in row {
                mu = mu + v;
            }
            mu = mu * inv_d;
            let mut var = S::zero();
            for &v in row {
                let c = v - mu;
                var = var + c * c;
            }
            var = var * inv_d;
            let rs = S::one() / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                data.push(g[j] * (v - mu) * rs + bet[j]);
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let value = Tensor::new(vec![t, d], data)?;
        let needs = self.wants(x) || self.wants(gamma) || self.wants(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, mean, rstd }, needs))
    }

    /// `out[i] = x[idx[i]]` over rows of a rank-2 tensor. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (t, d) = rank2(self.value(x), "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= t) {
            return Err(Error::Dim(format!("gather_rows: index {bad} out of range for {t} rows")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![idx.len(), d], data)?;
        let needs = self.wants(x);
        Ok(self.push(value, Op::GatherRows { x, idx }, needs))
    }

    /// Scatters `visible` rows back to their original positions and fills
    /// every position in `masked` with the (broadcast) `token` row. `keep`
    /// and `masked` must partition `0..keep.len()+masked.len()`.
    pub fn restore_rows(
        &mut self,
        visible: Var,
        token: Var,
        keep: Rc<Vec<usize>>,
        masked: Rc<Vec<usize>>,
    ) -> Result<Var> {
        let (nv, d) = rank2(self.value(visible), "restore_rows visible")?;
        if nv != keep.len() {
            return Err(Error::Dim(format!(
                "restore_rows: {nv} visible rows but {} keep indices",
                keep.len()
            )));
        }
        let tok = self.value(token);
        if tok.numel() != d {
            return Err(Error::Dim(format!(
                "restore_rows: token has {} elements, expected {d}",
                tok.numel()
            )));
        }
        let n = keep.len() + masked.len();
        let mut filled = vec![false; n];
        let mut data = vec![S::zero(); n * d];
        let src = self.value(visible).data();
        for (j, &r) in keep.iter().enumerate() {
            if r >= n || filled[r] {
                return Err(Error::Contract(format!("restore_rows: keep/masked do not partition 0..{n}")));
            }
            filled[r] = true;
            data[r * d..(r + 1) * d].copy_from_slice(&src[j * d..(j + 1) * d]);
        }
        let tok_row = self.value(token).data().to_vec();
        for &r in masked.iter() {
            if r >= n || filled[r] {
                return Err(Error::Contract(format!("restore_rows: keep/masked do not partition 0..{n}")));
            }
            filled[r] = true;
            data[r * d..(r + 1) * d].copy_from_slice(&tok_row);
        }
        let value = Tensor::new(vec![n, d], data)?;
        let needs = self.wants(visible) || self.wants(token);
        Ok(self.push(value, Op::RestoreRows { visible, token, keep, masked }, needs))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (t, d) = rank2(self.value(x), "col_slice")?;
        if start + len > d {
            return Err(Error::Dim(format!("col_slice: {start}..{} out of range for width {d}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(t * len);
        for row in src.chunks_exact(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![t, len], data)?;
        let needs = self.wants(x);
        Ok(self.push(value, Op::ColSlice { x, start, len }, needs))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Contract("concat_cols needs at least one input".into()))?;
        let (t, _) = rank2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (ti, di) = rank2(self.value(x), "concat_cols")?;
            if ti != t {
                return Err(Error::Dim(format!("concat_cols: row counts differ ({t} vs {ti})")));
            }
            widths.push(di);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(t * total);
        for r in 0..t {
            for (&x, &w) in xs.iter().zip(&widths) {
                let src = self.value(x).data();
                data.extend_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![t, total], data)?;
        let needs = xs.iter().any(|&x| self.wants(x));
        Ok(self.push(value, Op::ConcatCols { xs: xs.to_vec(), widths }, needs))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let needs = self.wants(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// Backward-warps `image` by `flow`: the output at `(u,v)` is `image`
    /// sampled bilinearly at `(u+du, v+dv)` with clamp-to-edge. `image` is
    /// `[h,w,c]`, `flow` is `[h,w,2]` holding `(du,dv)` per pixel.
    pub fn bilinear_warp(&mut self, image: Var, flow: Var) -> Result<Var> {
        let (h, w, c) = rank3(self.value(image), "bilinear_warp image")?;
        let (fh, fw, f2) = rank3(self.value(flow), "bilinear_warp flow")?;
        if f2 != 2 || fh != h || fw != w {
            return Err(Error::Dim(format!(
                "bilinear_warp: flow {:?} must be [{h},{w},2]",
                self.value(flow).shape()
            )));
        }
        let img = self.value(image).data();
        let fl = self.value(flow).data();
        let mut data = vec![S::zero(); h * w * c];
        for v in 0..h {
            for u in 0..w {
                let fi = (v * w + u) * 2;
                let s = BilinearSample::at(fl[fi], fl[fi + 1], u, v, h, w);
                for ch in 0..c {
                    data[(v * w + u) * c + ch] = s.value(img, c, ch);
                }
            }
        }
        let value = Tensor::new(vec![h, w, c], data)?;
        let needs = self.wants(image) || self.wants(flow);
        Ok(self.push(value, Op::BilinearWarp { image, flow }, needs))
    }

    /// Upsamples a coarse per-cell field by a factor of `p` as a convex
    /// combination over the 3x3 cell neighborhood (clamped at borders),
    /// scaling values by `p`. `weights` is `[hc*wc*p*p, 9]` with rows
    /// ordered (cell-major, then sub-row, then sub-col) and each row summing
    /// to one; `coarse` is `[hc,wc,2]`. Output is `[hc*p, wc*p, 2]`.
    ///
    /// Computed center-relative, `p*(cb + sum_k w_k*(c_k - cb))`, so a
    /// constant field upsamples exactly regardless of weight rounding.
    pub fn convex_combine(&mut self, weights: Var, coarse: Var, p: usize) -> Result<Var> {
        let (hc, wc, c2) = rank3(self.value(coarse), "convex_combine coarse")?;
        if c2 != 2 {
            return Err(Error::Dim(format!(
                "convex_combine: coarse {:?} must have 2 channels",
                self.value(coarse).shape()
            )));
        }
        let (wr, wn) = rank2(self.value(weights), "convex_combine weights")?;
        if wn != 9 || wr != hc * wc * p * p {
            return Err(Error::Dim(format!(
                "convex_combine: weights {:?} must be [{},9]",
                self.value(weights).shape(),
                hc * wc * p * p
            )));
        }
        let cw = self.value(weights).data();
        let co = self.value(coarse).data();
        let (h, w) = (hc * p, wc * p);
        let scale = S::from_f64(p as f64);
        let mut data = vec![S::zero(); h * w * 2];
        for v in 0..h {
            let (cv, py) = (v / p, v % p);
            for u in 0..w {
                let (cu, px) = (u / p, u % p);
                let wrow = &cw[(((cv * wc + cu) * p + py) * p + px) * 9..][..9];
                for ch in 0..2 {
                    let cb = co[(cv * wc + cu) * 2 + ch];
                    let mut acc = cb;
                    for (k, &wk) in wrow.iter().enumerate() {
                        let ncv = clamp_i(cv as isize + (k / 3) as isize - 1, hc);
                        let ncu = clamp_i(cu as isize + (k % 3) as isize - 1, wc);
                        acc = acc + wk * (co[(ncv * wc + ncu) * 2 + ch] - cb);
                    }
                    data[(v * w + u) * 2 + ch] = scale * acc;
                }
            }
        }
        let value = Tensor::new(vec![h, w, 2], data)?;
        let needs = self.wants(weights) || self.wants(coarse);
        Ok(self.push(value, Op::ConvexCombine { weights, coarse, p }, needs))
    }

    /// Mean squared error over the listed rows only, divided by
    /// `rows.len() * row_width`. An empty row set yields zero.
    pub fn masked_mse(&mut self, pred: Var, target: Var, rows: Rc<Vec<usize>>) -> Result<Var> {
        same_shape(self.value(pred), self.value(target), "masked_mse")?;
        let (t, d) = rank2(self.value(pred), "masked_mse")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= t) {
            return Err(Error::Dim(format!("masked_mse: row {bad} out of range for {t} rows")));
        }
        let p = self.value(pred).data();
        let g = self.value(target).data();
        let mut sum = S::zero();
        for &r in rows.iter() {
            for j in 0..d {
                let e = p[r * d + j] - g[r * d + j];
                sum = sum + e * e;
            }
        }
        let n = rows.len() * d;
        let value = if n == 0 {
            Tensor::scalar(S::zero())
        } else {
            Tensor::scalar(sum * S::from_f64(1.0 / n as f64))
        };
        let needs = self.wants(pred) || self.wants(target);
        Ok(self.push(value, Op::MaskedMse { pred, target, rows }, needs))
    }

    /// Mean absolute difference over all elements.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "l1_mean")?;
        let x = self.value(a).data();
        let y = self.value(b).data();
        let mut sum = S::zero();
        for (&p, &q) in x.iter().zip(y) {
            sum = sum + (p - q).abs();
        }
        let value = Tensor::scalar(sum * S::from_f64(1.0 / x.len() as f64));
        let needs = self.wants(a) || self.wants(b);
        Ok(self.push(value, Op::L1Mean { a, b }, needs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut sum = S::zero();
        for &v in self.value(x).data() {
            sum = sum + v;
        }
        let needs = self.wants(x);
        self.push(Tensor::scalar(sum), Op::SumAll { x }, needs)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let mut sum = S::zero();
        for &v in self.value(x).data() {
            sum = sum + v;
        }
        let value = Tensor::scalar(sum * S::from_f64(1.0 / n as f64));
        let needs = self.wants(x);
        self.push(value, Op::MeanAll { x }, needs)
    }

    /// Runs the reverse pass from a scalar `loss` and returns all gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(dout) = grads[i].take() else { continue };
            self.backprop_node(i, &dout, &mut grads)?;
            grads[i] = Some(dout);
        }
        Ok(Grads { by_node: grads })
    }

    fn backprop_node(&self, i: usize, dout: &Tensor<S>, grads: &mut Vec<Option<Tensor<S>>>) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.wants(*a) {
                    add_into(grad_buf(grads, *a, self.value(*a).shape()), dout.data());
                }
                if self.wants(*b) {
                    add_into(grad_buf(grads, *b, self.value(*b).shape()), dout.data());
                }
            }
            Op::AddN { xs } => {
                for &x in xs {
                    if self.wants(x) {
                        add_into(grad_buf(grads, x, self.value(x).shape()), dout.data());
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    add_into(grad_buf(grads, *a, self.value(*a).shape()), dout.data());
                }
                if self.wants(*b) {
                    let g = grad_buf(grads, *b, self.value(*b).shape());
                    for (o, &d) in g.iter_mut().zip(dout.data()) {
                        *o = *o - d;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let g = grad_buf(grads, *a, self.value(*a).shape());
                    for ((o, &d), &v) in g.iter_mut().zip(dout.data()).zip(bv) {
                        *o = *o + d * v;
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let g = grad_buf(grads, *b, self.value(*b).shape());
                    for ((o, &d), &v) in g.iter_mut().zip(dout.data()).zip(av) {
                        *o = *o + d * v;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    let g = grad_buf(grads, *x, self.value(*x).shape());
                    for (o, &d) in g.iter_mut().zip(dout.data()) {
                        *o = *o + d * *c;
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.wants(*a) {
                    // dA += dC · B^T
                    let bv = self.value(*b).data().to_vec();
                    let g = grad_buf(grads, *a, &[m, k]);
                    gemm_nt_acc(dout.data(), &bv, m, n, k, g);
                }
                if self.wants(*b) {
                    // dB += A^T · dC
                    let av = self.value(*a).data().to_vec();
                    let g = grad_buf(grads, *b, &[k, n]);
                    gemm_tn_acc(&av, dout.data(), k, m, n, g);
                }
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                if self.wants(*a) {
                    // dA += dC · B
                    let bv = self.value(*b).data().to_vec();
                    let g = grad_buf(grads, *a, &[m, k]);
                    gemm_nn_acc(dout.data(), &bv, m, n, k, g);
                }
                if self.wants(*b) {
                    // dB += dC^T · A
                    let av = self.value(*a).data().to_vec();
                    let g = grad_buf(grads, *b, &[n, k]);
                    gemm_tn_acc(dout.data(), &av, n, m, k, g);
                }
            }
            Op::Linear { x, w, b } => {
                let (t, d_in) = (self.value(*x).rows(), self.value(*x).cols());
                let d_out = self.value(*w).cols();
                if self.wants(*x) {
                    let wv = self.value(*w).data().to_vec();
                    let g = grad_buf(grads, *x, &[t, d_in]);
                    gemm_nt_acc(dout.data(), &wv, t, d_out, d_in, g);
                }
                if self.wants(*w) {
                    let xv = self.value(*x).data().to_vec();
                    let g = grad_buf(grads, *w, &[d_in, d_out]);
                    gemm_tn_acc(&xv, dout.data(), d_in, t, d_out, g);
                }
                if self.wants(*b) {
                    let g = grad_buf(grads, *b, &[d_out]);
                    for row in dout.data().chunks_exact(d_out) {
                        add_into(g, row);
                    }
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let half = S::from_f64(0.5);
                    let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt2pi = S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                    let xv = self.value(*x).data();
                    let g = grad_buf(grads, *x, self.value(*x).shape());
                    for ((o, &d), &v) in g.iter_mut().zip(dout.data()).zip(xv) {
                        let cdf = half * (S::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt2pi * (-(v * v) * half).exp();
                        *o = *o + d * (cdf + v * pdf);
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                if self.wants(*x) {
                    let c = self.value(*x).cols();
                    let y = self.nodes[i].value.data();
                    let g = grad_buf(grads, *x, self.value(*x).shape());
                    for ((grow, drow), yrow) in
                        g.chunks_exact_mut(c).zip(dout.data().chunks_exact(c)).zip(y.chunks_exact(c))
                    {
                        let mut dot = S::zero();
                        for (&d, &yv) in drow.iter().zip(yrow) {
                            dot = dot + d * yv;
                        }
                        for ((o, &d), &yv) in grow.iter_mut().zip(drow).zip(yrow) {
                            *o = *o + yv * (d - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let (t, d) = (self.value(*x).rows(), self.value(*x).cols());
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let inv_d = S::from_f64(1.0 / d as f64);
                if self.wants(*beta) {
                    let g = grad_buf(grads, *beta, &[d]);
                    for row in dout.data().chunks_exact(d) {
                        add_into(g, row);
                    }
                }
                if self.wants(*gamma) {
                    let mut acc = vec![S::zero(); d];
                    for (r, drow) in dout.data().chunks_exact(d).enumerate() {
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                            acc[j] = acc[j] + drow[j] * xhat;
                        }
                    }
                    add_into(grad_buf(grads, *gamma, &[d]), &acc);
                }
                if self.wants(*x) {
                    let g = grad_buf(grads, *x, &[t, d]);
                    for (r, drow) in dout.data().chunks_exact(d).enumerate() {
                        // dx = rstd * (dxh - mean(dxh) - xhat * mean(dxh*xhat))
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                            let dxh = drow[j] * gv[j];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xhat;
                        }
                        s1 = s1 * inv_d;
                        s2 = s2 * inv_d;
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                            let dxh = drow[j] * gv[j];
                            g[r * d + j] = g[r * d + j] + rstd[r] * (dxh - s1 - xhat * s2);
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.wants(*x) {
                    let d = self.value(*x).cols();
                    let g = grad_buf(grads, *x, self.value(*x).shape());
                    for (j, &r) in idx.iter().enumerate() {
                        add_into(&mut g[r * d..(r + 1) * d], &dout.data()[j * d..(j + 1) * d]);
                    }
                }
            }
            Op::RestoreRows { visible, token, keep, masked } => {
                let d = self.value(*visible).cols();
                if self.wants(*visible) {
                    let g = grad_buf(grads, *visible, self.value(*visible).shape());
                    for (j, &r) in keep.iter().enumerate() {
                        add_into(&mut g[j * d..(j + 1) * d], &dout.data()[r * d..(r + 1) * d]);
                    }
                }
                if self.wants(*token) {
                    let g = grad_buf(grads, *token, self.value(*token).shape());
                    for &r in masked.iter() {
                        add_into(g, &dout.data()[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ColSlice { x, start, len } => {
                if self.wants(*x) {
                    let d = self.value(*x).cols();
                    let g = grad_buf(grads, *x, self.value(*x).shape());
                    for (r, drow) in dout.data().chunks_exact(*len).enumerate() {
                        add_into(&mut g[r * d + start..r * d + start + len], drow);
                    }
                }
            }
            Op::ConcatCols { xs, widths } => {
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&x, &wd) in xs.iter().zip(widths) {
                    if self.wants(x) {
                        let g = grad_buf(grads, x, self.value(x).shape());
                        for (r, grow) in g.chunks_exact_mut(wd).enumerate() {
                            add_into(grow, &dout.data()[r * total + off..r * total + off + wd]);
                        }
                    }
                    off += wd;
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    add_into(grad_buf(grads, *x, self.value(*x).shape()), dout.data());
                }
            }
            Op::BilinearWarp { image, flow } => {
                let (h, w, c) = {
                    let s = self.value(*image).shape();
                    (s[0], s[1], s[2])
                };
                let img = self.value(*image).data();
                let fl = self.value(*flow).data();
                let want_img = self.wants(*image);
                let want_flow = self.wants(*flow);
                let mut dimg = if want_img { vec![S::zero(); h * w * c] } else { Vec::new() };
                let mut dflow = if want_flow { vec![S::zero(); h * w * 2] } else { Vec::new() };
                for v in 0..h {
                    for u in 0..w {
                        let fi = (v * w + u) * 2;
                        let s = BilinearSample::at(fl[fi], fl[fi + 1], u, v, h, w);
                        let mut du = S::zero();
                        let mut dv = S::zero();
                        for ch in 0..c {
                            let d = dout.data()[(v * w + u) * c + ch];
                            if want_img {
                                s.scatter(d, &mut dimg, c, ch);
                            }
                            if want_flow {
                                let (gx, gy) = s.pos_grad(img, c, ch);
                                du = du + d * gx;
                                dv = dv + d * gy;
                            }
                        }
                        if want_flow {
                            dflow[fi] = du;
                            dflow[fi + 1] = dv;
                        }
                    }
                }
                if want_img {
                    add_into(grad_buf(grads, *image, &[h, w, c]), &dimg);
                }
                if want_flow {
                    add_into(grad_buf(grads, *flow, &[h, w, 2]), &dflow);
                }
            }
            Op::ConvexCombine { weights, coarse, p } => {
                let p = *p;
                let (hc, wc) = {
                    let s = self.value(*coarse).shape();
                    (s[0], s[1])
                };
                let co = self.value(*coarse).data();
                let cw = self.value(*weights).data();
                let (h, w) = (hc * p, wc * p);
                let scale = S::from_f64(p as f64);
                let want_w = self.wants(*weights);
                let want_c = self.wants(*coarse);
                let mut dw = if want_w { vec![S::zero(); cw.len()] } else { Vec::new() };
                let mut dc = if want_c { vec![S::zero(); co.len()] } else { Vec::new() };
                for v in 0..h {
                    let (cv, py) = (v / p, v % p);
                    for u in 0..w {
                        let (cu, px) = (u / p, u % p);
                        let wbase = (((cv * wc + cu) * p + py) * p + px) * 9;
                        for ch in 0..2 {
                            let d = scale * dout.data()[(v * w + u) * 2 + ch];
                            let cb = co[(cv * wc + cu) * 2 + ch];
                            let mut wsum = S::zero();
                            for k in 0..9 {
                                let wk = cw[wbase + k];
                                wsum = wsum + wk;
                                let ncv = clamp_i(cv as isize + (k / 3) as isize - 1, hc);
                                let ncu = clamp_i(cu as isize + (k % 3) as isize - 1, wc);
                                if want_c {
                                    dc[(ncv * wc + ncu) * 2 + ch] = dc[(ncv * wc + ncu) * 2 + ch] + d * wk;
                                }
                                if want_w {
                                    dw[wbase + k] = dw[wbase + k] + d * (co[(ncv * wc + ncu) * 2 + ch] - cb);
                                }
                            }
                            if want_c {
                                dc[(cv * wc + cu) * 2 + ch] = dc[(cv * wc + cu) * 2 + ch] + d * (S::one() - wsum);
                            }
                        }
                    }
                }
                if want_w {
                    add_into(grad_buf(grads, *weights, self.value(*weights).shape()), &dw);
                }
                if want_c {
                    add_into(grad_buf(grads, *coarse, &[hc, wc, 2]), &dc);
                }
            }
            Op::MaskedMse { pred, target, rows } => {
                let d = self.value(*pred).cols();
                let n = rows.len() * d;
                if n == 0 {
                    return Ok(());
                }
                let scale = dout.data()[0] * S::from_f64(2.0 / n as f64);
                let pv = self.value(*pred).data();
                let gv = self.value(*target).data();
                if self.wants(*pred) {
                    let g = grad_buf(grads, *pred, self.value(*pred).shape());
                    for &r in rows.iter() {
                        for j in r * d..(r + 1) * d {
                            g[j] = g[j] + scale * (pv[j] - gv[j]);
                        }
                    }
                }
                if self.wants(*target) {
                    let g = grad_buf(grads, *target, self.value(*target).shape());
                    for &r in rows.iter() {
                        for j in r * d..(r + 1) * d {
                            g[j] = g[j] - scale * (pv[j] - gv[j]);
                        }
                    }
                }
            }
            Op::L1Mean { a, b } => {
                let n = self.value(*a).numel();
                let scale = dout.data()[0] * S::from_f64(1.0 / n as f64);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // subgradient 0 at exact ties
                let sgn = |x: S, y: S| {
                    if x > y {
                        S::one()
                    } else if x < y {
                        -S::one()
                    } else {
                        S::zero()
                    }
                };
                if self.wants(*a) {
                    let g = grad_buf(grads, *a, self.value(*a).shape());
                    for (j, o) in g.iter_mut().enumerate() {
                        *o = *o + scale * sgn(av[j], bv[j]);
                    }
                }
                if self.wants(*b) {
                    let g = grad_buf(grads, *b, self.value(*b).shape());
                    for (j, o) in g.iter_mut().enumerate() {
                        *o = *o - scale * sgn(av[j], bv[j]);
                    }
                }
            }
            Op::SumAll { x } => {
                if self.wants(*x) {
                    let d = dout.data()[0];
                    let g = grad_buf(grads, *x, self.value(*x).shape());
                    for o in g.iter_mut() {
                        *o = *o + d;
                    }
                }
            }
            Op::MeanAll { x } => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    let d = dout.data()[0] * S::from_f64(1.0 / n as f64);
                    let g = grad_buf(grads, *x, self.value(*x).shape());
                    for o in g.iter_mut() {
                        *o = *o + d;
                    }
                }
            }
        }
        Ok(())
    }
}

/// One bilinear sample site: clamped corner indices plus fractional weights.
struct BilinearSample<S> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: S,
    fy: S,
    w: usize,
}

impl<S: Scalar> BilinearSample<S> {
    fn at(du: S, dv: S, u: usize, v: usize, h: usize, w: usize) -> Self {
        let sx = S::from_f64(u as f64) + du;
        let sy = S::from_f64(v as f64) + dv;
        let xf = sx.floor();
        let yf = sy.floor();
        let x0i = xf.as_f64() as isize;
        let y0i = yf.as_f64() as isize;
        BilinearSample {
            x0: clamp_i(x0i, w),
            x1: clamp_i(x0i + 1, w),
            y0: clamp_i(y0i, h),
            y1: clamp_i(y0i + 1, h),
            fx: sx - xf,
            fy: sy - yf,
            w,
        }
    }

    fn value(&self, img: &[S], c: usize, ch: usize) -> S {
        let one = S::one();
        let i = |y: usize, x: usize| img[(y * self.w + x) * c + ch];
        (one - self.fy) * ((one - self.fx) * i(self.y0, self.x0) + self.fx * i(self.y0, self.x1))
            + self.fy * ((one - self.fx) * i(self.y1, self.x0) + self.fx * i(self.y1, self.x1))
    }

    fn scatter(&self, d: S, dimg: &mut [S], c: usize, ch: usize) {
        let one = S::one();
        let mut put = |y: usize, x: usize, wt: S| {
            let j = (y * self.w + x) * c + ch;
            dimg[j] = dimg[j] + d * wt;
        };
        put(self.y0, self.x0, (one - self.fy) * (one - self.fx));
        put(self.y0, self.x1, (one - self.fy) * self.fx);
        put(self.y1, self.x0, self.fy * (one - self.fx));
        put(self.y1, self.x1, self.fy * self.fx);
    }

    /// (d value / d sx, d value / d sy); zero beyond edges because clamped
    /// corners coincide there.
    fn pos_grad(&self, img: &[S], c: usize, ch: usize) -> (S, S) {
        let one = S::one();
        let i = |y: usize, x: usize| img[(y * self.w + x) * c + ch];
        let gx = (one - self.fy) * (i(self.y0, self.x1) - i(self.y0, self.x0))
            + self.fy * (i(self.y1, self.x1) - i(self.y1, self.x0));
        let gy = (one - self.fx) * (i(self.y1, self.x0) - i(self.y0, self.x0))
            + self.fx * (i(self.y1, self.x1) - i(self.y0, self.x1));
        (gx, gy)
    }
}

fn clamp_i(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn rank2<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dim(format!("{what}: expected rank 2, got {s:?}"))),
    }
}

fn rank3<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::Dim(format!("{what}: expected rank 3, got {s:?}"))),
    }
}

fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes already checked")
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o = *o + v;
    }
}

/// Grad slice for `v`, allocating zeros on first touch.
fn grad_buf<'a, S: Scalar>(grads: &'a mut [Option<Tensor<S>>], v: Var, shape: &[usize]) -> &'a mut [S] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_err, numeric_grad};
    use approx::assert_relative_eq;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_matches_hand_product() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t2(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_nt_matches_matmul_of_transpose() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t2(2, 3, &[0.5, -1.0, 2.0, 1.5, 0.0, -0.5]));
        let c = tape.matmul_nt(a, b).unwrap();
        // rows of a dotted with rows of b
        assert_relative_eq!(tape.value(c).at2(0, 0), 0.5 - 2.0 + 6.0);
        assert_relative_eq!(tape.value(c).at2(1, 1), 6.0 + 0.0 - 3.0);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[2, 2]));
        let err = tape.backward(a).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn reused_var_accumulates_both_paths() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0_f64));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_relative_eq!(grads.get(x).unwrap().data()[0], 2.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t2(1, 2, &[1.0, 2.0]));
        let c = tape.constant(t2(1, 2, &[5.0, 5.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn linear_broadcasts_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let w = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(Tensor::new(vec![2], vec![10.0, 20.0]).unwrap());
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(2, 3, &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]));
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.value(y).data().chunks_exact(3) {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut t1 = Tape::new();
        let a = t1.constant(t2(1, 3, &[1.0, 2.0, 3.0]));
        let ya = t1.softmax_rows(a).unwrap();
        let mut t2_ = Tape::new();
        let b = t2_.constant(t2(1, 3, &[101.0, 102.0, 103.0]));
        let yb = t2_.softmax_rows(b).unwrap();
        for (x, y) in t1.value(ya).data().iter().zip(t2_.value(yb).data()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let out = tape.value(y).data();
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert_relative_eq!(mean, 0.0, epsilon = 1e-9);
        assert_relative_eq!(var, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn gelu_endpoints() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.0_f64, 10.0, -10.0]).unwrap());
        let y = tape.gelu(x);
        let out = tape.value(y).data();
        assert_relative_eq!(out[0], 0.0);
        assert_relative_eq!(out[1], 10.0, epsilon = 1e-9);
        assert_relative_eq!(out[2], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn gather_then_restore_roundtrips() {
        let mut tape = Tape::new();
        let x = tape.param(t2(4, 2, &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]));
        let keep = Rc::new(vec![1usize, 3]);
        let masked = Rc::new(vec![0usize, 2]);
        let vis = tape.gather_rows(x, keep.clone()).unwrap();
        let tok = tape.param(Tensor::full(&[1, 2], 9.0));
        let full = tape.restore_rows(vis, tok, keep, masked).unwrap();
        assert_eq!(tape.value(full).data(), &[9.0, 9.0, 1.0, 1.0, 9.0, 9.0, 3.0, 3.0]);
        let loss = tape.sum_all(full);
        let grads = tape.backward(loss).unwrap();
        // visible rows route back to their sources, masked rows to the token
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(grads.get(tok).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn restore_rejects_non_partition() {
        let mut tape = Tape::new();
        let vis = tape.constant(t2(2, 1, &[1.0, 2.0]));
        let tok = tape.constant(Tensor::zeros(&[1, 1]));
        let keep = Rc::new(vec![0usize, 1]);
        let masked = Rc::new(vec![1usize]); // collides with keep
        assert!(tape.restore_rows(vis, tok, keep, masked).is_err());
    }

    #[test]
    fn col_slice_and_concat_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.param(t2(2, 4, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let a = tape.col_slice(x, 0, 2).unwrap();
        let b = tape.col_slice(x, 2, 2).unwrap();
        let y = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 8]);
    }

    #[test]
    fn bilinear_identity_flow_copies_exactly() {
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::from_fn(&[3, 4, 2], |i| i as f64 * 0.37));
        let flow = tape.constant(Tensor::zeros(&[3, 4, 2]));
        let out = tape.bilinear_warp(img, flow).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(img).data());
    }

    #[test]
    fn convex_combine_preserves_constant_field_exactly() {
        let mut tape = Tape::new();
        // arbitrary normalized weights per row
        let hc = 2;
        let wc = 3;
        let p = 4;
        let mut wdata = Vec::new();
        for r in 0..hc * wc * p * p {
            let mut row = [0.0f64; 9];
            for (k, v) in row.iter_mut().enumerate() {
                *v = ((r * 9 + k) % 7 + 1) as f64;
            }
            let s: f64 = row.iter().sum();
            for v in &mut row {
                *v /= s;
            }
            wdata.extend_from_slice(&row);
        }
        let w = tape.constant(Tensor::new(vec![hc * wc * p * p, 9], wdata).unwrap());
        let c = tape.constant(Tensor::full(&[hc, wc, 2], 0.3125));
        let out = tape.convex_combine(w, c, p).unwrap();
        for &v in tape.value(out).data() {
            assert_eq!(v, 0.3125 * p as f64); // exact, not approximate
        }
    }

    #[test]
    fn masked_mse_of_constant_half_error_is_quarter() {
        let mut tape = Tape::new();
        let pred = tape.param(Tensor::full(&[4, 6], 0.75_f64));
        let tgt = tape.constant(Tensor::full(&[4, 6], 0.25));
        let rows = Rc::new(vec![1usize, 3]);
        let loss = tape.masked_mse(pred, tgt, rows).unwrap();
        assert_relative_eq!(tape.value(loss).data()[0], 0.25);
        // unmasked rows must not contribute gradient
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(pred).unwrap();
        assert_eq!(g.at2(0, 0), 0.0);
        assert_relative_eq!(g.at2(1, 0), 2.0 * 0.5 / 12.0);
    }

    #[test]
    fn masked_mse_empty_rows_is_zero() {
        let mut tape = Tape::new();
        let pred = tape.param(Tensor::full(&[4, 6], 0.75_f64));
        let tgt = tape.constant(Tensor::full(&[4, 6], 0.25));
        let loss = tape.masked_mse(pred, tgt, Rc::new(vec![])).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(pred).is_none());
    }

    #[test]
    fn l1_mean_matches_hand_value() {
        let mut tape = Tape::new();
        let a = tape.param(t2(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t2(1, 4, &[2.0, 2.0, 1.0, 8.0]));
        let loss = tape.l1_mean(a, b).unwrap();
        assert_relative_eq!(tape.value(loss).data()[0], (1.0 + 0.0 + 2.0 + 4.0) / 4.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[-0.25, 0.0, 0.25, -0.25]);
    }

    // finite-difference checks for ops with non-trivial backward rules

    fn fd_check_unary(build: impl Fn(&mut Tape<f64>, Var) -> Var, x0: Tensor<f64>, tol: f64) {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let numeric = numeric_grad(
            |t| {
                let mut tape = Tape::new();
                let x = tape.param(t.clone());
                let loss = build(&mut tape, x);
                Ok(tape.value(loss).data()[0])
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(
            max_rel_err(&analytic, &numeric) < tol,
            "rel err {} exceeds {tol}",
            max_rel_err(&analytic, &numeric)
        );
    }

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 7 + 3) % 11) as f64 * 0.21 - 1.05)
    }

    #[test]
    fn fd_gelu() {
        fd_check_unary(
            |t, x| {
                let y = t.gelu(x);
                t.sum_all(y)
            },
            ramp(&[2, 5]),
            1e-5,
        );
    }

    #[test]
    fn fd_softmax() {
        fd_check_unary(
            |t, x| {
                let y = t.softmax_rows(x).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum_all(sq)
            },
            ramp(&[3, 4]),
            1e-5,
        );
    }

    #[test]
    fn fd_layer_norm_all_inputs() {
        let x0 = ramp(&[3, 5]);
        let g0 = Tensor::from_fn(&[5], |i| 0.5 + 0.1 * i as f64);
        let b0 = Tensor::from_fn(&[5], |i| 0.2 - 0.05 * i as f64);
        let run = |xv: &Tensor<f64>, gv: &Tensor<f64>, bv: &Tensor<f64>| -> (f64, Option<(Tensor<f64>, Tensor<f64>, Tensor<f64>)>) {
            let mut tape = Tape::new();
            let x = tape.param(xv.clone());
            let g = tape.param(gv.clone());
            let b = tape.param(bv.clone());
            let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum_all(sq);
            let lv = tape.value(loss).data()[0];
            let grads = tape.backward(loss).unwrap();
            (
                lv,
                Some((
                    grads.get(x).unwrap().clone(),
                    grads.get(g).unwrap().clone(),
                    grads.get(b).unwrap().clone(),
                )),
            )
        };
        let (_, analytic) = run(&x0, &g0, &b0);
        let (gx, gg, gb) = analytic.unwrap();
        let nx = numeric_grad(|t| Ok(run(t, &g0, &b0).0), &x0, 1e-5).unwrap();
        let ng = numeric_grad(|t| Ok(run(&x0, t, &b0).0), &g0, 1e-5).unwrap();
        let nb = numeric_grad(|t| Ok(run(&x0, &g0, t).0), &b0, 1e-5).unwrap();
        assert!(max_rel_err(&gx, &nx) < 1e-4, "x: {}", max_rel_err(&gx, &nx));
        assert!(max_rel_err(&gg, &ng) < 1e-5, "gamma: {}", max_rel_err(&gg, &ng));
        assert!(max_rel_err(&gb, &nb) < 1e-5, "beta: {}", max_rel_err(&gb, &nb));
    }

    #[test]
    fn fd_matmul_both_sides() {
        let a0 = ramp(&[3, 4]);
        let b0 = Tensor::from_fn(&[4, 2], |i| ((i * 5 + 1) % 7) as f64 * 0.3 - 0.9);
        let run = |av: &Tensor<f64>, bv: &Tensor<f64>| {
            let mut tape = Tape::new();
            let a = tape.param(av.clone());
            let b = tape.param(bv.clone());
            let c = tape.matmul(a, b).unwrap();
            let sq = tape.mul(c, c).unwrap();
            let loss = tape.sum_all(sq);
            let lv = tape.value(loss).data()[0];
            let grads = tape.backward(loss).unwrap();
            (lv, grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone())
        };
        let (_, ga, gb) = run(&a0, &b0);
        let na = numeric_grad(|t| Ok(run(t, &b0).0), &a0, 1e-5).unwrap();
        let nb = numeric_grad(|t| Ok(run(&a0, t).0), &b0, 1e-5).unwrap();
        assert!(max_rel_err(&ga, &na) < 1e-6);
        assert!(max_rel_err(&gb, &nb) < 1e-6);
    }

    #[test]
    fn fd_matmul_nt_both_sides() {
        let a0 = ramp(&[3, 4]);
        let b0 = Tensor::from_fn(&[5, 4], |i| ((i * 3 + 2) % 8) as f64 * 0.25 - 1.0);
        let run = |av: &Tensor<f64>, bv: &Tensor<f64>| {
            let mut tape = Tape::new();
            let a = tape.param(av.clone());
            let b = tape.param(bv.clone());
            let c = tape.matmul_nt(a, b).unwrap();
            let sq = tape.mul(c, c).unwrap();
            let loss = tape.sum_all(sq);
            let lv = tape.value(loss).data()[0];
            let grads = tape.backward(loss).unwrap();
            (lv, grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone())
        };
        let (_, ga, gb) = run(&a0, &b0);
        let na = numeric_grad(|t| Ok(run(t, &b0).0), &a0, 1e-5).unwrap();
        let nb = numeric_grad(|t| Ok(run(&a0, t).0), &b0, 1e-5).unwrap();
        assert!(max_rel_err(&ga, &na) < 1e-6);
        assert!(max_rel_err(&gb, &nb) < 1e-6);
    }

    #[test]
    fn fd_linear_all_inputs() {
        let x0 = ramp(&[3, 4]);
        let w0 = Tensor::from_fn(&[4, 2], |i| ((i * 5 + 1) % 7) as f64 * 0.3 - 0.9);
        let b0 = Tensor::from_fn(&[2], |i| 0.1 * i as f64 - 0.05);
        let run = |xv: &Tensor<f64>, wv: &Tensor<f64>, bv: &Tensor<f64>| {
            let mut tape = Tape::new();
            let x = tape.param(xv.clone());
            let w = tape.param(wv.clone());
            let b = tape.param(bv.clone());
            let y = tape.linear(x, w, b).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum_all(sq);
            let lv = tape.value(loss).data()[0];
            let grads = tape.backward(loss).unwrap();
            (
                lv,
                grads.get(x).unwrap().clone(),
                grads.get(w).unwrap().clone(),
                grads.get(b).unwrap().clone(),
            )
        };
        let (_, gx, gw, gb) = run(&x0, &w0, &b0);
        let nx = numeric_grad(|t| Ok(run(t, &w0, &b0).0), &x0, 1e-5).unwrap();
        let nw = numeric_grad(|t| Ok(run(&x0, t, &b0).0), &w0, 1e-5).unwrap();
        let nb = numeric_grad(|t| Ok(run(&x0, &w0, t).0), &b0, 1e-5).unwrap();
        assert!(max_rel_err(&gx, &nx) < 1e-6);
        assert!(max_rel_err(&gw, &nw) < 1e-6);
        assert!(max_rel_err(&gb, &nb) < 1e-6);
    }

    #[test]
    fn fd_bilinear_warp_flow_and_image() {
        // fractional offsets keep finite differences away from the floor
        // discontinuities of the sampler
        let img0 = Tensor::from_fn(&[4, 5, 2], |i| ((i * 13 + 5) % 17) as f64 * 0.11);
        let flow0 = Tensor::from_fn(&[4, 5, 2], |i| ((i * 7 + 2) % 5) as f64 * 0.13 - 0.305);
        let run = |iv: &Tensor<f64>, fv: &Tensor<f64>| {
            let mut tape = Tape::new();
            let img = tape.param(iv.clone());
            let fl = tape.param(fv.clone());
            let out = tape.bilinear_warp(img, fl).unwrap();
            let sq = tape.mul(out, out).unwrap();
            let loss = tape.sum_all(sq);
            let lv = tape.value(loss).data()[0];
            let grads = tape.backward(loss).unwrap();
            (lv, grads.get(img).unwrap().clone(), grads.get(fl).unwrap().clone())
        };
        let (_, gi, gf) = run(&img0, &flow0);
        let ni = numeric_grad(|t| Ok(run(t, &flow0).0), &img0, 1e-6).unwrap();
        let nf = numeric_grad(|t| Ok(run(&img0, t).0), &flow0, 1e-6).unwrap();
        assert!(max_rel_err(&gi, &ni) < 1e-5, "image: {}", max_rel_err(&gi, &ni));
        assert!(max_rel_err(&gf, &nf) < 1e-5, "flow: {}", max_rel_err(&gf, &nf));
    }

    #[test]
    fn fd_convex_combine_weights_and_coarse() {
        let hc = 2;
        let wc = 2;
        let p = 2;
        let w0 = Tensor::from_fn(&[hc * wc * p * p, 9], |i| 0.05 + ((i * 3) % 7) as f64 * 0.01);
        let c0 = Tensor::from_fn(&[hc, wc, 2], |i| ((i * 11 + 1) % 9) as f64 * 0.4 - 1.6);
        let run = |wv: &Tensor<f64>, cv: &Tensor<f64>| {
            let mut tape = Tape::new();
            let w = tape.param(wv.clone());
            let c = tape.param(cv.clone());
            let out = tape.convex_combine(w, c, p).unwrap();
            let sq = tape.mul(out, out).unwrap();
            let loss = tape.sum_all(sq);
            let lv = tape.value(loss).data()[0];
            let grads = tape.backward(loss).unwrap();
            (lv, grads.get(w).unwrap().clone(), grads.get(c).unwrap().clone())
        };
        let (_, gw, gc) = run(&w0, &c0);
        let nw = numeric_grad(|t| Ok(run(t, &c0).0), &w0, 1e-5).unwrap();
        let nc = numeric_grad(|t| Ok(run(&w0, t).0), &c0, 1e-5).unwrap();
        assert!(max_rel_err(&gw, &nw) < 1e-6, "weights: {}", max_rel_err(&gw, &nw));
        assert!(max_rel_err(&gc, &nc) < 1e-6, "coarse: {}", max_rel_err(&gc, &nc));
    }

    #[test]
    fn fd_gather_restore_chain() {
        let x0 = ramp(&[5, 3]);
        let tok0 = Tensor::from_fn(&[1, 3], |i| 0.3 * i as f64 - 0.2);
        let keep = Rc::new(vec![0usize, 2, 4]);
        let masked = Rc::new(vec![1usize, 3]);
        let run = |xv: &Tensor<f64>, tv: &Tensor<f64>| {
            let mut tape = Tape::new();
            let x = tape.param(xv.clone());
            let tok = tape.param(tv.clone());
            let vis = tape.gather_rows(x, keep.clone()).unwrap();
            let full = tape.restore_rows(vis, tok, keep.clone(), masked.clone()).unwrap();
            let sq = tape.mul(full, full).unwrap();
            let loss = tape.sum_all(sq);
            let lv = tape.value(loss).data()[0];
            let grads = tape.backward(loss).unwrap();
            (lv, grads.get(x).unwrap().clone(), grads.get(tok).unwrap().clone())
        };
        let (_, gx, gt) = run(&x0, &tok0);
        let nx = numeric_grad(|t| Ok(run(t, &tok0).0), &x0, 1e-5).unwrap();
        let nt = numeric_grad(|t| Ok(run(&x0, t).0), &tok0, 1e-5).unwrap();
        assert!(max_rel_err(&gx, &nx) < 1e-6);
        assert!(max_rel_err(&gt, &nt) < 1e-6);
    }
}
