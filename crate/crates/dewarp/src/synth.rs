//! Synthetic warped-document corpus: procedural pages, analytically
//! invertible distortion fields, and a threshold-based segmenter.
//!
//! Every sample is derived from three seeds (page, warp, background), so a
//! manifest of seeds reproduces the corpus bit for bit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rectifier::FlowField;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The border frame sits this far inside the page edge.
const BORDER_INSET: usize = 3;

/// Fraction of the text-line span that seeded jitter may remove.
const MAX_JITTER_FRAC: f64 = 0.3;

const SIGNATURE_BUCKETS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct PageSpec {
    pub h: usize,
    pub w: usize,
    pub line_count: usize,
    pub line_thickness: usize,
    pub margin: usize,
    pub ink: f64,
    pub paper: f64,
    /// Border frame intensity. Kept above the 0.5 segmentation threshold:
    /// a warp can clip the page at the canvas edge, and a sub-threshold
    /// frame touching that edge would sever the rim from the interior.
    pub border_ink: f64,
    pub border_thickness: usize,
    pub seed: u64,
}

impl PageSpec {
    /// Layout scaled to the page size; 96px pages get 6 lines of 3px.
    pub fn desk(h: usize, w: usize, seed: u64) -> Self {
        PageSpec {
            h,
            w,
            line_count: (h / 14).clamp(3, 24),
            line_thickness: (h / 32).max(2),
            margin: (h / 10).max(8),
            ink: 0.10,
            paper: 0.92,
            border_ink: 0.62,
            border_thickness: (h / 48).max(1),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ink", self.ink), ("paper", self.paper), ("border_ink", self.border_ink)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Spec(format!("{name} intensity {v} outside [0,1]")));
            }
        }
        if self.border_thickness > 0 && self.border_ink <= 0.5 {
            return Err(Error::Spec(format!(
                "border_ink {} must stay above the 0.5 segmentation threshold",
                self.border_ink
            )));
        }
        if self.h < 8 || self.w < 8 {
            return Err(Error::Spec(format!("page {}x{} too small", self.h, self.w)));
        }
        if self.margin < BORDER_INSET + self.border_thickness + 1 {
            return Err(Error::Spec(format!(
                "margin {} collides with the border (needs >= {})",
                self.margin,
                BORDER_INSET + self.border_thickness + 1
            )));
        }
        if 2 * self.margin >= self.h.min(self.w) {
            return Err(Error::Spec(format!(
                "margin {} leaves no interior on a {}x{} page",
                self.margin, self.h, self.w
            )));
        }
        if self.line_count > 0 {
            if self.line_thickness == 0 {
                return Err(Error::Spec("line thickness must be positive".into()));
            }
            let span = self.h - 2 * self.margin;
            // each line needs its thickness plus a separating paper row
            if self.line_count * (self.line_thickness + 1) > span {
                return Err(Error::Spec(format!(
                    "{} lines of thickness {} do not fit in {} rows",
                    self.line_count, self.line_thickness, span
                )));
            }
        }
        Ok(())
    }

    fn line_span(&self) -> usize {
        self.w - 2 * self.margin
    }

    /// Pixels removed from each line's right end, reproducible from the seed.
    fn line_jitters(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let max_jitter = (self.line_span() as f64 * MAX_JITTER_FRAC).floor() as usize;
        (0..self.line_count).map(|_| rng.gen_range(0..=max_jitter)).collect()
    }
}

/// One character per text line, bucketing its jittered length; the same
/// bucketing applied to a measured line recovers the character.
pub fn line_signature(spec: &PageSpec) -> Result<String> {
    spec.validate()?;
    let span = spec.line_span() as f64;
    Ok(spec
        .line_jitters()
        .iter()
        .map(|&j| signature_char(j as f64 / span))
        .collect())
}

fn signature_char(jitter_frac: f64) -> char {
    let b = (jitter_frac / MAX_JITTER_FRAC * SIGNATURE_BUCKETS as f64).floor() as usize;
    (b'a' + b.min(SIGNATURE_BUCKETS - 1) as u8) as char
}

pub fn gen_page<S: Scalar>(spec: &PageSpec) -> Result<Tensor<S>> {
    spec.validate()?;
    let (h, w) = (spec.h, spec.w);
    let mut img = vec![spec.paper; h * w];
    // border frame, inset from the page edge
    let bt = spec.border_thickness;
    if bt > 0 {
        let (top, left) = (BORDER_INSET, BORDER_INSET);
        let (bottom, right) = (h - BORDER_INSET, w - BORDER_INSET);
        for y in top..bottom {
            for x in left..right {
                let in_frame =
                    y < top + bt || y >= bottom - bt || x < left + bt || x >= right - bt;
                if in_frame {
                    img[y * w + x] = spec.border_ink;
                }
            }
        }
    }
    // evenly spaced stripes, each shortened on the right by its jitter
    if spec.line_count > 0 {
        let span = (h - 2 * spec.margin) as f64;
        let slot = span / spec.line_count as f64;
        let jitters = spec.line_jitters();
        for (i, &jitter) in jitters.iter().enumerate() {
            let y0 = spec.margin
                + (i as f64 * slot + (slot - spec.line_thickness as f64) / 2.0).round() as usize;
            let len = spec.line_span() - jitter;
            for y in y0..y0 + spec.line_thickness {
                for x in spec.margin..spec.margin + len {
                    img[y * w + x] = spec.ink;
                }
            }
        }
    }
    let data: Vec<S> = img
        .iter()
        .flat_map(|&v| [S::from_f64(v); 3])
        .collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Reads the signature back out of a page-geometry image by scanning row
/// profiles between the margins. Exact on clean pages; approximate after a
/// rectification round trip.
pub fn extract_line_signature<S: Scalar>(image: &Tensor<S>, spec: &PageSpec) -> Result<String> {
    spec.validate()?;
    if image.shape() != [spec.h, spec.w, 3] {
        return Err(Error::Geometry(format!(
            "image shape {:?} does not match page {}x{}",
            image.shape(),
            spec.h,
            spec.w
        )));
    }
    let mid = (spec.ink + spec.paper) / 2.0;
    let dark = |y: usize, x: usize| image.at3(y, x, 0).as_f64() < mid;
    let span = spec.line_span();
    let mut out = String::new();
    let mut y = spec.margin;
    while y < spec.h - spec.margin {
        let row_dark = (spec.margin..spec.w - spec.margin).filter(|&x| dark(y, x)).count();
        if row_dark == 0 {
            y += 1;
            continue;
        }
        // found a band: take its longest row as the line length
        let mut best = row_dark;
        let mut yy = y + 1;
        while yy < spec.h - spec.margin {
            let c = (spec.margin..spec.w - spec.margin).filter(|&x| dark(yy, x)).count();
            if c == 0 {
                break;
            }
            best = best.max(c);
            yy += 1;
        }
        let jitter_frac = (span.saturating_sub(best)) as f64 / span as f64;
        out.push(signature_char(jitter_frac));
        y = yy + 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpSpec {
    /// Peak displacement of the projective component, in pixels.
    pub homography_px: f64,
    pub fold_amp_x: f64,
    pub fold_amp_y: f64,
    pub fold_freq_x: f64,
    pub fold_freq_y: f64,
    pub bump_count: usize,
    pub bump_amp: f64,
    pub bump_sigma: f64,
    pub seed: u64,
}

impl WarpSpec {
    pub fn desk(seed: u64) -> Self {
        WarpSpec {
            homography_px: 2.0,
            fold_amp_x: 1.6,
            fold_amp_y: 1.2,
            fold_freq_x: 1.3,
            fold_freq_y: 0.9,
            bump_count: 2,
            bump_amp: 1.2,
            bump_sigma: 14.0,
            seed,
        }
    }

    pub fn mild(seed: u64) -> Self {
        WarpSpec {
            homography_px: 0.4,
            fold_amp_x: 0.5,
            fold_amp_y: 0.4,
            fold_freq_x: 1.0,
            fold_freq_y: 0.7,
            bump_count: 1,
            bump_amp: 0.5,
            bump_sigma: 16.0,
            seed,
        }
    }

    pub fn identity(seed: u64) -> Self {
        WarpSpec {
            homography_px: 0.0,
            fold_amp_x: 0.0,
            fold_amp_y: 0.0,
            fold_freq_x: 1.0,
            fold_freq_y: 1.0,
            bump_count: 0,
            bump_amp: 0.0,
            bump_sigma: 8.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("homography_px", self.homography_px),
            ("fold_amp_x", self.fold_amp_x),
            ("fold_amp_y", self.fold_amp_y),
            ("bump_amp", self.bump_amp),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Spec(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.fold_freq_x <= 0.0 || self.fold_freq_y <= 0.0 {
            return Err(Error::Spec("fold frequencies must be positive".into()));
        }
        if self.bump_count > 0 && self.bump_sigma < 2.0 {
            return Err(Error::Spec(format!(
                "bump_sigma {} too sharp (needs >= 2)",
                self.bump_sigma
            )));
        }
        Ok(())
    }

    /// Sum of the configured peak displacements, in pixels.
    pub fn amplitude_sum(&self) -> f64 {
        self.homography_px
            + self.fold_amp_x
            + self.fold_amp_y
            + self.bump_count as f64 * self.bump_amp
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Bump {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    sigma: f64,
}

/// Analytic forward map from distorted coordinates to clean coordinates:
/// a near-identity projective transform applied after sinusoidal folds and
/// Gaussian bumps.
#[derive(Debug, Clone)]
pub struct WarpMap {
    pub h: usize,
    pub w: usize,
    pub(crate) hom: [f64; 9],
    pub(crate) fold: [f64; 6],
    pub(crate) bumps: Vec<Bump>,
}

impl WarpMap {
    pub fn identity(h: usize, w: usize) -> Self {
        WarpMap {
            h,
            w,
            hom: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            fold: [0.0; 6],
            bumps: Vec::new(),
        }
    }

    #[cfg(test)]
    pub(crate) fn translation(h: usize, w: usize, tx: f64, ty: f64) -> Self {
        let mut m = WarpMap::identity(h, w);
        m.hom[2] = tx;
        m.hom[5] = ty;
        m
    }

    fn fold_bump_disp(&self, u: f64, v: f64) -> (f64, f64) {
        let [ax, fx, px_, ay, fy, py_] = self.fold;
        let mut dx = ax * (2.0 * std::f64::consts::PI * fx * v / self.h as f64 + px_).sin();
        let mut dy = ay * (2.0 * std::f64::consts::PI * fy * u / self.w as f64 + py_).sin();
        for b in &self.bumps {
            let r2 = (u - b.cx).powi(2) + (v - b.cy).powi(2);
            let g = (-r2 / (2.0 * b.sigma * b.sigma)).exp();
            dx += b.ax * g;
            dy += b.ay * g;
        }
        (dx, dy)
    }

    fn apply_hom(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.hom;
        let d = m[6] * x + m[7] * y + m[8];
        ((m[0] * x + m[1] * y + m[2]) / d, (m[3] * x + m[4] * y + m[5]) / d)
    }

    /// Clean coordinates for a distorted-space point `(u, v)`.
    pub fn eval(&self, u: f64, v: f64) -> (f64, f64) {
        let (dx, dy) = self.fold_bump_disp(u, v);
        self.apply_hom(u + dx, v + dy)
    }

    fn disp(&self, u: f64, v: f64) -> (f64, f64) {
        let (x, y) = self.eval(u, v);
        (x - u, y - v)
    }

    /// Largest finite-difference entry of the displacement Jacobian over a
    /// probe grid.
    pub fn grad_sup(&self, probes: usize) -> f64 {
        let step = 0.5;
        let mut sup: f64 = 0.0;
        for iy in 0..probes {
            for ix in 0..probes {
                let u = ix as f64 / (probes - 1) as f64 * (self.w - 1) as f64;
                let v = iy as f64 / (probes - 1) as f64 * (self.h - 1) as f64;
                let (dxp, dyp) = self.disp(u + step, v);
                let (dxm, dym) = self.disp(u - step, v);
                sup = sup.max(((dxp - dxm) / (2.0 * step)).abs());
                sup = sup.max(((dyp - dym) / (2.0 * step)).abs());
                let (dxp, dyp) = self.disp(u, v + step);
                let (dxm, dym) = self.disp(u, v - step);
                sup = sup.max(((dxp - dxm) / (2.0 * step)).abs());
                sup = sup.max(((dyp - dym) / (2.0 * step)).abs());
            }
        }
        sup
    }

    fn disp_sup(&self, probes: usize) -> f64 {
        let mut sup: f64 = 0.0;
        for iy in 0..probes {
            for ix in 0..probes {
                let u = ix as f64 / (probes - 1) as f64 * (self.w - 1) as f64;
                let v = iy as f64 / (probes - 1) as f64 * (self.h - 1) as f64;
                let (dx, dy) = self.disp(u, v);
                sup = sup.max(dx.abs()).max(dy.abs());
            }
        }
        sup
    }
}

/// Builds a projective matrix whose peak displacement over the page equals
/// `target_px`, by bisecting the blend factor toward a seeded direction.
fn calibrated_homography(dir: &[f64; 8], target_px: f64, h: usize, w: usize) -> [f64; 9] {
    let ident = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    if target_px == 0.0 {
        return ident;
    }
    let s = h.min(w) as f64;
    let build = |eps: f64| -> [f64; 9] {
        [
            1.0 + eps * dir[0],
            eps * dir[1],
            eps * dir[2] * s,
            eps * dir[3],
            1.0 + eps * dir[4],
            eps * dir[5] * s,
            eps * dir[6] / (s * s),
            eps * dir[7] / (s * s),
            1.0,
        ]
    };
    let ok = |eps: f64| -> bool {
        let mut m = WarpMap::identity(h, w);
        m.hom = build(eps);
        // keep the projective denominator well away from zero
        for iy in 0..9 {
            for ix in 0..9 {
                let x = ix as f64 / 8.0 * (w - 1) as f64;
                let y = iy as f64 / 8.0 * (h - 1) as f64;
                if m.hom[6] * x + m.hom[7] * y + 1.0 < 0.5 {
                    return false;
                }
            }
        }
        m.disp_sup(65) <= target_px
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    if ok(hi) {
        return build(hi);
    }
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    build(lo)
}

pub fn gen_warp(spec: &WarpSpec, h: usize, w: usize) -> Result<WarpMap> {
    spec.validate()?;
    if h < 2 || w < 2 {
        return Err(Error::Spec(format!("warp domain {h}x{w} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase_x = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase_y = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut bumps = Vec::with_capacity(spec.bump_count);
    for _ in 0..spec.bump_count {
        let cx = rng.gen_range(0.2..0.8) * w as f64;
        let cy = rng.gen_range(0.2..0.8) * h as f64;
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let mag = rng.gen_range(0.5..1.0) * spec.bump_amp;
        bumps.push(Bump {
            cx,
            cy,
            ax: mag * angle.cos(),
            ay: mag * angle.sin(),
            sigma: spec.bump_sigma,
        });
    }
    let mut dir = [0.0; 8];
    for d in &mut dir {
        *d = rng.gen_range(-1.0..1.0);
    }
    let map = WarpMap {
        h,
        w,
        hom: calibrated_homography(&dir, spec.homography_px, h, w),
        fold: [
            spec.fold_amp_x,
            spec.fold_freq_x,
            phase_x,
            spec.fold_amp_y,
            spec.fold_freq_y,
            phase_y,
        ],
        bumps,
    };
    let sup = map.grad_sup(33);
    if sup >= 0.5 {
        // attribute the violation to the largest analytic term
        let tau = std::f64::consts::TAU;
        let terms = [
            ("fold_amp_x", spec.fold_amp_x * tau * spec.fold_freq_x / h as f64),
            ("fold_amp_y", spec.fold_amp_y * tau * spec.fold_freq_y / w as f64),
            (
                "bump_amp",
                spec.bump_count as f64 * spec.bump_amp * 0.6066 / spec.bump_sigma.max(1e-9),
            ),
            ("homography_px", spec.homography_px / h.min(w) as f64),
        ];
        let worst = terms
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        return Err(Error::Spec(format!(
            "displacement gradient sup {:.3} >= 0.5; map is not safely invertible \
             (largest contribution: {} with bound {:.3})",
            sup, worst.0, worst.1
        )));
    }
    Ok(map)
}

/// Per-pixel inverse of the forward map as a displacement field: output
/// pixel `(u,v)` reads distorted coordinate `(u,v) + flow(u,v)`.
pub fn invert_map(map: &WarpMap, tol: f64, max_iter: usize) -> Result<FlowField<f64>> {
    let (h, w) = (map.h, map.w);
    let mut disp = vec![0.0f64; h * w * 2];
    let mut converged = vec![false; h * w];
    let mut worst = 0.0f64;
    for v in 0..h {
        for u in 0..w {
            let (qu, qv) = (u as f64, v as f64);
            let mut x = qu;
            let mut y = qv;
            let mut ok = false;
            for _ in 0..max_iter {
                let (hx, hy) = map.eval(x, y);
                let res = ((hx - qu).powi(2) + (hy - qv).powi(2)).sqrt();
                if res < tol {
                    ok = true;
                    break;
                }
                // h(x) = x + d(x), so the fixed point of q - d(x) inverts it
                x = qu - (hx - x);
                y = qv - (hy - y);
            }
            if !ok {
                let (hx, hy) = map.eval(x, y);
                worst = worst.max(((hx - qu).powi(2) + (hy - qv).powi(2)).sqrt());
            }
            converged[v * w + u] = ok;
            disp[(v * w + u) * 2] = x - qu;
            disp[(v * w + u) * 2 + 1] = y - qv;
        }
    }
    let bad = converged.iter().filter(|&&c| !c).count();
    if bad * 1000 > h * w {
        return Err(Error::Inversion(format!(
            "{bad} of {} pixels failed to invert within {max_iter} iterations \
             (worst residual {worst:.4} px, tolerance {tol})",
            h * w
        )));
    }
    FlowField::new(Tensor::new(vec![h, w, 2], disp)?)
}

#[derive(Debug, Clone)]
pub struct SampleMeta {
    pub page: PageSpec,
    pub warp: WarpSpec,
    pub background_seed: u64,
    /// Rejected generation attempts before this sample certified.
    pub attempts: u32,
}

#[derive(Debug, Clone)]
pub struct SyntheticSample<S: Scalar> {
    pub clean: Tensor<S>,
    pub distorted: Tensor<S>,
    pub mask: Tensor<S>,
    pub gt_flow: FlowField<S>,
    pub meta: SampleMeta,
}

fn sample_clamped(img: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64, ch: usize) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let xi = |v: f64| (v.max(0.0).min((w - 1) as f64)) as usize;
    let yi = |v: f64| (v.max(0.0).min((h - 1) as f64)) as usize;
    let (x0c, x1c) = (xi(x0), xi(x0 + 1.0));
    let (y0c, y1c) = (yi(y0), yi(y0 + 1.0));
    let at = |yy: usize, xx: usize| img[(yy * w + xx) * c + ch];
    (1.0 - fy) * ((1.0 - fx) * at(y0c, x0c) + fx * at(y0c, x1c))
        + fy * ((1.0 - fx) * at(y1c, x0c) + fx * at(y1c, x1c))
}

/// Bilinear mass of an all-ones canvas with zero padding: 1 deep inside,
/// falling to 0 across the boundary.
fn inside_weight(x: f64, y: f64, h: usize, w: usize) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let inside = |xx: f64, yy: f64| xx >= 0.0 && xx <= (w - 1) as f64 && yy >= 0.0 && yy <= (h - 1) as f64;
    let mut mass = 0.0;
    for (wy, yy) in [(1.0 - fy, y0), (fy, y0 + 1.0)] {
        for (wx, xx) in [(1.0 - fx, x0), (fx, x0 + 1.0)] {
            if wx * wy > 0.0 && inside(xx, yy) {
                mass += wx * wy;
            }
        }
    }
    mass
}

/// Smooth seeded value-noise field in [0.02, 0.42]: dark enough that a 0.5
/// threshold never mistakes background for paper.
fn background_field(seed: u64, h: usize, w: usize) -> Vec<f64> {
    const G: usize = 7;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid: Vec<f64> = (0..G * G).map(|_| rng.gen_range(0.02..0.42)).collect();
    let mut out = vec![0.0; h * w];
    for v in 0..h {
        for u in 0..w {
            let gx = u as f64 / (w - 1).max(1) as f64 * (G - 1) as f64;
            let gy = v as f64 / (h - 1).max(1) as f64 * (G - 1) as f64;
            out[v * w + u] = sample_clamped(&grid, G, G, 1, gx, gy, 0);
        }
    }
    out
}

fn erode_once(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for v in 0..h {
        for u in 0..w {
            if v == 0 || u == 0 || v == h - 1 || u == w - 1 {
                continue;
            }
            out[v * w + u] = mask[v * w + u]
                && mask[(v - 1) * w + u]
                && mask[(v + 1) * w + u]
                && mask[v * w + u - 1]
                && mask[v * w + u + 1];
        }
    }
    out
}

struct Rendered {
    clean: Vec<f64>,
    distorted: Vec<f64>,
    mask: Vec<f64>,
    flow: FlowField<f64>,
    converged_mae: f64,
}

fn render_attempt(page: &PageSpec, warp: &WarpSpec, background_seed: u64) -> Result<Rendered> {
    let (h, w) = (page.h, page.w);
    let clean_t: Tensor<f64> = gen_page(page)?;
    let clean = clean_t.data().to_vec();
    let map = gen_warp(warp, h, w)?;
    let bg = background_field(background_seed, h, w);
    let mut distorted = vec![0.0f64; h * w * 3];
    let mut mask = vec![0.0f64; h * w];
    for v in 0..h {
        for u in 0..w {
            let (x, y) = map.eval(u as f64, v as f64);
            let on_page = inside_weight(x, y, h, w) >= 0.5;
            mask[v * w + u] = if on_page { 1.0 } else { 0.0 };
            for ch in 0..3 {
                distorted[(v * w + u) * 3 + ch] = if on_page {
                    sample_clamped(&clean, h, w, 3, x, y, ch)
                } else {
                    bg[v * w + u]
                };
            }
        }
    }
    let flow = invert_map(&map, 0.01, 25)?;
    let mae = certificate_mae(&clean, &distorted, &mask, &flow, h, w);
    Ok(Rendered { clean, distorted, mask, flow, converged_mae: mae })
}

/// Round-trip certificate: warping the masked distorted image by the
/// ground-truth flow must recover the clean page. Returns the mean absolute
/// error over the eroded valid interior (infinite when that region is empty).
fn certificate_mae(
    clean: &[f64],
    distorted: &[f64],
    mask: &[f64],
    flow: &FlowField<f64>,
    h: usize,
    w: usize,
) -> f64 {
    let mut excluded = distorted.to_vec();
    for i in 0..h * w {
        for ch in 0..3 {
            excluded[i * 3 + ch] *= mask[i];
        }
    }
    let mut valid = vec![false; h * w];
    for v in 0..h {
        for u in 0..w {
            let du = flow.disp.at3(v, u, 0);
            let dv = flow.disp.at3(v, u, 1);
            let (sx, sy) = (u as f64 + du, v as f64 + dv);
            let x0 = sx.floor().max(0.0) as usize;
            let y0 = sy.floor().max(0.0) as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            valid[v * w + u] = mask[y0.min(h - 1) * w + x0.min(w - 1)] == 1.0
                && mask[y0.min(h - 1) * w + x1] == 1.0
                && mask[y1 * w + x0.min(w - 1)] == 1.0
                && mask[y1 * w + x1] == 1.0;
        }
    }
    let valid = erode_once(&erode_once(&valid, h, w), h, w);
    let mut err_sum = 0.0;
    let mut err_n = 0usize;
    for v in 0..h {
        for u in 0..w {
            if !valid[v * w + u] {
                continue;
            }
            let du = flow.disp.at3(v, u, 0);
            let dv = flow.disp.at3(v, u, 1);
            for ch in 0..3 {
                let r = sample_clamped(&excluded, h, w, 3, u as f64 + du, v as f64 + dv, ch);
                err_sum += (r - clean[(v * w + u) * 3 + ch]).abs();
                err_n += 1;
            }
        }
    }
    if err_n == 0 { f64::INFINITY } else { err_sum / err_n as f64 }
}

/// Re-checks the round-trip certificate on a stored sample. Shapes must be
/// [H,W,3] clean and distorted, [H,W,1] mask, [H,W,2] flow.
pub fn round_trip_error<S: Scalar>(
    clean: &Tensor<S>,
    distorted: &Tensor<S>,
    mask: &Tensor<S>,
    flow: &FlowField<S>,
) -> Result<f64> {
    let shape = clean.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Geometry(format!("clean image must be [H,W,3], got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    if distorted.shape() != shape {
        return Err(Error::Geometry("clean and distorted extents differ".into()));
    }
    if mask.shape() != [h, w, 1] || flow.disp.shape() != [h, w, 2] {
        return Err(Error::Geometry("mask must be [H,W,1] and flow [H,W,2]".into()));
    }
    let to64 = |t: &Tensor<S>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
    let flow64 = FlowField::new(Tensor::new(vec![h, w, 2], to64(&flow.disp))?)?;
    Ok(certificate_mae(&to64(clean), &to64(distorted), &to64(mask), &flow64, h, w))
}

pub const ROUND_TRIP_TOL: f64 = 0.05;
const MAX_ATTEMPTS: u32 = 8;

fn cast<S: Scalar>(shape: &[usize], data: &[f64]) -> Result<Tensor<S>> {
    Tensor::new(shape.to_vec(), data.iter().map(|&v| S::from_f64(v)).collect())
}

/// Generates one certified sample. A failed round-trip certificate rejects
/// the draw and retries with stepped warp/background seeds; the final spec
/// is recorded in the meta, so replaying it is deterministic.
pub fn gen_sample<S: Scalar>(
    page: &PageSpec,
    warp: &WarpSpec,
    background_seed: u64,
) -> Result<SyntheticSample<S>> {
    page.validate()?;
    warp.validate()?;
    let (h, w) = (page.h, page.w);
    let mut worst = f64::INFINITY;
    for attempt in 0..MAX_ATTEMPTS {
        let mut warp_try = warp.clone();
        warp_try.seed = warp.seed.wrapping_add(attempt as u64);
        let bg_try = background_seed.wrapping_add(attempt as u64);
        let r = render_attempt(page, &warp_try, bg_try)?;
        if r.converged_mae < ROUND_TRIP_TOL {
            return Ok(SyntheticSample {
                clean: cast(&[h, w, 3], &r.clean)?,
                distorted: cast(&[h, w, 3], &r.distorted)?,
                mask: cast(&[h, w, 1], &r.mask)?,
                gt_flow: FlowField::new(cast(&[h, w, 2], r.flow.disp.data())?)?,
                meta: SampleMeta {
                    page: page.clone(),
                    warp: warp_try,
                    background_seed: bg_try,
                    attempts: attempt,
                },
            });
        }
        worst = worst.min(r.converged_mae);
    }
    Err(Error::Validation(format!(
        "round-trip certificate failed {MAX_ATTEMPTS} times (best mean error {worst:.4}, \
         tolerance {ROUND_TRIP_TOL})"
    )))
}

/// Threshold segmentation for dark-background corpora: binarize at 0.5,
/// fill enclosed dark regions (the text lines), keep the largest
/// 4-connected component.
pub fn threshold_segment<S: Scalar>(image: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::Geometry(format!("expected [H,W,3] image, got {s:?}"))),
    };
    let mut fg = vec![false; h * w];
    for i in 0..h * w {
        let mean = (image.data()[i * 3].as_f64()
            + image.data()[i * 3 + 1].as_f64()
            + image.data()[i * 3 + 2].as_f64())
            / 3.0;
        fg[i] = mean > 0.5;
    }
    if fg.iter().all(|&v| !v) {
        return Err(Error::Segmentation("no pixel above the 0.5 threshold".into()));
    }
    // fill holes: background connected to the image edge survives, every
    // other non-foreground region is enclosed and becomes foreground
    let mut outside = vec![false; h * w];
    let mut stack = Vec::new();
    for v in 0..h {
        for u in 0..w {
            if (v == 0 || u == 0 || v == h - 1 || u == w - 1) && !fg[v * w + u] {
                outside[v * w + u] = true;
                stack.push((v, u));
            }
        }
    }
    while let Some((v, u)) = stack.pop() {
        let push = |vv: usize, uu: usize, outside: &mut Vec<bool>, stack: &mut Vec<(usize, usize)>| {
            let i = vv * w + uu;
            if !fg[i] && !outside[i] {
                outside[i] = true;
                stack.push((vv, uu));
            }
        };
        if v > 0 {
            push(v - 1, u, &mut outside, &mut stack);
        }
        if v + 1 < h {
            push(v + 1, u, &mut outside, &mut stack);
        }
        if u > 0 {
            push(v, u - 1, &mut outside, &mut stack);
        }
        if u + 1 < w {
            push(v, u + 1, &mut outside, &mut stack);
        }
    }
    for i in 0..h * w {
        fg[i] = fg[i] || !outside[i];
    }
    // largest 4-connected component
    let mut label = vec![0u32; h * w];
    let mut next = 0u32;
    let mut best = (0u32, 0usize);
    for start in 0..h * w {
        if !fg[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        let mut size = 0usize;
        let mut stack = vec![start];
        label[start] = next;
        while let Some(i) = stack.pop() {
            size += 1;
            let (v, u) = (i / w, i % w);
            let push = |j: usize, label: &mut Vec<u32>, stack: &mut Vec<usize>| {
                if fg[j] && label[j] == 0 {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if v > 0 {
                push(i - w, &mut label, &mut stack);
            }
            if v + 1 < h {
                push(i + w, &mut label, &mut stack);
            }
            if u > 0 {
                push(i - 1, &mut label, &mut stack);
            }
            if u + 1 < w {
                push(i + 1, &mut label, &mut stack);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    let data: Vec<S> = label
        .iter()
        .map(|&l| if l == best.0 { S::one() } else { S::zero() })
        .collect();
    Tensor::new(vec![h, w, 1], data)
}
