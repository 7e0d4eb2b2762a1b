//! Training losses on the tape and image-quality metrics.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical_fields::CanonicalFields;
use crate::diffkernel::{Graph, KernelError, ParamStore, Real, SparseMap, Tensor, Unary, Var};
use crate::imageio::RgbImage;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    Size(u32, u32, u32, u32),
    #[error("image {0}x{1} is smaller than the {2}x{2} ssim window")]
    TooSmall(u32, u32, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mse: f64,
    /// Weight of the perceptual (gradient-difference) term.
    pub perc: f64,
    pub rec: f64,
    pub reg: f64,
    pub mask: f64,
    /// Weight of semantic smoothness inside the regularizer.
    pub smt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            perc: 0.1,
            rec: 1.0,
            reg: 1.0,
            mask: 0.1,
            smt: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.mse, self.perc, self.rec, self.reg, self.mask, self.smt];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            mse: self.mse * k,
            perc: self.perc * k,
            rec: self.rec * k,
            reg: self.reg * k,
            mask: self.mask * k,
            smt: self.smt * k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

fn same_shape<T: Real>(g: &Graph<T>, op: &str, a: Var, b: Var) -> Result<(), KernelError> {
    if g.shape(a) != g.shape(b) {
        return Err(KernelError::ShapeMismatch {
            op: op.into(),
            left: g.shape(a).to_vec(),
            right: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Weighted mean of squared differences. `weights` is `[n,1]`; rows with
/// zero weight are ignored. Without weights every row counts.
pub fn weighted_mse<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    weights: Option<Var>,
) -> Result<Var, KernelError> {
    same_shape(g, "weighted_mse", pred, target)?;
    let d = g.sub(pred, target)?;
    let sq = g.square(d)?;
    let cols = g.shape(pred)[1];
    match weights {
        None => Ok(g.mean(sq)),
        Some(w) => {
            let total: f64 = g.value(w).data().iter().map(|x| x.to_f64_lossy()).sum();
            if total <= 0.0 {
                return Ok(g.mean(sq));
            }
            let ws = g.mul_col(sq, w)?;
            let s = g.sum(ws);
            Ok(g.scale(s, T::from_f64_lossy(1.0 / (total * cols as f64))))
        }
    }
}

/// Linear map from a row-major `[h*w, ch]` image to its horizontal and
/// vertical differences at `scales` dyadic average-pooling levels. Rows are
/// scaled so the squared norm of the output is the mean over scales of the
/// per-scale mean squared difference.
pub fn gradient_map<T: Real>(width: usize, height: usize, channels: usize, scales: usize) -> SparseMap<T> {
    let mut levels = Vec::new();
    for l in 0..scales {
        let s = 1usize << l;
        let (ws, hs) = (width / s, height / s);
        if ws == 0 || hs == 0 {
            break;
        }
        let count = (ws.saturating_sub(1) * hs + ws * hs.saturating_sub(1)) * channels;
        if count > 0 {
            levels.push((s, ws, hs, count));
        }
    }
    let n_levels = levels.len().max(1) as f64;
    let mut rows: Vec<Vec<(usize, T)>> = Vec::new();
    for &(s, ws, hs, count) in &levels {
        let norm = 1.0 / ((count as f64) * n_levels).sqrt();
        let w_pool = norm / (s * s) as f64;
        let block = |px: usize, py: usize, c: usize, sign: f64, out: &mut Vec<(usize, T)>| {
            for dy in 0..s {
                for dx in 0..s {
                    let pix = (py * s + dy) * width + px * s + dx;
                    out.push((pix * channels + c, T::from_f64_lossy(sign * w_pool)));
                }
            }
        };
        for py in 0..hs {
            for px in 0..ws {
                for c in 0..channels {
                    if px + 1 < ws {
                        let mut r = Vec::with_capacity(2 * s * s);
                        block(px + 1, py, c, 1.0, &mut r);
                        block(px, py, c, -1.0, &mut r);
                        rows.push(r);
                    }
                    if py + 1 < hs {
                        let mut r = Vec::with_capacity(2 * s * s);
                        block(px, py + 1, c, 1.0, &mut r);
                        block(px, py, c, -1.0, &mut r);
                        rows.push(r);
                    }
                }
            }
        }
    }
    let n = rows.len();
    SparseMap::from_rows(rows, vec![n, 1])
}

/// Multi-scale gradient-difference loss between two `[h*w, ch]` images.
pub fn gradient_difference<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    width: usize,
    height: usize,
    scales: usize,
) -> Result<Var, KernelError> {
    same_shape(g, "gradient_difference", pred, target)?;
    let shape = g.shape(pred).to_vec();
    if shape[0] != width * height {
        return Err(KernelError::ShapeMismatch {
            op: "gradient_difference".into(),
            left: shape,
            right: vec![width * height, 0],
        });
    }
    let map = Arc::new(gradient_map::<T>(width, height, shape[1], scales));
    if map.out_shape[0] == 0 {
        return Ok(g.scalar(T::zero()));
    }
    let d = g.sub(pred, target)?;
    let grads = g.sparse_map(d, map)?;
    let sq = g.square(grads)?;
    Ok(g.sum(sq))
}

pub const PERCEPTUAL_SCALES: usize = 3;

/// A contiguous image patch rendered alongside the scattered rays.
#[derive(Clone, Copy, Debug)]
pub struct PatchPair {
    pub pred: Var,
    pub target: Var,
    pub width: usize,
    pub height: usize,
}

/// Reconstruction inputs. `pred`/`target` are `[n,3]`; `foreground` is the
/// `[n,1]` dilated-foreground indicator; the perceptual term needs image
/// structure and is computed on `patch` when present.
#[derive(Clone, Copy, Debug)]
pub struct RecInputs {
    pub pred: Var,
    pub target: Var,
    pub foreground: Option<Var>,
    pub patch: Option<PatchPair>,
}

/// `perc * L_perc + mse * L_mse`.
pub fn loss_rec<T: Real>(g: &mut Graph<T>, inputs: &RecInputs, w: &LossWeights) -> Result<Var, KernelError> {
    let mse = weighted_mse(g, inputs.pred, inputs.target, inputs.foreground)?;
    let mut total = g.scale(mse, T::from_f64_lossy(w.mse));
    if let Some(p) = inputs.patch {
        if w.perc > 0.0 {
            let perc = gradient_difference(g, p.pred, p.target, p.width, p.height, PERCEPTUAL_SCALES)?;
            let perc = g.scale(perc, T::from_f64_lossy(w.perc));
            total = g.add(total, perc)?;
        }
    }
    Ok(total)
}

pub const PROB_CLAMP: f64 = 1e-6;

/// Composited semantics renormalised to a distribution:
/// `(S + eps/C) / (alpha + eps)`.
pub fn renormalize_semantics<T: Real>(g: &mut Graph<T>, semantics: Var, alpha: Var, eps: f64) -> Result<Var, KernelError> {
    let c = g.shape(semantics)[1];
    let smoothed = g.add_scalar(semantics, T::from_f64_lossy(eps / c as f64));
    let denom = g.add_scalar(alpha, T::from_f64_lossy(eps));
    let inv = g.unary(denom, Unary::Recip)?;
    g.mul_col(smoothed, inv)
}

/// Mean negative log-likelihood of `labels` under row distributions
/// `probs` `[n,C]`, restricted to rows where `labels` is `Some`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, probs: Var, labels: &[Option<u8>]) -> Result<Var, KernelError> {
    let (n, c) = (g.shape(probs)[0], g.shape(probs)[1]);
    if labels.len() != n {
        return Err(KernelError::ShapeMismatch {
            op: "cross_entropy".into(),
            left: vec![n, c],
            right: vec![labels.len()],
        });
    }
    let index: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter_map(|(r, l)| l.map(|l| r * c + (l as usize).min(c - 1)))
        .collect();
    if index.is_empty() {
        return Ok(g.scalar(T::zero()));
    }
    let m = index.len();
    let picked = g.gather(probs, Arc::new(index), vec![m, 1])?;
    let clamped = g.clamp(picked, T::from_f64_lossy(PROB_CLAMP), T::one());
    let logp = g.log(clamped)?;
    let mean = g.mean(logp);
    Ok(g.scale(mean, -T::one()))
}

/// Composited semantics divided by their per-pixel sum, which equals the
/// accumulated opacity.
pub fn row_normalize<T: Real>(g: &mut Graph<T>, semantics: Var) -> Result<Var, KernelError> {
    let sum = g.row_sums(semantics);
    let sum = g.clamp(sum, T::from_f64_lossy(1e-8), T::max_value());
    let inv = g.unary(sum, Unary::Recip)?;
    g.mul_col(semantics, inv)
}

/// Rendered UVS for a batch of pixels plus the matching pseudo-labels.
pub struct RegInputs<'a> {
    pub u: Var,
    pub v: Var,
    /// Composited semantics `[n,C]` (unnormalised).
    pub semantics: Var,
    pub target_u: &'a [f32],
    pub target_v: &'a [f32],
    /// Class per pixel; pixels with label 0 are not body pixels.
    pub labels: &'a [u8],
    /// Precomputed smoothness term, weighted by `smt`.
    pub smoothness: Option<Var>,
}

/// Breakdown of the regularizer, also returned as values for logging.
pub struct RegTerms {
    pub total: Var,
    pub u: Var,
    pub v: Var,
    pub s: Var,
}

/// U and V MSE over body pixels, cross-entropy of renormalised S, and
/// weighted smoothness.
pub fn loss_reg<T: Real>(g: &mut Graph<T>, inputs: &RegInputs<'_>, w: &LossWeights) -> Result<RegTerms, KernelError> {
    let n = g.shape(inputs.u)[0];
    if inputs.target_u.len() != n || inputs.target_v.len() != n || inputs.labels.len() != n {
        return Err(KernelError::ShapeMismatch {
            op: "loss_reg".into(),
            left: vec![n, 1],
            right: vec![inputs.target_u.len(), inputs.target_v.len(), inputs.labels.len()],
        });
    }
    let body: Vec<T> = inputs
        .labels
        .iter()
        .map(|&l| if l > 0 { T::one() } else { T::zero() })
        .collect();
    let body = g.constant(Tensor::new(vec![n, 1], body)?)?;
    let col = |g: &mut Graph<T>, v: &[f32]| -> Result<Var, KernelError> {
        g.constant(Tensor::new(vec![n, 1], v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect())?)
    };
    let tu = col(g, inputs.target_u)?;
    let tv = col(g, inputs.target_v)?;
    let any_body = inputs.labels.iter().any(|&l| l > 0);
    let (lu, lv) = if any_body {
        (
            weighted_mse(g, inputs.u, tu, Some(body))?,
            weighted_mse(g, inputs.v, tv, Some(body))?,
        )
    } else {
        (g.scalar(T::zero()), g.scalar(T::zero()))
    };
    let probs = row_normalize(g, inputs.semantics)?;
    let labels: Vec<Option<u8>> = inputs.labels.iter().map(|&l| (l > 0).then_some(l)).collect();
    let ls = cross_entropy(g, probs, &labels)?;
    let uv = g.add(lu, lv)?;
    let mut total = g.add(uv, ls)?;
    if let Some(smt) = inputs.smoothness {
        let s = g.scale(smt, T::from_f64_lossy(w.smt));
        total = g.add(total, s)?;
    }
    Ok(RegTerms {
        total,
        u: lu,
        v: lv,
        s: ls,
    })
}

/// Uniform samples in a ball of radius `eps`, `[m,3]`.
pub fn sample_ball(rng: &mut impl Rng, m: usize, eps: f64) -> Vec<[f64; 3]> {
    (0..m)
        .map(|_| loop {
            let p: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            if p.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                break p.map(|x| x * eps);
            }
        })
        .collect()
}

pub const DEFAULT_SMOOTHNESS_RADIUS: f64 = 0.01;

/// Mean squared difference of semantic distributions between canonical
/// points and jittered copies, viewed along the same directions.
pub fn loss_smoothness<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore,
    fields: &CanonicalFields,
    points: &Tensor<T>,
    directions: &Tensor<T>,
    jitter: &Tensor<T>,
) -> Result<Var, KernelError> {
    let m = points.rows();
    if m == 0 {
        return Ok(g.scalar(T::zero()));
    }
    let x = g.constant(points.clone())?;
    let j = g.constant(jitter.clone())?;
    let xj = g.add(x, j)?;
    let both = g.concat_rows(&[x, xj])?;
    let d = g.constant(directions.clone())?;
    let dd = g.concat_rows(&[d, d])?;
    let feat = fields.volume.evaluate(g, store, both)?;
    let uvs = fields.uvs.evaluate(g, store, feat.feature, dd)?;
    let probs = g.softmax(uvs.logits);
    let a = g.slice_rows(probs, 0, m)?;
    let b = g.slice_rows(probs, m, 2 * m)?;
    let diff = g.sub(a, b)?;
    let sq = g.square(diff)?;
    let per_point = g.row_sums(sq);
    Ok(g.mean(per_point))
}

/// Binary cross-entropy between `alpha` and `mask` (both `[n,1]`) with
/// the probability clamped to `[1e-6, 1-1e-6]`.
pub fn loss_mask<T: Real>(g: &mut Graph<T>, alpha: Var, mask: Var) -> Result<Var, KernelError> {
    same_shape(g, "loss_mask", alpha, mask)?;
    let a = g.clamp(alpha, T::from_f64_lossy(PROB_CLAMP), T::from_f64_lossy(1.0 - PROB_CLAMP));
    let la = g.log(a)?;
    let na = g.scale(a, -T::one());
    let one_minus_a = g.add_scalar(na, T::one());
    let lna = g.log(one_minus_a)?;
    let nm = g.scale(mask, -T::one());
    let one_minus_m = g.add_scalar(nm, T::one());
    let p = g.mul(mask, la)?;
    let q = g.mul(one_minus_m, lna)?;
    let s = g.add(p, q)?;
    let mean = g.mean(s);
    Ok(g.scale(mean, -T::one()))
}

/// Loss components computed on one batch. Absent terms contribute nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossComponents {
    pub rec: Option<Var>,
    pub reg: Option<Var>,
    pub mask: Option<Var>,
}

/// Which terms entered a total, with their unweighted values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub rec: Option<f64>,
    pub reg: Option<f64>,
    pub mask: Option<f64>,
}

/// Warm-up: `rec*L_rec + reg*L_reg`. Joint: `rec*L_rec + mask*L_mask`;
/// the regularizer is never part of the joint objective.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    c: &LossComponents,
    w: &LossWeights,
    phase: Phase,
) -> Result<(Var, LossReport), KernelError> {
    let mut total = g.scalar(T::zero());
    let mut report = LossReport::default();
    let mut add = |g: &mut Graph<T>, term: Option<Var>, weight: f64, slot: &mut Option<f64>| -> Result<(), KernelError> {
        if let Some(v) = term {
            *slot = Some(g.value(v).item().to_f64_lossy());
            let s = g.scale(v, T::from_f64_lossy(weight));
            total = g.add(total, s)?;
        }
        Ok(())
    };
    add(g, c.rec, w.rec, &mut report.rec)?;
    match phase {
        Phase::Warmup => add(g, c.reg, w.reg, &mut report.reg)?,
        Phase::Joint => add(g, c.mask, w.mask, &mut report.mask)?,
    }
    report.total = g.value(total).item().to_f64_lossy();
    Ok((total, report))
}

fn check_sizes(a: &RgbImage, b: &RgbImage) -> Result<(), MetricError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricError::Size(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio for unit peak, capped at 99 dB.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricError> {
    check_sizes(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> Vec<f64> {
    let h = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - h).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|x| x / s).collect()
}

/// Separable valid-mode filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// `C1 = 0.01^2`, `C2 = 0.03^2`, averaged over valid windows and channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricError> {
    check_sizes(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::TooSmall(a.width, a.height, SSIM_WINDOW));
    }
    let k = gaussian_kernel();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let pa: Vec<f64> = (0..w * h).map(|i| a.data[3 * i + ch] as f64).collect();
        let pb: Vec<f64> = (0..w * h).map(|i| b.data[3 * i + ch] as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let saa = filter_valid(&prod(&pa, &pa), w, h, &k);
        let sbb = filter_valid(&prod(&pb, &pb), w, h, &k);
        let sab = filter_valid(&prod(&pa, &pb), w, h, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Metric summary in the report format `{"psnr", "ssim", "frames"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub frames: usize,
}

/// Mean PSNR and SSIM over image pairs.
pub fn evaluate_pairs<'a>(pairs: impl IntoIterator<Item = (&'a RgbImage, &'a RgbImage)>) -> Result<MetricReport, MetricError> {
    let (mut p, mut s, mut n) = (0.0, 0.0, 0usize);
    for (a, b) in pairs {
        p += psnr(a, b)?;
        s += ssim(a, b)?;
        n += 1;
    }
    let d = n.max(1) as f64;
    Ok(MetricReport {
        psnr: p / d,
        ssim: s / d,
        frames: n,
    })
}
