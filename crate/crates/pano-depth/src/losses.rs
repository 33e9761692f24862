//! The training objective: self-supervised image/depth/pose consistency and
//! scale-shift-aligned supervised losses.
//!
//! Every loss exists in two forms. The plain functions evaluate the exact
//! formulas (true absolute values) and are what tests compare against scalar
//! oracles; the `*_on_tape` composites build the same expressions on an
//! autodiff [`Tape`] with the smoothed absolute value, which is what the
//! optimizer differentiates. Masked means divide by the number of valid
//! pixels (times channels); an empty mask is a degenerate-coverage error.

use crate::autodiff::{Tape, Var};
use crate::error::{PanoError, Result};
use crate::tensor::{Mask, Tensor};
use crate::warp::{CameraMotion, MotionVars};

/// SSIM stabilizers for unit dynamic range: (0.01)², (0.03)².
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

/// Balancing weights of the total objective and the L1/SSIM mix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_i: f64,
    pub lambda_d: f64,
    /// Weight of the L1 term inside the image consistency loss; the SSIM
    /// term takes `1 − alpha`.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_i: 0.3,
            lambda_d: 0.15,
            alpha: 0.15,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_i < 0.0 || self.lambda_d < 0.0 {
            return Err(PanoError::invalid("loss weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(PanoError::invalid("alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Scale-shift aligned depth `s·D + t`.
#[derive(Debug, Clone)]
pub struct AlignedDepth {
    pub s: f64,
    pub t: f64,
    pub depth: Tensor,
    /// Set when the fit was singular (constant prediction); the fallback is
    /// s = 1, t = mean(gt − pred).
    pub degenerate: bool,
}

/// Individual objective terms; absent terms contribute zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub image: Option<f64>,
    pub depth: Option<f64>,
    pub pose: Option<f64>,
    pub pixel: Option<f64>,
    pub gradient: Option<f64>,
}

/// `λ_I·L_I + λ_D·L_D + L_P + L_pix + L_grad` with absent terms as zero.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.lambda_i * c.image.unwrap_or(0.0)
        + w.lambda_d * c.depth.unwrap_or(0.0)
        + c.pose.unwrap_or(0.0)
        + c.pixel.unwrap_or(0.0)
        + c.gradient.unwrap_or(0.0)
}

// ---- SSIM -------------------------------------------------------------------

/// 3×3 box filter matching the panorama topology: columns wrap, rows clamp.
fn box3(map: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                for dx in -1i64..=1 {
                    let xx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                    acc += map[yy * w + xx];
                }
            }
            out[y * w + x] = acc / 9.0;
        }
    }
    out
}

/// Per-pixel structural similarity with 3×3 mean-filter statistics, computed
/// independently per channel. Output has the input shape, values in [−1, 1].
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(PanoError::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    let (c, h, w) = a.chw()?;
    let n = h * w;
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        let pa = &a.data()[ch * n..(ch + 1) * n];
        let pb = &b.data()[ch * n..(ch + 1) * n];
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_a = box3(pa, h, w);
        let mu_b = box3(pb, h, w);
        let m_aa = box3(&aa, h, w);
        let m_bb = box3(&bb, h, w);
        let m_ab = box3(&ab, h, w);
        for i in 0..n {
            let va = m_aa[i] - mu_a[i] * mu_a[i];
            let vb = m_bb[i] - mu_b[i] * mu_b[i];
            let cov = m_ab[i] - mu_a[i] * mu_b[i];
            out[ch * n + i] = ((2.0 * mu_a[i] * mu_b[i] + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

// ---- self-supervised losses --------------------------------------------------

fn check_same_shape(tensors: &[&Tensor]) -> Result<(usize, usize, usize)> {
    let first = tensors[0].chw()?;
    for t in &tensors[1..] {
        if t.chw()? != first {
            return Err(PanoError::ShapeMismatch {
                expected: format!("{:?}", tensors[0].shape()),
                got: format!("{:?}", t.shape()),
            });
        }
    }
    Ok(first)
}

fn check_mask(mask: &Mask, h: usize, w: usize) -> Result<usize> {
    if (mask.height(), mask.width()) != (h, w) {
        return Err(PanoError::ShapeMismatch {
            expected: format!("{h}×{w} mask"),
            got: format!("{}×{}", mask.height(), mask.width()),
        });
    }
    let count = mask.count();
    if count == 0 {
        return Err(PanoError::DegenerateCoverage);
    }
    Ok(count)
}

/// Bidirectional photometric consistency: per covered pixel,
/// `α·(|V′−V′_syn| + |V−V_syn|) + (1−α)·(|1−SM(V,V_syn)| + |1−SM(V′,V′_syn)|)`,
/// channel-averaged and then averaged over the mask.
pub fn image_consistency(
    v: &Tensor,
    v_syn: &Tensor,
    v_prime: &Tensor,
    v_prime_syn: &Tensor,
    mask: &Mask,
    weights: &LossWeights,
) -> Result<f64> {
    let (c, h, w) = check_same_shape(&[v, v_syn, v_prime, v_prime_syn])?;
    let count = check_mask(mask, h, w)?;
    let sm_fwd = ssim(v, v_syn)?;
    let sm_bwd = ssim(v_prime, v_prime_syn)?;
    let n = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        for i in 0..n {
            if !mask.data()[i] {
                continue;
            }
            let o = ch * n + i;
            let l1 = (v_prime.data()[o] - v_prime_syn.data()[o]).abs()
                + (v.data()[o] - v_syn.data()[o]).abs();
            let sm = (1.0 - sm_fwd.data()[o]).abs() + (1.0 - sm_bwd.data()[o]).abs();
            total += weights.alpha * l1 + (1.0 - weights.alpha) * sm;
        }
    }
    Ok(total / (c * count) as f64)
}

/// Bidirectional depth consistency: masked mean of `|D′−D′_syn| + |D−D_syn|`.
pub fn depth_consistency(
    d: &Tensor,
    d_syn: &Tensor,
    d_prime: &Tensor,
    d_prime_syn: &Tensor,
    mask: &Mask,
) -> Result<f64> {
    let (c, h, w) = check_same_shape(&[d, d_syn, d_prime, d_prime_syn])?;
    let count = check_mask(mask, h, w)?;
    let n = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        for i in 0..n {
            if mask.data()[i] {
                let o = ch * n + i;
                total += (d_prime.data()[o] - d_prime_syn.data()[o]).abs()
                    + (d.data()[o] - d_syn.data()[o]).abs();
            }
        }
    }
    Ok(total / (c * count) as f64)
}

/// Opposite-direction constraint on the two directed motion estimates:
/// mean over the four components of `|fwd + bwd|`.
pub fn pose_consistency(fwd: &CameraMotion, bwd: &CameraMotion) -> f64 {
    fwd.components()
        .iter()
        .zip(bwd.components())
        .map(|(f, b)| (f + b).abs())
        .sum::<f64>()
        / 4.0
}

// ---- supervised losses ---------------------------------------------------------

/// Closed-form least squares for `min Σ (s·pred + t − gt)²` over the valid
/// pixels. A singular system (constant prediction) falls back to
/// `s = 1, t = mean(gt − pred)` with the degenerate flag set.
pub fn align_scale_shift(pred: &Tensor, gt: &Tensor, valid: &Mask) -> Result<AlignedDepth> {
    let (c, h, w) = check_same_shape(&[pred, gt])?;
    if c != 1 {
        return Err(PanoError::invalid("alignment expects single-channel maps"));
    }
    let count = check_mask(valid, h, w)?;
    if count < 2 {
        return Err(PanoError::invalid(
            "alignment needs at least two valid pixels",
        ));
    }
    let (mut sp, mut sg, mut spp, mut spg) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..h * w {
        if valid.data()[i] {
            let (p, g) = (pred.data()[i], gt.data()[i]);
            sp += p;
            sg += g;
            spp += p * p;
            spg += p * g;
        }
    }
    let nf = count as f64;
    let det = nf * spp - sp * sp;
    let (s, t, degenerate) = if det.abs() <= 1e-12 * nf * spp.max(1.0) {
        (1.0, (sg - sp) / nf, true)
    } else {
        ((nf * spg - sp * sg) / det, (spp * sg - sp * spg) / det, false)
    };
    let depth = pred.map(|p| s * p + t);
    Ok(AlignedDepth {
        s,
        t,
        depth,
        degenerate,
    })
}

/// Mean absolute error of the aligned depth over the valid pixels.
pub fn pixel_loss(aligned: &AlignedDepth, gt: &Tensor, mask: &Mask) -> Result<f64> {
    let (_, h, w) = check_same_shape(&[&aligned.depth, gt])?;
    let count = check_mask(mask, h, w)?;
    let mut total = 0.0;
    for i in 0..h * w {
        if mask.data()[i] {
            total += (aligned.depth.data()[i] - gt.data()[i]).abs();
        }
    }
    Ok(total / count as f64)
}

fn edge_masks(mask: &Mask) -> (Mask, Mask) {
    let (h, w) = (mask.height(), mask.width());
    let mut mx = Mask::new(h, w, vec![false; h * w]).expect("dims");
    let mut my = Mask::new(h, w, vec![false; h * w]).expect("dims");
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                mx.set(y, x, mask.get(y, x) && mask.get(y, x + 1));
            }
            if y + 1 < h {
                my.set(y, x, mask.get(y, x) && mask.get(y + 1, x));
            }
        }
    }
    (mx, my)
}

fn pool2_map(map: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (nh, nw) = (h / 2, w / 2);
    let mut out = vec![0.0; nh * nw];
    for y in 0..nh {
        for x in 0..nw {
            out[y * nw + x] = 0.25
                * (map[2 * y * w + 2 * x]
                    + map[2 * y * w + 2 * x + 1]
                    + map[(2 * y + 1) * w + 2 * x]
                    + map[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    out
}

/// Multi-scale edge-aware loss: forward differences of the aligned error at
/// scales 1, ½, ¼, ⅛ (2× average pooling between scales, masks pooled with
/// logical AND), each scale contributing
/// `(Σ|∇_x e| + Σ|∇_y e|) / n_valid`. Differences are taken on the image
/// grid only (no seam wrap) and need both pixels valid.
pub fn gradient_loss(aligned: &AlignedDepth, gt: &Tensor, mask: &Mask) -> Result<f64> {
    let (_, h, w) = check_same_shape(&[&aligned.depth, gt])?;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(PanoError::invalid(format!(
            "gradient loss needs dimensions divisible by 8, got {h}×{w}"
        )));
    }
    check_mask(mask, h, w)?;
    let mut err: Vec<f64> = aligned
        .depth
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| p - g)
        .collect();
    let mut m = mask.clone();
    let (mut ch, mut cw) = (h, w);
    let mut total = 0.0;
    for scale in 0..4 {
        if scale > 0 {
            err = pool2_map(&err, ch, cw);
            m = m.pool2_and()?;
            ch /= 2;
            cw /= 2;
        }
        let n_k = m.count();
        if n_k == 0 {
            continue;
        }
        let (mx, my) = edge_masks(&m);
        let mut acc = 0.0;
        for y in 0..ch {
            for x in 0..cw {
                if mx.get(y, x) {
                    acc += (err[y * cw + x + 1] - err[y * cw + x]).abs();
                }
                if my.get(y, x) {
                    acc += (err[(y + 1) * cw + x] - err[y * cw + x]).abs();
                }
            }
        }
        total += acc / n_k as f64;
    }
    Ok(total)
}

// ---- tape composites ------------------------------------------------------------

/// Masked mean over pixels (and channels) as a tape scalar.
pub(crate) fn masked_mean_on_tape(tape: &mut Tape, x: Var, mask: &Mask) -> Result<Var> {
    let (c, h, w) = tape.value(x).chw()?;
    let count = check_mask(mask, h, w)?;
    let mt = tape.constant(mask.to_tensor());
    let masked = tape.mul(x, mt)?;
    let s = tape.sum(masked)?;
    tape.scale_add(s, 1.0 / (c * count) as f64, 0.0)
}

fn box3_on_tape(tape: &mut Tape, x: Var) -> Result<Var> {
    let (_, h, w) = tape.value(x).chw()?;
    let mut acc: Option<Var> = None;
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let mut xs = vec![0.0; h * w];
            let mut ys = vec![0.0; h * w];
            for y in 0..h {
                for col in 0..w {
                    xs[y * w + col] = col as f64 + dx as f64;
                    ys[y * w + col] = y as f64 + dy as f64;
                }
            }
            let cx = tape.constant(Tensor::new(vec![h, w], xs)?);
            let cy = tape.constant(Tensor::new(vec![h, w], ys)?);
            let g = tape.bilinear_gather(x, cx, cy)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, g)?,
                None => g,
            });
        }
    }
    tape.scale_add(acc.expect("nine taps"), 1.0 / 9.0, 0.0)
}

/// Tape SSIM; same statistics as [`ssim`], gradient-ready.
pub(crate) fn ssim_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let mu_a = box3_on_tape(tape, a)?;
    let mu_b = box3_on_tape(tape, b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let m_aa = box3_on_tape(tape, aa)?;
    let m_bb = box3_on_tape(tape, bb)?;
    let m_ab = box3_on_tape(tape, ab)?;

    let mu_a2 = tape.mul(mu_a, mu_a)?;
    let mu_b2 = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(m_aa, mu_a2)?;
    let var_b = tape.sub(m_bb, mu_b2)?;
    let cov = tape.sub(m_ab, mu_ab)?;

    let num1 = tape.scale_add(mu_ab, 2.0, SSIM_C1)?;
    let num2 = tape.scale_add(cov, 2.0, SSIM_C2)?;
    let num = tape.mul(num1, num2)?;
    let den1 = {
        let s = tape.add(mu_a2, mu_b2)?;
        tape.scale_add(s, 1.0, SSIM_C1)?
    };
    let den2 = {
        let s = tape.add(var_a, var_b)?;
        tape.scale_add(s, 1.0, SSIM_C2)?
    };
    let den = tape.mul(den1, den2)?;
    tape.div(num, den)
}

/// Tape version of [`image_consistency`] (smoothed absolute values).
pub(crate) fn image_consistency_on_tape(
    tape: &mut Tape,
    v: Var,
    v_syn: Var,
    v_prime: Var,
    v_prime_syn: Var,
    mask: &Mask,
    alpha: f64,
) -> Result<Var> {
    let d_fwd = tape.sub(v_prime, v_prime_syn)?;
    let d_fwd = tape.smooth_abs(d_fwd)?;
    let d_bwd = tape.sub(v, v_syn)?;
    let d_bwd = tape.smooth_abs(d_bwd)?;
    let l1 = tape.add(d_fwd, d_bwd)?;

    let one = tape.scalar(1.0);
    let sm_a = ssim_on_tape(tape, v, v_syn)?;
    let sm_a = tape.sub(one, sm_a)?;
    let sm_a = tape.smooth_abs(sm_a)?;
    let sm_b = ssim_on_tape(tape, v_prime, v_prime_syn)?;
    let sm_b = tape.sub(one, sm_b)?;
    let sm_b = tape.smooth_abs(sm_b)?;
    let sm = tape.add(sm_a, sm_b)?;

    let l1_w = tape.scale_add(l1, alpha, 0.0)?;
    let sm_w = tape.scale_add(sm, 1.0 - alpha, 0.0)?;
    let r = tape.add(l1_w, sm_w)?;
    masked_mean_on_tape(tape, r, mask)
}

/// Tape version of [`depth_consistency`].
pub(crate) fn depth_consistency_on_tape(
    tape: &mut Tape,
    d: Var,
    d_syn: Var,
    d_prime: Var,
    d_prime_syn: Var,
    mask: &Mask,
) -> Result<Var> {
    let a = tape.sub(d_prime, d_prime_syn)?;
    let a = tape.smooth_abs(a)?;
    let b = tape.sub(d, d_syn)?;
    let b = tape.smooth_abs(b)?;
    let r = tape.add(a, b)?;
    masked_mean_on_tape(tape, r, mask)
}

/// Tape version of [`pose_consistency`].
pub(crate) fn pose_consistency_on_tape(
    tape: &mut Tape,
    fwd: &MotionVars,
    bwd: &MotionVars,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (f, b) in fwd.vars().into_iter().zip(bwd.vars()) {
        let s = tape.add(f, b)?;
        let s = tape.smooth_abs(s)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    tape.scale_add(acc.expect("four components"), 0.25, 0.0)
}

/// Tape version of [`pixel_loss`]; `aligned` is `s·pred + t` built by the
/// caller with (s, t) as plain constants.
pub(crate) fn pixel_loss_on_tape(
    tape: &mut Tape,
    aligned: Var,
    gt: Var,
    mask: &Mask,
) -> Result<Var> {
    let d = tape.sub(aligned, gt)?;
    let d = tape.smooth_abs(d)?;
    masked_mean_on_tape(tape, d, mask)
}

/// Tape version of [`gradient_loss`].
pub(crate) fn gradient_loss_on_tape(
    tape: &mut Tape,
    aligned: Var,
    gt: Var,
    mask: &Mask,
) -> Result<Var> {
    let (_, h, w) = tape.value(aligned).chw()?;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(PanoError::invalid(format!(
            "gradient loss needs dimensions divisible by 8, got {h}×{w}"
        )));
    }
    check_mask(mask, h, w)?;
    let mut err = tape.sub(aligned, gt)?;
    let mut m = mask.clone();
    let (mut ch, mut cw) = (h, w);
    let mut total: Option<Var> = None;
    for scale in 0..4 {
        if scale > 0 {
            err = tape.avg_pool2(err)?;
            m = m.pool2_and()?;
            ch /= 2;
            cw /= 2;
        }
        let n_k = m.count();
        if n_k == 0 {
            continue;
        }
        let (mx, my) = edge_masks(&m);
        let mut scale_acc: Option<Var> = None;
        for (dm, next_x) in [(mx, true), (my, false)] {
            let mut xs = vec![0.0; ch * cw];
            let mut ys = vec![0.0; ch * cw];
            for y in 0..ch {
                for x in 0..cw {
                    xs[y * cw + x] = x as f64 + if next_x { 1.0 } else { 0.0 };
                    ys[y * cw + x] = y as f64 + if next_x { 0.0 } else { 1.0 };
                }
            }
            let cx = tape.constant(Tensor::new(vec![ch, cw], xs)?);
            let cy = tape.constant(Tensor::new(vec![ch, cw], ys)?);
            let shifted = tape.bilinear_gather(err, cx, cy)?;
            let diff = tape.sub(shifted, err)?;
            let diff = tape.smooth_abs(diff)?;
            let dm_t = tape.constant(dm.to_tensor());
            let masked = tape.mul(diff, dm_t)?;
            let s = tape.sum(masked)?;
            scale_acc = Some(match scale_acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
        let scaled = tape.scale_add(scale_acc.expect("both axes"), 1.0 / n_k as f64, 0.0)?;
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    total.ok_or(PanoError::DegenerateCoverage)
}
