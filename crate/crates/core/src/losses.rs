//! Photometric, smoothness and uniformizing objectives.
//!
//! Every differentiable term is written against the [`Tape`]; the plain
//! tensor functions evaluate the same graph once and return values.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::ddv::ProbabilityVolume;
use crate::diffcore::{eval, Tape, Tensor, Var};
use crate::{Error, Result};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Added to the reprojection error of out-of-view samples so they never win
/// the per-pixel minimum.
const INVALID_PENALTY: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UniformizingVariant {
    /// Counts of per-pixel argmax bins (not differentiable).
    V1,
    /// Pixel-averaged distributions.
    V2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// SSIM / L1 mix in the photometric error.
    pub alpha1: f64,
    /// Smoothness weight.
    pub alpha2: f64,
    /// Uniformizing weight.
    pub alpha3: f64,
    pub tau: f64,
    pub variant: UniformizingVariant,
    pub uniformizing: bool,
    pub sharpening: bool,
    /// Use squared instead of absolute deviations in the uniformizing sums.
    /// The absolute form has a kink at balance whose restoring force
    /// swamps the photometric signal early in training, so squared is the
    /// default.
    pub squared_norm: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.85,
            alpha2: 1e-3,
            alpha3: 1.0,
            tau: 0.5,
            variant: UniformizingVariant::V2,
            uniformizing: true,
            sharpening: true,
            squared_norm: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha1) {
            return Err(Error::InvalidArgument(format!("alpha1 must lie in [0, 1], got {}", self.alpha1)));
        }
        if !(self.alpha2 >= 0.0 && self.alpha3 >= 0.0) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidArgument(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        Ok(())
    }

    /// Temperature actually applied: `tau` with sharpening, 1 without.
    pub fn effective_tau(&self) -> f64 {
        if self.sharpening {
            self.tau
        } else {
            1.0
        }
    }

    /// Uniformizing weight actually applied.
    pub fn effective_alpha3(&self) -> f64 {
        if self.uniformizing {
            self.alpha3
        } else {
            0.0
        }
    }
}

/// Per-term scalars for one image (or a batch mean).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_p: f64,
    pub l_smooth: f64,
    pub l_u: f64,
    pub l_final: f64,
    pub c_valid: usize,
    pub all_masked: bool,
}

fn as_image(t: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = t.dims4()?;
    t.reshape(&[b, c, h, w])
}

fn same_shape(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::ShapeMismatch { op, left: sa, right: sb });
    }
    Ok(())
}

/// Per-pixel SSIM over 3×3 windows, same shape as the inputs.
pub fn ssim_on_tape(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    same_shape("ssim", tape, a, b)?;
    let mu_a = tape.box_filter3(a)?;
    let mu_b = tape.box_filter3(b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let box_aa = tape.box_filter3(aa)?;
    let box_bb = tape.box_filter3(bb)?;
    let box_ab = tape.box_filter3(ab)?;
    let var_a = tape.sub(box_aa, mu_aa)?;
    let var_b = tape.sub(box_bb, mu_bb)?;
    let cov = tape.sub(box_ab, mu_ab)?;

    let l_num = tape.affine(mu_ab, 2.0, SSIM_C1)?;
    let c_num = tape.affine(cov, 2.0, SSIM_C2)?;
    let mu_sum = tape.add(mu_aa, mu_bb)?;
    let l_den = tape.add_scalar(mu_sum, SSIM_C1)?;
    let var_sum = tape.add(var_a, var_b)?;
    let c_den = tape.add_scalar(var_sum, SSIM_C2)?;
    let num = tape.mul(l_num, c_num)?;
    let den = tape.mul(l_den, c_den)?;
    tape.div(num, den)
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let out = eval(&[&as_image(a)?, &as_image(b)?], |t, v| ssim_on_tape(t, v[0], v[1]))?;
    out.reshape(a.shape())
}

/// `(α₁/2)(1 − SSIM) + (1 − α₁)|a − b|`, channel-averaged to `[B, 1, H, W]`.
pub fn photometric_error_on_tape(tape: &Tape, a: Var, b: Var, alpha1: f64) -> Result<Var> {
    let s = ssim_on_tape(tape, a, b)?;
    let ssim_term = tape.affine(s, -alpha1 / 2.0, alpha1 / 2.0)?;
    let d = tape.sub(a, b)?;
    let l1 = tape.abs(d)?;
    let l1_term = tape.scale(l1, 1.0 - alpha1)?;
    let pe = tape.add(ssim_term, l1_term)?;
    tape.mean_axis(pe, 1)
}

/// `[H, W]` photometric error between two `[C, H, W]` images.
pub fn photometric_error(a: &Tensor, b: &Tensor, alpha1: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "photometric_error",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let [_, _, h, w] = a.dims4()?;
    let out = eval(&[&as_image(a)?, &as_image(b)?], |t, v| {
        photometric_error_on_tape(t, v[0], v[1], alpha1)
    })?;
    out.reshape(&[h, w])
}

/// Result of the minimum-reprojection term on one image.
#[derive(Debug)]
pub struct Reprojection {
    /// Scalar `L_p` (constant zero when every pixel is masked).
    pub loss: Var,
    /// Per-pixel minimum over warped sources, `[1, 1, H, W]`, before masking.
    pub min_error: Var,
    /// Auto-mask `[1, 1, H, W]` of {0, 1}, detached.
    pub mask: Tensor,
    pub c_valid: usize,
    pub all_masked: bool,
}

/// Per-pixel minimum of the photometric error between `target` and the
/// unwarped `sources`, with no gradient.
pub fn identity_error(tape: &Tape, target: Var, sources: &[Var], alpha1: f64) -> Result<Tensor> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument(
            "minimum reprojection needs at least one source".into(),
        ));
    }
    let target = tape.detach(target);
    let mut identity: Option<Tensor> = None;
    for &s in sources {
        let sc = tape.detach(s);
        let pe = photometric_error_on_tape(tape, target, sc, alpha1)?;
        let v = tape.value(pe).clone();
        identity = Some(match identity {
            None => v,
            Some(m) => Tensor::from_fn(m.shape(), |i| m.data()[i].min(v.data()[i])),
        });
    }
    Ok(identity.expect("non-empty"))
}

/// Per-pixel minimum of the photometric error over warped sources, kept
/// only where it beats the minimum over the unwarped sources.
///
/// `validity[i]`, when given, marks the pixels where `warped[i]` was sampled
/// in view; elsewhere that source cannot be selected.
pub fn min_reprojection_on_tape(
    tape: &Tape,
    target: Var,
    warped: &[Var],
    validity: Option<&[Tensor]>,
    sources: &[Var],
    alpha1: f64,
) -> Result<Reprojection> {
    if warped.len() != sources.len() {
        return Err(Error::InvalidArgument(
            "warped and source lists must have equal length".into(),
        ));
    }
    let identity = identity_error(tape, target, sources, alpha1)?;
    min_reprojection_against(tape, target, warped, validity, &identity, alpha1)
}

/// [`min_reprojection_on_tape`] with a precomputed [`identity_error`].
pub fn min_reprojection_against(
    tape: &Tape,
    target: Var,
    warped: &[Var],
    validity: Option<&[Tensor]>,
    identity: &Tensor,
    alpha1: f64,
) -> Result<Reprojection> {
    if warped.is_empty() {
        return Err(Error::InvalidArgument(
            "minimum reprojection needs at least one source".into(),
        ));
    }
    if validity.is_some_and(|v| v.len() != warped.len()) {
        return Err(Error::InvalidArgument(
            "warped and validity lists must have equal length".into(),
        ));
    }
    let mut min_error: Option<Var> = None;
    for (i, &w) in warped.iter().enumerate() {
        let mut pe = photometric_error_on_tape(tape, target, w, alpha1)?;
        if let Some(valid) = validity {
            let penalty = valid[i].map(|v| if v > 0.5 { 0.0 } else { INVALID_PENALTY });
            let penalty = tape.constant(penalty.reshape(&tape.shape(pe))?);
            pe = tape.add(pe, penalty)?;
        }
        min_error = Some(match min_error {
            None => pe,
            Some(m) => tape.minimum(m, pe)?,
        });
    }
    let min_error = min_error.expect("non-empty");
    if identity.len() != tape.value(min_error).len() {
        return Err(Error::ShapeMismatch {
            op: "min_reprojection",
            left: identity.shape().to_vec(),
            right: tape.shape(min_error),
        });
    }

    let mask = {
        let m = tape.value(min_error);
        Tensor::from_fn(m.shape(), |i| {
            let e = m.data()[i];
            if e < identity.data()[i] && e < INVALID_PENALTY {
                1.0
            } else {
                0.0
            }
        })
    };
    let c_valid = mask.sum() as usize;
    let all_masked = c_valid == 0;
    let loss = if all_masked {
        warn!("every pixel was removed by the auto-mask; photometric term set to 0");
        tape.constant(Tensor::scalar(0.0))
    } else {
        let mv = tape.constant(mask.clone());
        let kept = tape.mul(min_error, mv)?;
        let s = tape.sum(kept)?;
        tape.scale(s, 1.0 / c_valid as f64)?
    };
    Ok(Reprojection {
        loss,
        min_error,
        mask,
        c_valid,
        all_masked,
    })
}

/// Plain-tensor form of [`min_reprojection_on_tape`] for `[C, H, W]` frames.
/// Returns `(L_p, mask [H, W], all_masked)`.
pub fn min_reprojection_automask(
    target: &Tensor,
    warped: &[Tensor],
    sources: &[Tensor],
    alpha1: f64,
) -> Result<(f64, Tensor, bool)> {
    let [_, _, h, w] = target.dims4()?;
    let tape = Tape::new();
    let t = tape.constant(as_image(target)?);
    let ws = warped
        .iter()
        .map(|x| Ok(tape.constant(as_image(x)?)))
        .collect::<Result<Vec<_>>>()?;
    let ss = sources
        .iter()
        .map(|x| Ok(tape.constant(as_image(x)?)))
        .collect::<Result<Vec<_>>>()?;
    let r = min_reprojection_on_tape(&tape, t, &ws, None, &ss, alpha1)?;
    Ok((tape.item(r.loss), r.mask.reshape(&[h, w])?, r.all_masked))
}

/// Edge-aware smoothness of `[1, 1, H, W]` disparity against `[1, C, H, W]`
/// image, on the mean-normalized disparity.
pub fn edge_smoothness_on_tape(tape: &Tape, disp: Var, img: Var) -> Result<Var> {
    let mean = {
        let d = tape.value(disp);
        d.mean()
    };
    if !(mean > 0.0) {
        return Err(Error::InvalidArgument(
            "edge smoothness needs a disparity map with positive mean".into(),
        ));
    }
    let m = tape.mean(disp)?;
    let norm = tape.div(disp, m)?;
    let shape = tape.shape(disp);
    let mut total: Option<Var> = None;
    for axis in [3usize, 2] {
        if shape[axis] < 2 {
            continue;
        }
        let dd = tape.diff(norm, axis)?;
        let dd = tape.abs(dd)?;
        let di = tape.diff(img, axis)?;
        let di = tape.abs(di)?;
        let di = tape.mean_axis(di, 1)?;
        let weight = tape.scale(di, -1.0)?;
        let weight = tape.exp(weight)?;
        let term = tape.mul(dd, weight)?;
        let term = tape.mean(term)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// Plain-tensor form: `disp` `[H, W]`, `img` `[C, H, W]`.
pub fn edge_smoothness(disp: &Tensor, img: &Tensor) -> Result<f64> {
    let [_, c, h, w] = img.dims4()?;
    if disp.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "edge_smoothness",
            left: disp.shape().to_vec(),
            right: img.shape().to_vec(),
        });
    }
    let d = disp.reshape(&[1, 1, h, w])?;
    let i = img.reshape(&[1, c, h, w])?;
    Ok(eval(&[&d, &i], |t, v| edge_smoothness_on_tape(t, v[0], v[1]))?.item())
}

fn deviation(x: f64, squared: bool) -> f64 {
    if squared {
        x * x
    } else {
        x.abs()
    }
}

fn mask_values(mask: &Tensor, hw: usize) -> Result<&[f64]> {
    if mask.len() != hw {
        return Err(Error::InvalidArgument(format!(
            "mask has {} entries, volume has {hw} pixels",
            mask.len()
        )));
    }
    Ok(mask.data())
}

/// Balance of argmax counts over valid pixels: `Σ_n |c_n / c_valid − 1/N|`.
pub fn uniformizing_v1(pv: &ProbabilityVolume, mask: &Tensor, squared: bool) -> Result<f64> {
    let n = pv.n_bins();
    let m = mask_values(mask, pv.height() * pv.width())?;
    let mut counts = vec![0usize; n];
    let mut valid = 0usize;
    for (p, bin) in pv.argmax().into_iter().enumerate() {
        if m[p] > 0.5 {
            counts[bin] += 1;
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(Error::InvalidArgument(
            "uniformizing needs at least one valid pixel".into(),
        ));
    }
    Ok(counts
        .iter()
        .map(|&c| deviation(c as f64 / valid as f64 - 1.0 / n as f64, squared))
        .sum())
}

/// Balance of the pixel-averaged distribution over valid pixels:
/// `Σ_n |P̄ⁿ − 1/N|`. `probs` is `[1, N, H, W]`, `mask` has `H·W` entries.
/// Returns `(loss, all_masked)`; the loss is a constant zero when no pixel
/// is valid.
pub fn uniformizing_v2_on_tape(tape: &Tape, probs: Var, mask: &Tensor, squared: bool) -> Result<(Var, bool)> {
    let shape = tape.shape(probs);
    let [_, n, h, w] = match *shape.as_slice() {
        [b, n, h, w] => [b, n, h, w],
        _ => {
            return Err(Error::InvalidShape {
                op: "uniformizing",
                shape,
                reason: "expected [1, N, H, W]".into(),
            })
        }
    };
    let m = mask_values(mask, h * w)?;
    let valid = m.iter().filter(|&&v| v > 0.5).count();
    if valid == 0 {
        warn!("no valid pixels for the uniformizing term; set to 0");
        return Ok((tape.constant(Tensor::scalar(0.0)), true));
    }
    let mv = tape.constant(Tensor::from_fn(&[1, 1, h, w], |i| if m[i] > 0.5 { 1.0 } else { 0.0 }));
    let kept = tape.mul(probs, mv)?;
    let pooled = tape.global_avg_pool(kept)?;
    let avg = tape.scale(pooled, (h * w) as f64 / valid as f64)?;
    let dev = tape.add_scalar(avg, -1.0 / n as f64)?;
    let dev = if squared { tape.square(dev)? } else { tape.abs(dev)? };
    Ok((tape.sum(dev)?, false))
}

/// Plain-tensor form of [`uniformizing_v2_on_tape`]. Returns
/// `(loss, all_masked)`.
pub fn uniformizing_v2_masked(pv: &ProbabilityVolume, mask: &Tensor, squared: bool) -> Result<(f64, bool)> {
    let (n, h, w) = (pv.n_bins(), pv.height(), pv.width());
    let tape = Tape::new();
    let p = tape.constant(pv.probs().reshape(&[1, n, h, w])?);
    let (l, flag) = uniformizing_v2_on_tape(&tape, p, mask, squared)?;
    Ok((tape.item(l), flag))
}

/// Nearest-neighbour reduction of a full-resolution mask by an integer
/// factor, sampling the lower-right center of each block.
pub fn downsample_mask(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let r = mask.rank();
    if r < 2 || factor == 0 {
        return Err(Error::InvalidArgument("downsample_mask needs [.., H, W] and factor >= 1".into()));
    }
    let (h, w) = (mask.shape()[r - 2], mask.shape()[r - 1]);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidShape {
            op: "downsample_mask",
            shape: mask.shape().to_vec(),
            reason: format!("not divisible by {factor}"),
        });
    }
    let (oh, ow) = (h / factor, w / factor);
    let off = factor / 2;
    Ok(Tensor::from_fn(&[oh, ow], |i| {
        let (y, x) = (i / ow, i % ow);
        mask.data()[(y * factor + off) * w + x * factor + off]
    }))
}

/// Loss terms computed at one decoder scale.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScaleParts {
    pub l_p: f64,
    pub l_smooth: f64,
    pub l_u: f64,
    pub c_valid: usize,
    pub all_masked: bool,
}

/// Mean of each term over scales, combined as
/// `L_p + α₂ L_smooth + α₃ L_u`.
pub fn total_loss(parts: &[ScaleParts], config: &LossConfig) -> LossBundle {
    if parts.is_empty() {
        return LossBundle::default();
    }
    let k = parts.len() as f64;
    let l_p = parts.iter().map(|p| p.l_p).sum::<f64>() / k;
    let l_smooth = parts.iter().map(|p| p.l_smooth).sum::<f64>() / k;
    let l_u = if config.uniformizing {
        parts.iter().map(|p| p.l_u).sum::<f64>() / k
    } else {
        0.0
    };
    LossBundle {
        l_p,
        l_smooth,
        l_u,
        l_final: l_p + config.alpha2 * l_smooth + config.effective_alpha3() * l_u,
        c_valid: parts[0].c_valid,
        all_masked: parts.iter().any(|p| p.all_masked),
    }
}

/// Tape terms at one scale.
#[derive(Clone, Copy, Debug)]
pub struct ScaleTerms {
    pub l_p: Var,
    pub l_smooth: Var,
    pub l_u: Option<Var>,
    pub c_valid: usize,
    pub all_masked: bool,
}

/// Differentiable counterpart of [`total_loss`]; the bundle carries the
/// values of the combined terms.
pub fn total_loss_on_tape(tape: &Tape, parts: &[ScaleTerms], config: &LossConfig) -> Result<(Var, LossBundle)> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("total loss needs at least one scale".into()));
    }
    let k = 1.0 / parts.len() as f64;
    let mut acc: Option<Var> = None;
    let mut scalar_parts = Vec::with_capacity(parts.len());
    for p in parts {
        let mut term = tape.scale(p.l_smooth, config.alpha2)?;
        term = tape.add(p.l_p, term)?;
        let mut l_u = 0.0;
        if let Some(u) = p.l_u {
            l_u = tape.item(u);
            if config.uniformizing {
                let w = tape.scale(u, config.alpha3)?;
                term = tape.add(term, w)?;
            }
        }
        let term = tape.scale(term, k)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
        scalar_parts.push(ScaleParts {
            l_p: tape.item(p.l_p),
            l_smooth: tape.item(p.l_smooth),
            l_u,
            c_valid: p.c_valid,
            all_masked: p.all_masked,
        });
    }
    let total = acc.expect("non-empty");
    let mut bundle = total_loss(&scalar_parts, config);
    bundle.l_final = tape.item(total);
    Ok((total, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ssim_of_constant_images() {
        let a = Tensor::zeros(&[1, 4, 4]);
        let b = Tensor::ones(&[1, 4, 4]);
        let s = ssim(&a, &b).unwrap();
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        for &v in s.data() {
            assert_abs_diff_eq!(v, expect, epsilon = 1e-15);
        }
        assert!(ssim(&a, &Tensor::ones(&[1, 4, 5])).is_err());
    }

    #[test]
    fn pe_with_alpha_zero_is_mean_l1() {
        let a = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.37).sin().abs());
        let b = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.11).cos().abs());
        let pe = photometric_error(&a, &b, 0.0).unwrap();
        for p in 0..16 {
            let l1: f64 = (0..3).map(|c| (a.data()[c * 16 + p] - b.data()[c * 16 + p]).abs()).sum::<f64>() / 3.0;
            assert_abs_diff_eq!(pe.data()[p], l1, epsilon = 1e-15);
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let cfg = LossConfig::default();
        let parts = [
            ScaleParts { l_p: 0.3, l_smooth: 2.0, l_u: 0.5, c_valid: 10, all_masked: false },
            ScaleParts { l_p: 0.1, l_smooth: 4.0, l_u: 0.1, c_valid: 3, all_masked: true },
        ];
        let b = total_loss(&parts, &cfg);
        assert_abs_diff_eq!(b.l_final, 0.2 + 1e-3 * 3.0 + 0.3, epsilon = 1e-12);
        assert_eq!(b.c_valid, 10);
        assert!(b.all_masked);
        let off = LossConfig { uniformizing: false, ..cfg };
        assert_abs_diff_eq!(total_loss(&parts, &off).l_final, 0.2 + 3e-3, epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { alpha1: 1.2, ..Default::default() }.validate().is_err());
        assert!(LossConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { alpha3: -1.0, ..Default::default() }.validate().is_err());
        let s_off = LossConfig { sharpening: false, ..Default::default() };
        assert_eq!(s_off.effective_tau(), 1.0);
    }

    #[test]
    fn mask_downsampling_picks_block_centers() {
        let m = Tensor::from_fn(&[4, 4], |i| i as f64);
        let d = downsample_mask(&m, 2).unwrap();
        assert_eq!(d.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(downsample_mask(&m, 1).unwrap().data(), m.data());
        assert!(downsample_mask(&m, 3).is_err());
    }
}
