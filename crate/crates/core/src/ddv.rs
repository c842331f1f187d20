//! The discrete disparity volume head: a per-pixel probability volume over N
//! bins, the bins themselves (learned per image or fixed), and their
//! soft-argmax composition into a disparity map.

use rand::Rng;

use crate::diffcore::{softmax_axis, Tape, Tensor, Var};
use crate::discretize::{adaptive_bins_on_tape, BinPartition, Strategy};
use crate::params::{Conv, Init, ParamSet};
use crate::{Error, Result};

/// Per-pixel distribution over bins, `[N, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume {
    probs: Tensor,
    tau: f64,
}

impl ProbabilityVolume {
    /// Wraps `[N, H, W]` probabilities, checking each pixel sums to one.
    pub fn new(probs: Tensor, tau: f64) -> Result<Self> {
        if probs.rank() != 3 {
            return Err(Error::InvalidShape {
                op: "probability_volume",
                shape: probs.shape().to_vec(),
                reason: "expected [N, H, W]".into(),
            });
        }
        let [n, h, w] = [probs.shape()[0], probs.shape()[1], probs.shape()[2]];
        for p in 0..h * w {
            let s: f64 = (0..n).map(|i| probs.data()[i * h * w + p]).sum();
            if (s - 1.0).abs() > 1e-6 || (0..n).any(|i| !(0.0..=1.0).contains(&probs.data()[i * h * w + p])) {
                return Err(Error::InvalidArgument(format!(
                    "pixel {p} is not a distribution (sum {s})"
                )));
            }
        }
        Ok(Self { probs, tau })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn n_bins(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[2]
    }

    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        let (h, w) = (self.height(), self.width());
        (0..self.n_bins())
            .map(|i| self.probs.data()[i * h * w + y * w + x])
            .collect()
    }

    /// Most probable bin per pixel, ties going to the lower index.
    pub fn argmax(&self) -> Vec<usize> {
        let (n, hw) = (self.n_bins(), self.height() * self.width());
        let d = self.probs.data();
        (0..hw)
            .map(|p| {
                let mut best = 0;
                for i in 1..n {
                    if d[i * hw + p] > d[best * hw + p] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Where a head's bins come from.
#[derive(Clone, Debug, PartialEq)]
pub enum BinSource {
    /// 1×1 channel alignment, global pooling, 1×1 conv, then the adaptive map.
    Adaptive { align: Conv, post: Conv },
    Fixed(BinPartition),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AddvHead {
    pub n_bins: usize,
    pub c_in: usize,
    pub tau: f64,
    pub estimator: Conv,
    pub bins: BinSource,
}

/// Tape values produced by a head for one image.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[1, 1, H, W]`
    pub disparity: Var,
    /// `[1, N, H, W]`
    pub probs: Var,
    /// `[1, N, 1, 1]`
    pub bins: Var,
}

impl AddvHead {
    /// Registers parameters under `name` in `params`. For fixed strategies
    /// `fixed` supplies the partition.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        n_bins: usize,
        tau: f64,
        fixed: Option<BinPartition>,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::InvalidArgument("a head needs at least 2 bins".into()));
        }
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::InvalidArgument(format!("temperature must lie in (0, 1], got {tau}")));
        }
        let estimator = Conv::new(params, &format!("{name}.prob"), c_in, n_bins, 3, 1, init, rng);
        let bins = match fixed {
            Some(p) => {
                if p.len() != n_bins {
                    return Err(Error::InvalidArgument(format!(
                        "fixed partition has {} bins, head expects {n_bins}",
                        p.len()
                    )));
                }
                BinSource::Fixed(p)
            }
            None => BinSource::Adaptive {
                align: Conv::new(params, &format!("{name}.bins_align"), c_in, n_bins, 1, 1, init, rng),
                post: Conv::new(params, &format!("{name}.bins_post"), n_bins, n_bins, 1, 1, init, rng),
            },
        };
        Ok(Self {
            n_bins,
            c_in,
            tau,
            estimator,
            bins,
        })
    }

    pub fn strategy(&self) -> Strategy {
        match &self.bins {
            BinSource::Adaptive { .. } => Strategy::Addv,
            BinSource::Fixed(p) => p.strategy(),
        }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[0] != 1 || shape[1] != self.c_in {
            return Err(Error::ShapeMismatch {
                op: "addv_head",
                left: vec![1, self.c_in],
                right: shape,
            });
        }
        Ok(())
    }

    /// `[1, C, H, W]` → `[1, N, H, W]` probabilities.
    pub fn probability_volume(&self, tape: &Tape, vars: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let logits = self.estimator.forward(tape, vars, x)?;
        tape.softmax(logits, 1, self.tau)
    }

    /// `[1, C, H, W]` → `[1, N, 1, 1]` bin values.
    pub fn bin_values(&self, tape: &Tape, vars: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        match &self.bins {
            BinSource::Adaptive { align, post } => {
                let aligned = align.forward(tape, vars, x)?;
                let pooled = tape.global_avg_pool(aligned)?;
                let logits = post.forward(tape, vars, pooled)?;
                adaptive_bins_on_tape(tape, logits, 1)
            }
            BinSource::Fixed(p) => Ok(tape.constant(p.to_tensor().reshape(&[1, self.n_bins, 1, 1])?)),
        }
    }

    pub fn forward(&self, tape: &Tape, vars: &[Var], x: Var) -> Result<HeadOutput> {
        let probs = self.probability_volume(tape, vars, x)?;
        let bins = self.bin_values(tape, vars, x)?;
        let disparity = soft_argmax_on_tape(tape, probs, bins)?;
        Ok(HeadOutput {
            disparity,
            probs,
            bins,
        })
    }
}

/// `Σ_n bⁿ Pⁿ` over the channel axis of `[1, N, H, W]` with `[1, N, 1, 1]` bins.
pub fn soft_argmax_on_tape(tape: &Tape, probs: Var, bins: Var) -> Result<Var> {
    let weighted = tape.mul(probs, bins)?;
    tape.sum_axis(weighted, 1)
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    if b != 1 {
        return Err(Error::InvalidShape {
            op: "addv_head",
            shape: x.shape().to_vec(),
            reason: "one feature map at a time".into(),
        });
    }
    x.reshape(&[1, c, h, w])
}

pub fn estimate_probability_volume(x: &Tensor, head: &AddvHead, params: &ParamSet) -> Result<ProbabilityVolume> {
    let tape = Tape::new();
    let vars = params.bind_frozen(&tape);
    let xv = tape.constant(as_batch(x)?);
    let p = head.probability_volume(&tape, &vars, xv)?;
    let t = tape.value(p);
    let [_, n, h, w] = t.dims4()?;
    ProbabilityVolume::new(t.reshape(&[n, h, w])?, head.tau)
}

pub fn generate_bins(x: &Tensor, head: &AddvHead, params: &ParamSet) -> Result<BinPartition> {
    let tape = Tape::new();
    let vars = params.bind_frozen(&tape);
    let xv = tape.constant(as_batch(x)?);
    let b = head.bin_values(&tape, &vars, xv)?;
    let values = tape.value(b).data().to_vec();
    BinPartition::new(values, head.strategy())
}

fn check_bins(pv: &ProbabilityVolume, bins: &BinPartition) -> Result<()> {
    if pv.n_bins() != bins.len() {
        return Err(Error::ShapeMismatch {
            op: "compose",
            left: pv.probs().shape().to_vec(),
            right: vec![bins.len()],
        });
    }
    Ok(())
}

/// Expected bin value per pixel, `[H, W]`.
pub fn compose_softargmax(pv: &ProbabilityVolume, bins: &BinPartition) -> Result<Tensor> {
    check_bins(pv, bins)?;
    let (n, h, w) = (pv.n_bins(), pv.height(), pv.width());
    let p = pv.probs().data();
    let mut out = vec![0.0; h * w];
    for (i, &b) in bins.values().iter().enumerate().take(n) {
        for (o, &pi) in out.iter_mut().zip(&p[i * h * w..(i + 1) * h * w]) {
            *o += b * pi;
        }
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

/// Value of the most probable bin per pixel, `[H, W]`.
pub fn compose_mle(pv: &ProbabilityVolume, bins: &BinPartition) -> Result<Tensor> {
    check_bins(pv, bins)?;
    let out = pv.argmax().into_iter().map(|i| bins.values()[i]).collect();
    Ok(Tensor::from_parts(vec![pv.height(), pv.width()], out))
}

/// Disparity, probability volume and bins for one `[C, H, W]` feature map.
pub fn addv_forward(
    x: &Tensor,
    head: &AddvHead,
    params: &ParamSet,
) -> Result<(Tensor, ProbabilityVolume, BinPartition)> {
    let pv = estimate_probability_volume(x, head, params)?;
    let bins = generate_bins(x, head, params)?;
    let d = compose_softargmax(&pv, &bins)?;
    Ok((d, pv, bins))
}

/// Softmax over the channel axis of `[N, H, W]` logits, wrapped as a volume.
pub fn volume_from_logits(logits: &Tensor, tau: f64) -> Result<ProbabilityVolume> {
    let p = softmax_axis(logits, 0, tau)?;
    ProbabilityVolume::new(p, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{uniform_bins, DisparityRange};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn volume(pixels: &[&[f64]]) -> ProbabilityVolume {
        let n = pixels[0].len();
        let hw = pixels.len();
        let t = Tensor::from_fn(&[n, 1, hw], |i| pixels[i % hw][i / hw]);
        ProbabilityVolume::new(t, 1.0).unwrap()
    }

    fn bins(v: &[f64]) -> BinPartition {
        BinPartition::new(v.to_vec(), Strategy::Addv).unwrap()
    }

    #[test]
    fn softargmax_examples() {
        let pv = volume(&[&[0.2, 0.5, 0.3]]);
        let d = compose_softargmax(&pv, &bins(&[0.1, 0.5, 0.9])).unwrap();
        assert_abs_diff_eq!(d.item(), 0.54, epsilon = 1e-15);
        let one_hot = volume(&[&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]]);
        let d = compose_softargmax(&one_hot, &bins(&[0.1, 0.5, 0.9])).unwrap();
        assert_eq!(d.data(), &[0.5, 0.5]);
    }

    #[test]
    fn mle_examples() {
        let b = bins(&[0.1, 0.5, 0.9]);
        assert_eq!(compose_mle(&volume(&[&[0.2, 0.5, 0.3]]), &b).unwrap().item(), 0.5);
        assert_eq!(compose_mle(&volume(&[&[0.0, 0.0, 1.0]]), &b).unwrap().item(), 0.9);
        let tie = volume(&[&[0.5, 0.5]]);
        assert_eq!(compose_mle(&tie, &bins(&[0.3, 0.7])).unwrap().item(), 0.3);
    }

    #[test]
    fn uniform_probs_uniform_bins() {
        for n in [2usize, 5, 32] {
            let probs: Vec<f64> = vec![1.0 / n as f64; n];
            let pv = volume(&[&probs]);
            let b = BinPartition::new((1..=n).map(|i| i as f64 / n as f64).collect(), Strategy::Addv).unwrap();
            let d = compose_softargmax(&pv, &b).unwrap();
            assert_abs_diff_eq!(d.item(), (n + 1) as f64 / (2 * n) as f64, epsilon = 1e-14);
        }
    }

    #[test]
    fn bin_count_mismatch_is_rejected() {
        let pv = volume(&[&[0.5, 0.5]]);
        let b = uniform_bins(3, DisparityRange::default()).unwrap();
        assert!(compose_softargmax(&pv, &b).is_err());
        assert!(compose_mle(&pv, &b).is_err());
    }

    #[test]
    fn head_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let head = AddvHead::new(&mut params, "h", 4, 8, 0.5, None, Init::KaimingUniform, &mut rng).unwrap();
        let x = Tensor::zeros(&[3, 4, 4]);
        assert!(matches!(
            estimate_probability_volume(&x, &head, &params),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn head_rejects_bad_tau_and_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        assert!(AddvHead::new(&mut params, "a", 4, 1, 0.5, None, Init::Zeros, &mut rng).is_err());
        assert!(AddvHead::new(&mut params, "b", 4, 4, 0.0, None, Init::Zeros, &mut rng).is_err());
        assert!(AddvHead::new(&mut params, "c", 4, 4, 1.5, None, Init::Zeros, &mut rng).is_err());
    }
}
