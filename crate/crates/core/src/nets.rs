//! Depth encoder-decoder with per-scale disparity heads, and the pose network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddv::{AddvHead, HeadOutput, ProbabilityVolume};
use crate::diffcore::{Tape, Tensor, Var};
use crate::discretize::{fixed_bins, BinPartition, DisparityRange, Strategy};
use crate::geometry::PoseSE3;
use crate::params::{Conv, Init, ParamSet};
use crate::{Error, Result};

pub const ENCODER_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const DECODER_CHANNELS: [usize; 5] = [64, 32, 32, 16, 16];
/// Downsampling factor of each disparity output, finest first.
pub const OUTPUT_SCALES: [usize; 4] = [1, 2, 4, 8];
pub const POSE_CHANNELS: [usize; 4] = [16, 32, 64, 64];
pub const POSE_SCALE: f64 = 0.01;
pub const INPUT_MULTIPLE: usize = 16;

/// Everything needed to rebuild a network deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_bins: usize,
    /// Softmax temperature used by the heads.
    pub tau: f64,
    pub strategy: Strategy,
    pub range: DisparityRange,
    /// Concatenate the input image into the full-resolution decoder block.
    pub image_skip: bool,
    /// Zero-initialize every head (degenerate test mode).
    pub zero_heads: bool,
    /// Zero-initialize the last pose layer.
    pub zero_pose_output: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_bins: 32,
            tau: 0.5,
            strategy: Strategy::Addv,
            range: DisparityRange::default(),
            image_skip: true,
            zero_heads: false,
            zero_pose_output: false,
            seed: 0,
        }
    }
}

pub fn check_resolution(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::InvalidArgument(format!(
            "input resolution {h}x{w} must be divisible by {INPUT_MULTIPLE}"
        )));
    }
    Ok(())
}

fn image_dims(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match *t {
        [1, 3, h, w] => Ok((h, w)),
        _ => Err(Error::InvalidShape {
            op,
            shape: t.to_vec(),
            reason: "expected a [1, 3, H, W] image".into(),
        }),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthNet {
    /// Each stage: 3×3 conv, ELU, 2×2 average pool.
    pub encoder: Vec<Conv>,
    pub decoder: Vec<Conv>,
    /// Heads ordered finest first, matching [`OUTPUT_SCALES`].
    pub heads: Vec<AddvHead>,
    pub image_skip: bool,
}

impl DepthNet {
    fn build(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut encoder = Vec::new();
        let mut c_in = 3;
        for (i, &c) in ENCODER_CHANNELS.iter().enumerate() {
            encoder.push(Conv::new(params, &format!("depth.enc{i}"), c_in, c, 3, 1, Init::KaimingUniform, rng));
            c_in = c;
        }
        let skips = [0, ENCODER_CHANNELS[2], ENCODER_CHANNELS[1], ENCODER_CHANNELS[0], 0];
        let mut decoder = Vec::new();
        for (j, &c) in DECODER_CHANNELS.iter().enumerate() {
            let mut extra = skips[j];
            if j == 4 && cfg.image_skip {
                extra = 3;
            }
            decoder.push(Conv::new(params, &format!("depth.dec{j}"), c_in + extra, c, 3, 1, Init::KaimingUniform, rng));
            c_in = c;
        }
        let fixed = match cfg.strategy {
            Strategy::Addv => None,
            s => Some(fixed_bins(s, cfg.n_bins, cfg.range)?),
        };
        let head_init = if cfg.zero_heads { Init::Zeros } else { Init::KaimingUniform };
        let mut heads = Vec::new();
        for (s, _) in OUTPUT_SCALES.iter().enumerate() {
            heads.push(AddvHead::new(
                params,
                &format!("depth.head{s}"),
                DECODER_CHANNELS[4 - s],
                cfg.n_bins,
                cfg.tau,
                fixed.clone(),
                head_init,
                rng,
            )?);
        }
        Ok(Self {
            encoder,
            decoder,
            heads,
            image_skip: cfg.image_skip,
        })
    }

    /// `[1, 3, H, W]` image → one head output per scale, finest first.
    pub fn forward(&self, tape: &Tape, vars: &[Var], img: Var) -> Result<Vec<HeadOutput>> {
        let (h, w) = image_dims("depth_forward", &tape.shape(img))?;
        check_resolution(h, w)?;
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut x = img;
        for c in &self.encoder {
            let y = c.forward(tape, vars, x)?;
            let y = tape.elu(y)?;
            x = tape.avg_pool2(y)?;
            feats.push(x);
        }
        let y = self.decoder[0].forward(tape, vars, feats[3])?;
        let mut y = tape.elu(y)?;
        let mut outs = Vec::with_capacity(4);
        for j in 1..self.decoder.len() {
            y = tape.upsample_bilinear(y, 2)?;
            let skip = match j {
                1 => Some(feats[2]),
                2 => Some(feats[1]),
                3 => Some(feats[0]),
                _ if self.image_skip => Some(img),
                _ => None,
            };
            if let Some(s) = skip {
                y = tape.concat(&[y, s], 1)?;
            }
            let z = self.decoder[j].forward(tape, vars, y)?;
            y = tape.elu(z)?;
            outs.push(self.heads[4 - j].forward(tape, vars, y)?);
        }
        outs.reverse();
        Ok(outs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseNet {
    /// Each stage: 2×2 average pool, 3×3 conv, ELU.
    pub convs: Vec<Conv>,
    pub output: Conv,
}

impl PoseNet {
    fn build(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::new();
        let mut c_in = 6;
        for (i, &c) in POSE_CHANNELS.iter().enumerate() {
            convs.push(Conv::new(params, &format!("pose.conv{i}"), c_in, c, 3, 1, Init::KaimingUniform, rng));
            c_in = c;
        }
        let init = if cfg.zero_pose_output { Init::Zeros } else { Init::KaimingUniform };
        let output = Conv::new(params, "pose.out", c_in, 6, 1, 1, init, rng);
        Self { convs, output }
    }

    /// Motion from the camera of `a` to the camera of `b` as a `[6]` vector.
    pub fn forward(&self, tape: &Tape, vars: &[Var], a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (tape.shape(a), tape.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "pose_forward",
                left: sa,
                right: sb,
            });
        }
        image_dims("pose_forward", &sa)?;
        let mut x = tape.concat(&[a, b], 1)?;
        for c in &self.convs {
            let y = tape.avg_pool2(x)?;
            let y = c.forward(tape, vars, y)?;
            x = tape.elu(y)?;
        }
        let y = self.output.forward(tape, vars, x)?;
        let y = tape.global_avg_pool(y)?;
        let y = tape.scale(y, POSE_SCALE)?;
        tape.reshape(y, &[6])
    }
}

/// Depth and pose networks sharing one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub depth: DepthNet,
    pub pose: PoseNet,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.n_bins < 2 {
            return Err(Error::InvalidArgument("at least 2 bins are required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let depth = DepthNet::build(&mut params, &config, &mut rng)?;
        let pose = PoseNet::build(&mut params, &config, &mut rng);
        Ok(Self {
            config,
            depth,
            pose,
            params,
        })
    }

    pub fn depth_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("depth."))
            .map(|(_, t)| t.len())
            .sum()
    }
}

/// One decoded scale of [`depth_forward`].
#[derive(Clone, Debug)]
pub struct ScaleOutput {
    /// `[h, w]`
    pub disparity: Tensor,
    pub volume: ProbabilityVolume,
    pub bins: BinPartition,
}

fn batched(img: &Tensor, op: &'static str) -> Result<Tensor> {
    match *img.shape() {
        [3, h, w] | [1, 3, h, w] => img.reshape(&[1, 3, h, w]),
        _ => Err(Error::InvalidShape {
            op,
            shape: img.shape().to_vec(),
            reason: "expected a [3, H, W] image".into(),
        }),
    }
}

/// Disparity, probability volume and bins at every output scale, finest first.
pub fn depth_forward(img: &Tensor, model: &Model) -> Result<Vec<ScaleOutput>> {
    let tape = Tape::new();
    let vars = model.params.bind_frozen(&tape);
    let x = tape.constant(batched(img, "depth_forward")?);
    let outs = model.depth.forward(&tape, &vars, x)?;
    outs.iter()
        .zip(&model.depth.heads)
        .map(|(o, head)| {
            let d = tape.value(o.disparity);
            let [_, _, h, w] = d.dims4()?;
            let p = tape.value(o.probs);
            let n = p.shape()[1];
            Ok(ScaleOutput {
                disparity: d.reshape(&[h, w])?,
                volume: ProbabilityVolume::new(p.reshape(&[n, h, w])?, head.tau)?,
                bins: BinPartition::new(tape.value(o.bins).data().to_vec(), head.strategy())?,
            })
        })
        .collect()
}

/// Only the full-resolution disparity `[H, W]`.
pub fn predict_disparity(img: &Tensor, model: &Model) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = model.params.bind_frozen(&tape);
    let x = tape.constant(batched(img, "depth_forward")?);
    let outs = model.depth.forward(&tape, &vars, x)?;
    let d = tape.value(outs[0].disparity);
    let [_, _, h, w] = d.dims4()?;
    d.reshape(&[h, w])
}

pub fn pose_forward(a: &Tensor, b: &Tensor, model: &Model) -> Result<PoseSE3> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "pose_forward",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let tape = Tape::new();
    let vars = model.params.bind_frozen(&tape);
    let av = tape.constant(batched(a, "pose_forward")?);
    let bv = tape.constant(batched(b, "pose_forward")?);
    let v = model.pose.forward(&tape, &vars, av, bv)?;
    let out = tape.value(v);
    PoseSE3::from_vector(out.data())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: f64) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| 0.5 + 0.4 * (i as f64 * 0.013 + seed).sin())
    }

    #[test]
    fn output_shapes_and_budget() {
        let m = Model::new(ModelConfig::default()).unwrap();
        assert!(m.depth_param_count() < 500_000, "{}", m.depth_param_count());
        let outs = depth_forward(&image(64, 64, 0.0), &m).unwrap();
        let sizes: Vec<_> = outs.iter().map(|o| o.disparity.shape().to_vec()).collect();
        assert_eq!(sizes, vec![vec![64, 64], vec![32, 32], vec![16, 16], vec![8, 8]]);
        for o in &outs {
            assert!(o.disparity.data().iter().all(|&d| d > 0.0 && d <= 1.0));
        }
        assert_ne!(outs[0].bins.values(), outs[1].bins.values());
    }

    #[test]
    fn zero_heads_are_degenerate() {
        let cfg = ModelConfig { zero_heads: true, n_bins: 8, ..Default::default() };
        let m = Model::new(cfg).unwrap();
        for o in depth_forward(&image(32, 48, 1.0), &m).unwrap() {
            for &d in o.disparity.data() {
                assert!((d - 9.0 / 16.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_indivisible_resolution() {
        let m = Model::new(ModelConfig::default()).unwrap();
        assert!(depth_forward(&image(50, 64, 0.0), &m).is_err());
    }

    #[test]
    fn zero_pose_output_is_identity() {
        let m = Model::new(ModelConfig { zero_pose_output: true, ..Default::default() }).unwrap();
        let p = pose_forward(&image(32, 32, 0.0), &image(32, 32, 2.0), &m).unwrap();
        assert_eq!(p, PoseSE3::identity());
        assert!(pose_forward(&image(32, 32, 0.0), &image(16, 32, 0.0), &m).is_err());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let a = predict_disparity(&image(32, 32, 0.3), &m).unwrap();
        let b = predict_disparity(&image(32, 32, 0.3), &Model::new(ModelConfig::default()).unwrap()).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
