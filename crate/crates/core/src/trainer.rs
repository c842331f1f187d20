//! Adam, the joint depth/pose training loop and depth evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::ddv::ProbabilityVolume;
use crate::datagen::{augment, Triplet};
use crate::diffcore::{Tape, Tensor, Var};
use crate::discretize::Strategy;
use crate::geometry::{warp, DepthRange};
use crate::losses::{
    downsample_mask, edge_smoothness_on_tape, identity_error, min_reprojection_against, total_loss_on_tape,
    uniformizing_v1, uniformizing_v2_on_tape, LossBundle, LossConfig, ScaleTerms, UniformizingVariant,
};
use crate::nets::{check_resolution, predict_disparity, Model, ModelConfig, OUTPUT_SCALES};
use crate::params::ParamSet;
use crate::parallel::map_indexed;
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Number of epochs run at `lr`; later epochs use `lr_after`.
    pub lr_decay_epoch: usize,
    pub lr_after: f64,
    pub batch: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub n_bins: usize,
    pub strategy: Strategy,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-4,
            lr_decay_epoch: 15,
            lr_after: 1e-5,
            batch: 1,
            seed: 0,
            loss: LossConfig::default(),
            n_bins: 32,
            strategy: Strategy::Addv,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs < 1 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_after > 0.0) || self.lr_after > self.lr {
            return Err(Error::InvalidArgument(format!(
                "learning rates need 0 < lr_after <= lr, got {} and {}",
                self.lr_after, self.lr
            )));
        }
        if self.batch < 1 {
            return Err(Error::InvalidArgument("batch must be >= 1".into()));
        }
        if self.n_bins < 2 {
            return Err(Error::InvalidArgument("at least 2 bins are required".into()));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch > self.lr_decay_epoch {
            self.lr_after
        } else {
            self.lr
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_bins: self.n_bins,
            tau: self.loss.effective_tau(),
            strategy: self.strategy,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.tensors().iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for ((p, g), (m, v)) in params.tensors_mut().iter_mut().zip(grads).zip(moments) {
        let items = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((pj, &gj), (mj, vj)) in items {
            *mj = b1 * *mj + (1.0 - b1) * gj;
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
            *pj -= lr * (*mj / c1) / ((*vj / c2).sqrt() + eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// loss graph
// ---------------------------------------------------------------------------

fn as_batch(img: &Tensor) -> Result<Tensor> {
    let [_, c, h, w] = img.dims4()?;
    img.reshape(&[1, c, h, w])
}

/// Block average of a `[C, H, W]` image.
pub fn downsample_image(img: &Tensor, factor: usize) -> Result<Tensor> {
    let [_, c, h, w] = img.dims4()?;
    if factor == 1 {
        return img.reshape(&[1, c, h, w]);
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidShape {
            op: "downsample_image",
            shape: img.shape().to_vec(),
            reason: format!("not divisible by {factor}"),
        });
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let d = img.data();
    Ok(Tensor::from_fn(&[1, c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += d[ch * h * w + (y * factor + dy) * w + x * factor + dx];
            }
        }
        s * norm
    }))
}

/// Records the full objective for one triplet. Returns the scalar loss and
/// its component values.
pub fn record_loss(
    tape: &Tape,
    vars: &[Var],
    model: &Model,
    triplet: &Triplet,
    cfg: &LossConfig,
) -> Result<(Var, LossBundle)> {
    let (h, w) = (triplet.height(), triplet.width());
    check_resolution(h, w)?;
    let prev = tape.constant(as_batch(&triplet.frames[0])?);
    let target = tape.constant(as_batch(&triplet.frames[1])?);
    let next = tape.constant(as_batch(&triplet.frames[2])?);
    let k = triplet.intrinsics;

    let outs = model.depth.forward(tape, vars, target)?;
    let to_next = model.pose.forward(tape, vars, target, next)?;
    let to_next = tape.pose_matrix(to_next)?;
    let from_prev = model.pose.forward(tape, vars, prev, target)?;
    let from_prev = tape.pose_matrix(from_prev)?;
    let to_prev = tape.se3_inverse(from_prev)?;

    let identity = identity_error(tape, target, &[prev, next], cfg.alpha1)?;
    let range = DepthRange::default();
    let mut terms = Vec::with_capacity(outs.len());
    for (s, out) in outs.iter().enumerate() {
        let f = OUTPUT_SCALES[s];
        let disp = tape.upsample_bilinear(out.disparity, f)?;
        let depth = range.depth_on_tape(tape, disp)?;
        let (wp, mp) = warp(tape, prev, depth, to_prev, &k)?;
        let (wn, mn) = warp(tape, next, depth, to_next, &k)?;
        let rep = min_reprojection_against(tape, target, &[wp, wn], Some(&[mp, mn]), &identity, cfg.alpha1)?;

        let img_s = tape.constant(downsample_image(&triplet.frames[1], f)?);
        let l_smooth = edge_smoothness_on_tape(tape, out.disparity, img_s)?;

        let l_u = if cfg.uniformizing {
            let mask = downsample_mask(&rep.mask, f)?;
            match cfg.variant {
                UniformizingVariant::V2 => {
                    let (u, _) = uniformizing_v2_on_tape(tape, out.probs, &mask, cfg.squared_norm)?;
                    Some(u)
                }
                UniformizingVariant::V1 => {
                    let value = if rep.all_masked {
                        0.0
                    } else {
                        let p = tape.value(out.probs);
                        let [_, n, hs, ws] = p.dims4()?;
                        let pv = ProbabilityVolume::new(p.reshape(&[n, hs, ws])?, model.config.tau)?;
                        drop(p);
                        uniformizing_v1(&pv, &mask, cfg.squared_norm)?
                    };
                    Some(tape.constant(Tensor::scalar(value)))
                }
            }
        } else {
            None
        };
        terms.push(ScaleTerms {
            l_p: rep.loss,
            l_smooth,
            l_u,
            c_valid: rep.c_valid,
            all_masked: rep.all_masked,
        });
    }
    total_loss_on_tape(tape, &terms, cfg)
}

/// Loss components and parameter gradients for one triplet.
pub fn image_gradients(model: &Model, triplet: &Triplet, cfg: &LossConfig) -> Result<(LossBundle, Vec<Tensor>)> {
    let tape = Tape::new();
    let vars = model.params.bind(&tape);
    let (loss, bundle) = record_loss(&tape, &vars, model, triplet, cfg)?;
    let mut grads = tape.backward(loss)?;
    let out = vars
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((bundle, out))
}

/// Scalar loss of one triplet without recording gradients.
pub fn image_loss(model: &Model, triplet: &Triplet, cfg: &LossConfig) -> Result<LossBundle> {
    let tape = Tape::new();
    let vars = model.params.bind_frozen(&tape);
    Ok(record_loss(&tape, &vars, model, triplet, cfg)?.1)
}

/// Batch mean of losses and gradients, reduced in index order.
pub fn batch_gradients(model: &Model, batch: &[Triplet], cfg: &LossConfig) -> Result<(LossBundle, Vec<Tensor>)> {
    let results = map_indexed(batch.len(), |i| image_gradients(model, &batch[i], cfg));
    reduce(results, model)
}

/// Same as [`batch_gradients`] but never spawns workers.
pub fn batch_gradients_sequential(
    model: &Model,
    batch: &[Triplet],
    cfg: &LossConfig,
) -> Result<(LossBundle, Vec<Tensor>)> {
    let results = crate::parallel::map_indexed_sequential(batch.len(), |i| image_gradients(model, &batch[i], cfg));
    reduce(results, model)
}

fn reduce(results: Vec<Result<(LossBundle, Vec<Tensor>)>>, model: &Model) -> Result<(LossBundle, Vec<Tensor>)> {
    let n = results.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut acc: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut sum = LossBundle::default();
    for r in results {
        let (b, g) = r?;
        sum.l_p += b.l_p;
        sum.l_smooth += b.l_smooth;
        sum.l_u += b.l_u;
        sum.l_final += b.l_final;
        sum.c_valid += b.c_valid;
        sum.all_masked |= b.all_masked;
        for (a, gi) in acc.iter_mut().zip(&g) {
            for (x, y) in a.data_mut().iter_mut().zip(gi.data()) {
                *x += y;
            }
        }
    }
    let inv = 1.0 / n as f64;
    for a in &mut acc {
        for x in a.data_mut() {
            *x *= inv;
        }
    }
    sum.l_p *= inv;
    sum.l_smooth *= inv;
    sum.l_u *= inv;
    sum.l_final *= inv;
    sum.c_valid /= n;
    Ok((sum, acc))
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_p: f64,
    pub l_smooth: f64,
    pub l_u: f64,
    pub l_final: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrainStatus {
    Completed,
    /// Aborted by the divergence guard; the model is the last good one.
    Diverged { epoch: usize, reason: String },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub status: TrainStatus,
    pub checkpoint: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        matches!(self.status, TrainStatus::Diverged { .. })
    }
}

pub fn write_log<W: Write>(mut out: W, log: &[EpochRecord], uniformizing: bool) -> std::io::Result<()> {
    if uniformizing {
        writeln!(out, "epoch,L_p,L_smooth,L_u,L_final,lr")?;
    } else {
        writeln!(out, "epoch,L_p,L_smooth,L_final,lr")?;
    }
    for r in log {
        if uniformizing {
            writeln!(out, "{},{},{},{},{},{}", r.epoch, r.l_p, r.l_smooth, r.l_u, r.l_final, r.lr)?;
        } else {
            writeln!(out, "{},{},{},{},{}", r.epoch, r.l_p, r.l_smooth, r.l_final, r.lr)?;
        }
    }
    Ok(())
}

fn non_finite(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::DivisionByZero { .. })
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Joint optimization of the depth and pose networks. When `out` is given,
/// the checkpoint and epoch log are rewritten after every good epoch.
pub fn train(data: &[Triplet], cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    train_with(data, cfg, out, |_| {})
}

/// [`train`] with a callback after each completed epoch.
pub fn train_with<F: FnMut(&EpochRecord)>(
    data: &[Triplet],
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training needs a non-empty dataset".into()));
    }
    for t in data {
        check_resolution(t.height(), t.width())?;
    }
    let mut model = Model::new(cfg.model_config())?;
    let mut state = AdamState::new(&model.params);
    let ckpt_path = out.map(|d| d.join(CHECKPOINT_FILE));
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.clone();
    let mut status = TrainStatus::Completed;
    let mut order: Vec<usize> = (0..data.len()).collect();

    'epochs: for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<Triplet> = chunk
                .iter()
                .map(|&i| {
                    let seed: u64 = rng.gen();
                    if cfg.augment {
                        augment(&data[i], seed)
                    } else {
                        data[i].clone()
                    }
                })
                .collect();
            let step = batch_gradients(&model, &batch, &cfg.loss);
            let (bundle, grads) = match step {
                Ok(v) => v,
                Err(e) if non_finite(&e) => {
                    status = TrainStatus::Diverged { epoch, reason: e.to_string() };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let finite = bundle.l_final.is_finite() && grads.iter().all(Tensor::is_finite);
            if !finite {
                status = TrainStatus::Diverged {
                    epoch,
                    reason: "non-finite loss or gradient".into(),
                };
                break 'epochs;
            }
            adam_step(&mut model.params, &grads, &mut state, lr)?;
            if model.params.tensors().iter().any(|t| !t.is_finite()) {
                status = TrainStatus::Diverged {
                    epoch,
                    reason: "non-finite parameters after update".into(),
                };
                break 'epochs;
            }
            sums[0] += bundle.l_p;
            sums[1] += bundle.l_smooth;
            sums[2] += bundle.l_u;
            sums[3] += bundle.l_final;
            batches += 1;
        }
        let k = batches as f64;
        let rec = EpochRecord {
            epoch,
            l_p: sums[0] / k,
            l_smooth: sums[1] / k,
            l_u: sums[2] / k,
            l_final: sums[3] / k,
            lr,
        };
        info!(
            "epoch {epoch}: L_p {:.5} L_smooth {:.5} L_u {:.5} L_final {:.5}",
            rec.l_p, rec.l_smooth, rec.l_u, rec.l_final
        );
        log.push(rec);
        last_good = model.clone();
        if let (Some(dir), Some(path)) = (out, &ckpt_path) {
            checkpoint::save(path, &last_good, Some(&cfg.loss), epoch)?;
            let lp = dir.join(LOG_FILE);
            let mut buf = Vec::new();
            write_log(&mut buf, &log, cfg.loss.uniformizing).map_err(|e| Error::io(&lp, e))?;
            fs::write(&lp, buf).map_err(|e| Error::io(&lp, e))?;
        }
        on_epoch(&rec);
    }
    if let TrainStatus::Diverged { epoch, reason } = &status {
        warn!("training aborted at epoch {epoch}: {reason}; keeping the last good parameters");
        if let (Some(path), true) = (&ckpt_path, log.is_empty()) {
            checkpoint::save(path, &last_good, Some(&cfg.loss), 0)?;
        }
    }
    Ok(TrainOutcome {
        model: last_good,
        log,
        status,
        checkpoint: ckpt_path,
    })
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl Metrics {
    pub fn mean(all: &[Metrics]) -> Metrics {
        let n = all.len().max(1) as f64;
        let mut m = Metrics::default();
        for x in all {
            m.abs_rel += x.abs_rel / n;
            m.sq_rel += x.sq_rel / n;
            m.rmse += x.rmse / n;
            m.rmse_log += x.rmse_log / n;
            m.delta1 += x.delta1 / n;
            m.delta2 += x.delta2 / n;
            m.delta3 += x.delta3 / n;
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub median_scaling: bool,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            median_scaling: true,
            min_depth: 1e-3,
            max_depth: 80.0,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Standard error and accuracy metrics over pixels with `gt > 0`, after
/// optional median scaling and clamping of the prediction.
pub fn depth_metrics(pred: &[f64], gt: &[f64], opts: &EvalOptions) -> Result<Metrics> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "depth_metrics",
            left: vec![pred.len()],
            right: vec![gt.len()],
        });
    }
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] > 0.0 && gt[i].is_finite()).collect();
    if idx.is_empty() {
        return Err(Error::InvalidArgument("no valid ground-truth pixels".into()));
    }
    let scale = if opts.median_scaling {
        let mut g: Vec<f64> = idx.iter().map(|&i| gt[i]).collect();
        let mut p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
        let mp = median(&mut p);
        if !(mp > 0.0) {
            return Err(Error::InvalidArgument("median prediction must be positive".into()));
        }
        median(&mut g) / mp
    } else {
        1.0
    };
    let n = idx.len() as f64;
    let mut m = Metrics::default();
    let mut d = [0usize; 3];
    for &i in &idx {
        let p = (pred[i] * scale).clamp(opts.min_depth, opts.max_depth);
        let g = gt[i];
        let e = p - g;
        m.abs_rel += e.abs() / g;
        m.sq_rel += e * e / g;
        m.rmse += e * e;
        let el = p.ln() - g.ln();
        m.rmse_log += el * el;
        let ratio = (p / g).max(g / p);
        for (k, dk) in d.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *dk += 1;
            }
        }
    }
    m.abs_rel /= n;
    m.sq_rel /= n;
    m.rmse = (m.rmse / n).sqrt();
    m.rmse_log = (m.rmse_log / n).sqrt();
    m.delta1 = d[0] as f64 / n;
    m.delta2 = d[1] as f64 / n;
    m.delta3 = d[2] as f64 / n;
    Ok(m)
}

/// Median-scaled depth of one image next to its ground truth.
#[derive(Clone, Debug)]
pub struct DepthPrediction {
    pub depth: Tensor,
    pub gt: Tensor,
}

/// Full-resolution depth prediction for every triplet with ground truth.
pub fn predict_depths(model: &Model, data: &[Triplet]) -> Result<Vec<DepthPrediction>> {
    let range = DepthRange::default();
    map_indexed(data.len(), |i| {
        let t = &data[i];
        let gt = t
            .gt_depth
            .clone()
            .ok_or_else(|| Error::InvalidArgument(format!("triplet {i} has no ground-truth depth")))?;
        let disp = predict_disparity(t.target(), model)?;
        Ok(DepthPrediction {
            depth: range.depth_map(&disp),
            gt,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: Metrics,
    pub per_image: Vec<Metrics>,
}

pub fn evaluate(model: &Model, data: &[Triplet], opts: &EvalOptions) -> Result<EvalReport> {
    let preds = predict_depths(model, data)?;
    let per_image = preds
        .iter()
        .map(|p| depth_metrics(p.depth.data(), p.gt.data(), opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        mean: Metrics::mean(&per_image),
        per_image,
    })
}

pub fn evaluate_checkpoint(path: &Path, data: &[Triplet], opts: &EvalOptions) -> Result<EvalReport> {
    let (model, _) = checkpoint::load(path)?;
    evaluate(&model, data, opts)
}

/// Metrics of a predictor that outputs the same depth everywhere.
pub fn constant_baseline(data: &[Triplet], opts: &EvalOptions) -> Result<Metrics> {
    let per = data
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let gt = t
                .gt_depth
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("triplet {i} has no ground-truth depth")))?;
            depth_metrics(&vec![1.0; gt.len()], gt.data(), opts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics::mean(&per))
}

/// Fraction of pixels on two-level ground truth whose median-scaled
/// prediction falls on the correct side of the geometric mean of the levels.
/// Images whose ground truth is not two-level are skipped.
pub fn plane_ordering_accuracy(preds: &[DepthPrediction]) -> f64 {
    let (mut correct, mut total) = (0usize, 0usize);
    for p in preds {
        let g = p.gt.data();
        let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lo < hi) || g.iter().any(|&v| v != lo && v != hi) {
            continue;
        }
        let mid = (lo * hi).sqrt();
        let mut pd = p.depth.data().to_vec();
        let mut gd = g.to_vec();
        let scale = median(&mut gd) / median(&mut pd);
        for (&d, &gt) in p.depth.data().iter().zip(g) {
            let near = d * scale < mid;
            if near == (gt == lo) {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}
