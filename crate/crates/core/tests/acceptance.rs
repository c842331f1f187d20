//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero if any fails.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use addv::ddv::{addv_forward, compose_mle, compose_softargmax, generate_bins, volume_from_logits, AddvHead, ProbabilityVolume};
use addv::diffcore::Tensor;
use addv::discretize::{adaptive_bins, uniform_bins, BinPartition, DisparityRange, Strategy};
use addv::datagen::{generate_set, Layout};
use addv::geometry::{compute_sample_grid, CameraIntrinsics, PoseSE3};
use addv::gradsuite::{run_suite, Scope};
use addv::losses::{uniformizing_v1, uniformizing_v2_masked};
use addv::params::{Init, ParamSet};
use addv::trainer::*;
use common::{random, rng};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut names = Vec::new();
    let mut worst: f64 = 0.0;
    for scope in [Scope::Ops, Scope::Losses, Scope::E2e] {
        for r in run_suite(scope, None).map_err(|e| e.to_string())? {
            ensure!(r.passed && r.max_rel_err < 1e-4, "{} max rel err {:e} {:?}", r.name, r.max_rel_err, r.failure);
            worst = worst.max(r.max_rel_err);
            names.push(r.name);
        }
    }
    let required = [
        "conv2d", "sigmoid", "softmax_tau", "cumsum", "avg_pool2", "global_avg_pool", "bilinear_sample",
        "adaptive_bins", "soft_argmax", "ssim", "pe", "smoothness", "uniformizing_v2", "l_final",
    ];
    for r in required {
        ensure!(names.iter().any(|n| n == r), "no check for {r}");
    }
    let t = start.elapsed();
    ensure!(t.as_secs() < 120, "suite took {t:?}");
    Ok(format!("{} checks, worst rel err {worst:.1e}, {:.1}s", names.len(), t.as_secs_f64()))
}

fn degenerates() -> Outcome {
    for n in [2, 16, 32, 64] {
        let mut params = ParamSet::new();
        let head = AddvHead::new(&mut params, "h", 8, n, 0.5, None, Init::Zeros, &mut rng(n as u64)).unwrap();
        let x = random(&[1, 8, 6, 5], -3.0, 3.0, n as u64);
        let b = generate_bins(&x, &head, &params).map_err(|e| e.to_string())?;
        for (i, v) in b.values().iter().enumerate() {
            ensure!((v - (i + 1) as f64 / n as f64).abs() < 1e-12, "N={n}: bin {i} = {v}");
        }
        let (d, _, _) = addv_forward(&x, &head, &params).map_err(|e| e.to_string())?;
        let expect = (n + 1) as f64 / (2 * n) as f64;
        ensure!(d.data().iter().all(|v| (v - expect).abs() < 1e-12), "N={n}: disparity is not {expect}");
        let c = adaptive_bins(&Tensor::full(&[n], 0.37)).map_err(|e| e.to_string())?;
        // equal widths put the values on the upper edges of the uniform partition
        let u = uniform_bins(n, DisparityRange::new(0.0, 1.0).unwrap()).map_err(|e| e.to_string())?;
        let half = 0.5 / n as f64;
        ensure!(
            c.values().iter().zip(u.values()).all(|(a, b)| (a - b - half).abs() < 1e-12),
            "N={n}: constant logits differ from the uniform edges"
        );
    }
    Ok("zero head and constant logits exact for N in {2, 16, 32, 64}".into())
}

fn sharpening() -> Outcome {
    let b = BinPartition::new(vec![0.05, 0.15, 0.3, 0.45, 0.6, 0.7, 0.85, 1.0], Strategy::Addv).unwrap();
    let (h, w) = (6, 6);
    let logits = random(&[8, h, w], -2.0, 2.0, 31);
    let mut prev: Option<(Vec<f64>, f64, Vec<usize>)> = None;
    for tau in [1.0, 0.5, 0.25, 0.1] {
        let pv = volume_from_logits(&logits, tau).map_err(|e| e.to_string())?;
        let soft = compose_softargmax(&pv, &b).map_err(|e| e.to_string())?;
        let mle = compose_mle(&pv, &b).map_err(|e| e.to_string())?;
        let maxes: Vec<f64> = (0..h * w).map(|i| pv.pixel(i / w, i % w).into_iter().fold(0.0, f64::max)).collect();
        // a single pixel's gap can grow while mass on either side of the mode
        // stops cancelling, so the law is checked on the image mean
        let gap = soft.data().iter().zip(mle.data()).map(|(s, m)| (s - m).abs()).sum::<f64>() / (h * w) as f64;
        let arg = pv.argmax();
        if let Some((pm, pg, pa)) = &prev {
            ensure!(maxes.iter().zip(pm).all(|(a, b)| a > b), "max probability did not grow at tau {tau}");
            ensure!(gap <= *pg, "mean soft-argmax to MLE gap grew to {gap} at tau {tau}");
            ensure!(&arg == pa, "argmax changed at tau {tau}");
        }
        prev = Some((maxes, gap, arg));
    }
    Ok(format!("max probability rises at all {} pixels, mean gap shrinks over tau 1, 0.5, 0.25, 0.1", h * w))
}

fn volume(n: usize, h: usize, w: usize, p: Vec<f64>) -> ProbabilityVolume {
    ProbabilityVolume::new(Tensor::new(&[n, h, w], p).unwrap(), 1.0).unwrap()
}

fn uniformizing() -> Outcome {
    let ones = Tensor::ones(&[4, 4]);
    for seed in 0..200 {
        let pv = volume_from_logits(&random(&[6, 4, 4], -3.0, 3.0, seed), 0.5).unwrap();
        for squared in [false, true] {
            let (l, _) = uniformizing_v2_masked(&pv, &ones, squared).unwrap();
            ensure!(l > 1e-9, "seed {seed}: unbalanced volume gave {l}");
        }
    }
    // rows of a circulant matrix average to uniform
    let base = [0.5, 0.3, 0.15, 0.05];
    let bal = volume(4, 1, 4, (0..16).map(|i| base[(i / 4 + i % 4) % 4]).collect());
    for squared in [false, true] {
        let (l, _) = uniformizing_v2_masked(&bal, &Tensor::ones(&[1, 4]), squared).unwrap();
        ensure!(l.abs() < 1e-9, "balanced volume gave {l}");
    }
    // pixels 0 and 3 balance; skewed 1 and 2 are masked out
    let pv = volume(2, 2, 2, vec![1.0, 1.0, 0.9, 0.0, 0.0, 0.0, 0.1, 1.0]);
    let mask = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let (l, all) = uniformizing_v2_masked(&pv, &mask, false).unwrap();
    ensure!(!all && l.abs() < 1e-15, "masked fixture gave {l}");
    let (l, _) = uniformizing_v2_masked(&pv, &Tensor::ones(&[2, 2]), false).unwrap();
    ensure!((l - 0.45).abs() < 1e-12, "unmasked fixture gave {l}, expected 0.45");
    let l1 = uniformizing_v1(&pv, &mask, false).unwrap();
    ensure!(l1 == 0.0, "first variant on masked fixture gave {l1}");
    let (l, all) = uniformizing_v2_masked(&pv, &Tensor::zeros(&[2, 2]), false).unwrap();
    ensure!(all && l == 0.0, "fully masked fixture gave {l}");
    Ok("non-negative, zero only at balance, masks exact".into())
}

fn geometry() -> Outcome {
    let mut worst: f64 = 0.0;
    for (d, tx, fx) in [(16.0, 1.0, 32.0), (2.5, -0.1, 57.6), (7.0, 0.3, 40.0)] {
        let (h, w) = (8, 12);
        let k = CameraIntrinsics::new(fx, fx, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap();
        let (g, _) = compute_sample_grid(&Tensor::full(&[h, w], d), &PoseSE3::from_translation([tx, 0.0, 0.0]), &k).unwrap();
        for y in 0..h {
            for x in 0..w {
                worst = worst.max((g.at(&[y, x, 0]) - x as f64 - fx * tx / d).abs());
                worst = worst.max((g.at(&[y, x, 1]) - y as f64).abs());
            }
        }
    }
    ensure!(worst < 1e-9, "grid shift off by {worst:e}");
    let mut pe_worst: f64 = 0.0;
    for layout in [Layout::TwoPlane, Layout::Heightfield] {
        for t in generate_set(layout, 10, 64, 64, 5).unwrap() {
            for pe in common::gt_warp_error(&t) {
                pe_worst = pe_worst.max(pe);
            }
        }
    }
    ensure!(pe_worst < 0.01, "ground-truth warp mean pe {pe_worst}");
    Ok(format!("shift err {worst:.1e}, worst mean pe {pe_worst:.4}"))
}

fn toy_training() -> Outcome {
    let start = Instant::now();
    let train_set = generate_set(Layout::TwoPlane, 200, 64, 64, 1).map_err(|e| e.to_string())?;
    let held_out = generate_set(Layout::TwoPlane, 20, 64, 64, 999).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { n_bins: 32, strategy: Strategy::Addv, ..TrainConfig::default() };
    let out = train_with(&train_set, &cfg, None, |r| {
        eprintln!("  epoch {:>2}  L_final {:.5}  ({:.0}s)", r.epoch, r.l_final, start.elapsed().as_secs_f64())
    })
    .map_err(|e| e.to_string())?;
    ensure!(!out.diverged() && out.log.len() == 20, "training stopped: {:?}", out.status);
    ensure!(out.log.iter().all(|r| r.l_final.is_finite()), "non-finite epoch loss");
    let (first, last) = (out.log[0].l_final, out.log[19].l_final);
    ensure!(last < 0.5 * first, "L_final {last:.5} is not below half of {first:.5}");
    let opts = EvalOptions::default();
    let preds = predict_depths(&out.model, &held_out).map_err(|e| e.to_string())?;
    let ordering = plane_ordering_accuracy(&preds);
    ensure!(ordering > 0.9, "plane ordering {ordering:.3}");
    let abs_rel = evaluate(&out.model, &held_out, &opts).map_err(|e| e.to_string())?.mean.abs_rel;
    let baseline = constant_baseline(&held_out, &opts).map_err(|e| e.to_string())?.abs_rel;
    ensure!(abs_rel <= 0.7 * baseline, "AbsRel {abs_rel:.4} vs baseline {baseline:.4}");
    let t = start.elapsed();
    ensure!(t.as_secs() < 30 * 60, "took {t:?}");
    // reported, not enforced: epoch means of L_u are noisy once it is small
    let tail: Vec<String> = out.log[15..].iter().map(|r| format!("{:.2e}", r.l_u)).collect();
    Ok(format!(
        "L_final {first:.4} -> {last:.4}, ordering {ordering:.3}, AbsRel {abs_rel:.4} vs {baseline:.4}, L_u over epochs 16-20 [{}], {:.0}s",
        tail.join(" "),
        t.as_secs_f64()
    ))
}

fn ablations() -> Outcome {
    let data = generate_set(Layout::TwoPlane, 200, 64, 64, 1).map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for (name, u, s) in [("u off", false, true), ("s off", true, false), ("both off", false, false)] {
        let mut cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        cfg.loss.uniformizing = u;
        cfg.loss.sharpening = s;
        let out = train(&data, &cfg, None).map_err(|e| format!("{name}: {e}"))?;
        match &out.status {
            TrainStatus::Completed => {
                ensure!(out.log.iter().all(|r| r.l_final.is_finite()), "{name}: non-finite loss");
                notes.push(format!("{name} completed"));
            }
            // sharpening without uniformizing may collapse
            TrainStatus::Diverged { epoch, .. } if s && !u => notes.push(format!("{name} stopped by guard at epoch {epoch}")),
            other => return Err(format!("{name}: {other:?}")),
        }
    }
    Ok(notes.join(", "))
}

fn evaluation() -> Outcome {
    let opts = EvalOptions::default();
    for seed in 0..50 {
        let gt = random(&[256], 1.0, 60.0, seed);
        let pred = random(&[256], 0.5, 40.0, seed + 1000);
        let a = depth_metrics(pred.data(), gt.data(), &opts).unwrap();
        for s in [0.1, 10.0] {
            let scaled: Vec<f64> = pred.data().iter().map(|d| d * s).collect();
            let b = depth_metrics(&scaled, gt.data(), &opts).unwrap();
            for (x, y) in [(a.abs_rel, b.abs_rel), (a.sq_rel, b.sq_rel), (a.rmse, b.rmse), (a.rmse_log, b.rmse_log)] {
                ensure!((x - y).abs() <= 1e-9, "seed {seed} scale {s}: {x} vs {y}");
            }
            ensure!((a.delta1, a.delta2, a.delta3) == (b.delta1, b.delta2, b.delta3), "seed {seed} scale {s}: deltas moved");
        }
    }
    let raw = EvalOptions { median_scaling: false, ..opts };
    let m = depth_metrics(&[1.0, 4.0], &[2.0, 2.0], &raw).unwrap();
    let expect = [0.75, 1.25, 2.5f64.sqrt(), 2f64.ln()];
    for (got, want) in [m.abs_rel, m.sq_rel, m.rmse, m.rmse_log].into_iter().zip(expect) {
        ensure!((got - want).abs() < 1e-15, "fixture gave {got}, expected {want}");
    }
    let m = depth_metrics(&[3.0, 1.9], &[2.0, 1.0], &raw).unwrap();
    ensure!((m.delta1, m.delta2, m.delta3) == (0.0, 0.5, 1.0), "fixture deltas {:?}", (m.delta1, m.delta2, m.delta3));
    let m = depth_metrics(&[2.0, 6.0], &[1.0, 3.0], &opts).unwrap();
    ensure!(m.abs_rel < 1e-12, "median-scaled fixture gave {}", m.abs_rel);
    Ok("scale invariant to 1e-9, fixtures exact".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("closed-form degenerates", degenerates),
        ("sharpening laws", sharpening),
        ("uniformizing laws", uniformizing),
        ("geometry oracle", geometry),
        ("toy training", toy_training),
        ("ablation wiring", ablations),
        ("evaluation protocol", evaluation),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(msg) => println!("PASS {}. {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {}. {name}: {msg}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
