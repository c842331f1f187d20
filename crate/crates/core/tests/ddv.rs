mod common;

use addv::ddv::{addv_forward, compose_mle, compose_softargmax, estimate_probability_volume, generate_bins, volume_from_logits, AddvHead, ProbabilityVolume};
use addv::diffcore::{GradCheck, Projection, Tape, Tensor};
use addv::discretize::{uniform_bins, BinPartition, DisparityRange, Strategy};
use addv::params::{Init, ParamSet};
use common::{random, rng};
use proptest::prelude::*;

fn head(c: usize, n: usize, tau: f64, init: Init, seed: u64) -> (AddvHead, ParamSet) {
    let mut params = ParamSet::new();
    let h = AddvHead::new(&mut params, "h", c, n, tau, None, init, &mut rng(seed)).unwrap();
    (h, params)
}

fn bins(v: &[f64]) -> BinPartition {
    BinPartition::new(v.to_vec(), Strategy::Ud).unwrap()
}

fn volume(n: usize, h: usize, w: usize, p: &[f64]) -> ProbabilityVolume {
    ProbabilityVolume::new(Tensor::new(&[n, h, w], p.to_vec()).unwrap(), 1.0).unwrap()
}

#[test]
fn zero_head_is_degenerate() {
    for n in [2, 8, 32] {
        let (h, p) = head(6, n, 0.5, Init::Zeros, 0);
        let x = random(&[1, 6, 5, 7], -2.0, 2.0, 1);
        let pv = estimate_probability_volume(&x, &h, &p).unwrap();
        assert!(pv.probs().data().iter().all(|&v| (v - 1.0 / n as f64).abs() < 1e-15));
        let b = generate_bins(&x, &h, &p).unwrap();
        for (i, v) in b.values().iter().enumerate() {
            assert!((v - (i + 1) as f64 / n as f64).abs() < 1e-12);
        }
        let (d, _, _) = addv_forward(&x, &h, &p).unwrap();
        let expect = (n + 1) as f64 / (2 * n) as f64;
        assert!(d.data().iter().all(|&v| (v - expect).abs() < 1e-12));
    }
}

#[test]
fn probability_volume_properties() {
    let (h, p) = head(4, 8, 0.5, Init::KaimingUniform, 2);
    let x = random(&[1, 4, 6, 6], -1.0, 1.0, 3);
    let pv = estimate_probability_volume(&x, &h, &p).unwrap();
    for y in 0..6 {
        for xx in 0..6 {
            assert!((pv.pixel(y, xx).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let mut soft = h.clone();
    soft.tau = 1.0;
    let pv1 = estimate_probability_volume(&x, &soft, &p).unwrap();
    for y in 0..6 {
        for xx in 0..6 {
            let m05 = pv.pixel(y, xx).into_iter().fold(0.0, f64::max);
            let m1 = pv1.pixel(y, xx).into_iter().fold(0.0, f64::max);
            assert!(m05 >= m1);
        }
    }
}

#[test]
fn bins_ignore_spatial_layout() {
    let (h, p) = head(3, 8, 0.5, Init::KaimingUniform, 4);
    let x = random(&[1, 3, 4, 4], -1.0, 1.0, 5);
    // reverse the pixel order in every channel
    let mut y = x.clone();
    for c in 0..3 {
        for i in 0..16 {
            y.data_mut()[c * 16 + i] = x.data()[c * 16 + 15 - i];
        }
    }
    let a = generate_bins(&x, &h, &p).unwrap();
    let b = generate_bins(&y, &h, &p).unwrap();
    for (u, v) in a.values().iter().zip(b.values()) {
        assert!((u - v).abs() < 1e-14);
    }
}

#[test]
fn first_bin_gradient_wrt_features() {
    let (h, p) = head(3, 6, 0.5, Init::KaimingUniform, 6);
    let x = random(&[1, 3, 4, 4], -1.0, 1.0, 7);
    let r = GradCheck::default().run(
        |t, v| {
            let vars = p.bind_frozen(t);
            let b = h.bin_values(t, &vars, v[0])?;
            let w = t.constant(Tensor::from_fn(&[1, 6, 1, 1], |i| if i == 0 { 1.0 } else { 0.0 }));
            let s = t.mul(b, w)?;
            t.sum(s)
        },
        &[x],
    );
    assert!(r.passed, "{r:?}");
}

#[test]
fn compose_examples() {
    let b = bins(&[0.1, 0.5, 0.9]);
    let pv = volume(3, 1, 1, &[0.2, 0.5, 0.3]);
    assert!((compose_softargmax(&pv, &b).unwrap().item() - 0.54).abs() < 1e-15);
    assert_eq!(compose_mle(&pv, &b).unwrap().item(), 0.5);

    for k in 0..3 {
        let mut p = vec![0.0; 3];
        p[k] = 1.0;
        let pv = volume(3, 1, 1, &p);
        assert_eq!(compose_softargmax(&pv, &b).unwrap().item(), b.values()[k]);
        assert_eq!(compose_mle(&pv, &b).unwrap().item(), b.values()[k]);
    }

    let tie = volume(2, 1, 1, &[0.5, 0.5]);
    assert_eq!(compose_mle(&tie, &bins(&[0.3, 0.7])).unwrap().item(), 0.3);

    for n in [1, 4, 32] {
        let edges: Vec<f64> = (1..=n).map(|i| i as f64 / n as f64).collect();
        let pv = ProbabilityVolume::new(Tensor::full(&[n, 2, 2], 1.0 / n as f64), 1.0).unwrap();
        let d = compose_softargmax(&pv, &bins(&edges)).unwrap();
        assert!(d.data().iter().all(|&v| (v - (n + 1) as f64 / (2 * n) as f64).abs() < 1e-12));
    }
    let u = uniform_bins(4, DisparityRange::new(0.0, 1.0).unwrap()).unwrap();
    assert!(compose_softargmax(&volume(3, 1, 1, &[0.2, 0.5, 0.3]), &u).is_err());
}

#[test]
fn resolution_changes_only_spatial_extent() {
    let (h, p) = head(4, 8, 0.5, Init::KaimingUniform, 8);
    let small = random(&[1, 4, 4, 4], -1.0, 1.0, 9);
    let large = random(&[1, 4, 8, 8], -1.0, 1.0, 9);
    let (d1, pv1, b1) = addv_forward(&small, &h, &p).unwrap();
    let (d2, pv2, b2) = addv_forward(&large, &h, &p).unwrap();
    assert_eq!(d1.shape(), &[4, 4]);
    assert_eq!(d2.shape(), &[8, 8]);
    assert_eq!(pv1.n_bins(), pv2.n_bins());
    assert_eq!(b1.len(), b2.len());
}

#[test]
fn full_head_gradcheck() {
    let (h, p) = head(3, 5, 0.5, Init::KaimingUniform, 10);
    let x = random(&[1, 3, 4, 4], -1.0, 1.0, 11);
    let mut inputs = vec![x];
    inputs.extend(p.tensors().iter().cloned());
    let r = GradCheck::default().with_projection(Projection::Random(4)).run(
        |t, v| {
            let out = h.forward(t, &v[1..], v[0])?;
            Ok(out.disparity)
        },
        &inputs,
    );
    assert!(r.passed, "{r:?}");
}

#[test]
fn sharpening_shrinks_the_soft_argmax_bias() {
    let logits = random(&[6, 4, 4], -2.0, 2.0, 12);
    let b = bins(&[0.1, 0.2, 0.35, 0.5, 0.8, 1.0]);
    let mut prev_gap = f64::INFINITY;
    let mut prev_max: Option<Vec<f64>> = None;
    let mut mle0: Option<Tensor> = None;
    for tau in [1.0, 0.5, 0.25, 0.1] {
        let pv = volume_from_logits(&logits, tau).unwrap();
        let soft = compose_softargmax(&pv, &b).unwrap();
        let mle = compose_mle(&pv, &b).unwrap();
        let gap = soft.data().iter().zip(mle.data()).map(|(s, m)| (s - m).abs()).sum::<f64>();
        assert!(gap <= prev_gap + 1e-12, "tau {tau}: {gap} > {prev_gap}");
        prev_gap = gap;
        let maxes: Vec<f64> = (0..16).map(|i| pv.pixel(i / 4, i % 4).into_iter().fold(0.0, f64::max)).collect();
        if let Some(p) = &prev_max {
            assert!(maxes.iter().zip(p).all(|(a, b)| a > b));
        }
        prev_max = Some(maxes);
        match &mle0 {
            None => mle0 = Some(mle),
            Some(m) => assert_eq!(m, &mle),
        }
    }
}

proptest! {
    #[test]
    fn soft_argmax_stays_within_bin_range(seed in 0u64..10_000, tau in 0.05f64..=1.0) {
        let logits = random(&[5, 3, 3], -4.0, 4.0, seed);
        let b = bins(&[0.05, 0.3, 0.31, 0.7, 0.95]);
        let d = compose_softargmax(&volume_from_logits(&logits, tau).unwrap(), &b).unwrap();
        prop_assert!(d.data().iter().all(|&v| (0.05 - 1e-15..=0.95 + 1e-15).contains(&v)));
    }

    #[test]
    fn mle_is_temperature_invariant(seed in 0u64..10_000, tau in 0.05f64..=1.0) {
        let logits = random(&[5, 3, 3], -4.0, 4.0, seed);
        let b = bins(&[0.05, 0.3, 0.31, 0.7, 0.95]);
        let a = compose_mle(&volume_from_logits(&logits, 1.0).unwrap(), &b).unwrap();
        let c = compose_mle(&volume_from_logits(&logits, tau).unwrap(), &b).unwrap();
        prop_assert_eq!(a, c);
    }
}

#[test]
fn tape_head_rejects_batched_input() {
    let (h, p) = head(3, 4, 0.5, Init::Zeros, 0);
    let tape = Tape::new();
    let vars = p.bind_frozen(&tape);
    let x = tape.constant(Tensor::zeros(&[2, 3, 4, 4]));
    assert!(h.forward(&tape, &vars, x).is_err());
}
