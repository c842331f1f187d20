mod common;

use addv::diffcore::{GradCheck, Projection, Tape, Tensor};
use addv::discretize::Strategy;
use addv::geometry::PoseSE3;
use addv::gradsuite::{run_suite, Scope};
use addv::nets::*;
use common::random;

fn model(cfg: ModelConfig) -> Model {
    Model::new(cfg).unwrap()
}

#[test]
fn four_scales_from_a_64_pixel_image() {
    let m = model(ModelConfig::default());
    let outs = depth_forward(&random(&[3, 64, 64], 0.0, 1.0, 1), &m).unwrap();
    let sides: Vec<_> = outs.iter().map(|o| (o.disparity.shape()[0], o.disparity.shape()[1])).collect();
    assert_eq!(sides, [(64, 64), (32, 32), (16, 16), (8, 8)]);
    for o in &outs {
        assert_eq!(o.volume.n_bins(), 32);
        assert!(o.disparity.data().iter().all(|&d| d > 0.0 && d <= 1.0));
    }
    assert_eq!(m.depth.heads.len(), 4);
}

#[test]
fn zero_heads_give_the_midpoint_disparity() {
    for n in [2, 7, 32] {
        let m = model(ModelConfig { zero_heads: true, n_bins: n, ..Default::default() });
        let expect = (n + 1) as f64 / (2 * n) as f64;
        for o in depth_forward(&random(&[3, 32, 16], 0.0, 1.0, 2), &m).unwrap() {
            assert!(o.disparity.data().iter().all(|&d| (d - expect).abs() < 1e-12), "N={n}");
        }
    }
}

#[test]
fn resolution_must_divide_by_sixteen() {
    let m = model(ModelConfig::default());
    for (h, w) in [(50, 64), (64, 40), (8, 8)] {
        assert!(depth_forward(&random(&[3, h, w], 0.0, 1.0, 3), &m).is_err(), "{h}x{w}");
    }
    assert!(check_resolution(16, 48).is_ok());
}

#[test]
fn depth_net_fits_the_budget() {
    for strategy in [Strategy::Addv, Strategy::Ud, Strategy::Sid] {
        let m = model(ModelConfig { strategy, ..Default::default() });
        assert!(m.depth_param_count() < 500_000, "{strategy:?}: {}", m.depth_param_count());
    }
}

#[test]
fn heads_are_independent_across_scales() {
    let m = model(ModelConfig::default());
    let outs = depth_forward(&random(&[3, 32, 32], 0.0, 1.0, 4), &m).unwrap();
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(outs[i].bins.values(), outs[j].bins.values(), "scales {i} and {j}");
        }
    }
}

#[test]
fn forward_is_bitwise_reproducible() {
    let img = random(&[3, 32, 48], 0.0, 1.0, 5);
    let a = depth_forward(&img, &model(ModelConfig::default())).unwrap();
    let b = depth_forward(&img, &model(ModelConfig::default())).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.disparity.data(), y.disparity.data());
        assert_eq!(x.bins.values(), y.bins.values());
    }
    let other = model(ModelConfig { seed: 1, ..Default::default() });
    assert_ne!(predict_disparity(&img, &other).unwrap().data(), a[0].disparity.data());
}

#[test]
fn pose_contract() {
    let (a, b) = (random(&[3, 32, 32], 0.0, 1.0, 6), random(&[3, 32, 32], 0.0, 1.0, 7));
    let zero = model(ModelConfig { zero_pose_output: true, ..Default::default() });
    assert_eq!(pose_forward(&a, &b, &zero).unwrap(), PoseSE3::identity());

    let m = model(ModelConfig::default());
    let p = pose_forward(&a, &b, &m).unwrap();
    assert!(p.to_vector().iter().all(|v| v.is_finite()));
    // no state leaks between pairs
    let c = random(&[3, 32, 32], 0.0, 1.0, 8);
    let _ = pose_forward(&c, &a, &m).unwrap();
    assert_eq!(pose_forward(&a, &b, &m).unwrap(), p);
    assert!(pose_forward(&a, &random(&[3, 16, 32], 0.0, 1.0, 9), &m).is_err());
}

#[test]
fn translation_gradient_wrt_pixels() {
    let m = model(ModelConfig { seed: 4, ..Default::default() });
    let a = random(&[1, 3, 16, 16], 0.0, 1.0, 10);
    let b = random(&[1, 3, 16, 16], 0.0, 1.0, 11);
    let r = GradCheck::default().with_projection(Projection::Sum).with_max_coords(40).run(
        |t: &Tape, v| {
            let vars = m.params.bind_frozen(t);
            let p = m.pose.forward(t, &vars, v[0], v[1])?;
            let w = t.constant(Tensor::new(&[6], vec![0.0, 0.0, 0.0, 1.0, 2.0, -1.0])?);
            t.mul(p, w)
        },
        &[a, b],
    );
    assert!(r.passed, "{r:?}");
}

#[test]
fn end_to_end_gradients() {
    let results = run_suite(Scope::E2e, None).unwrap();
    assert_eq!(results.len(), 2);
    for r in results {
        assert!(r.passed, "{} {:e}", r.name, r.max_rel_err);
        assert!(r.max_rel_err < 1e-4);
    }
}
