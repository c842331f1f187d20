mod common;

use addv::diffcore::{GradCheck, Projection, Tensor};
use addv::geometry::{compute_sample_grid, inverse_warp, rodrigues, se3_exp, warp, CameraIntrinsics, DepthRange, PoseSE3};
use common::random;
use proptest::prelude::*;

fn k(fx: f64, w: usize, h: usize) -> CameraIntrinsics {
    CameraIntrinsics::new(fx, fx, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap()
}

fn pose(w: [f64; 3], t: [f64; 3]) -> PoseSE3 {
    PoseSE3 {
        axis_angle: w,
        translation: t,
    }
}

#[test]
fn exp_examples() {
    let m = se3_exp([0.0; 3], [0.0; 3]);
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
        }
    }
    let r = rodrigues([0.0, 0.0, std::f64::consts::PI]);
    let expect = [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]];
    for i in 0..3 {
        for j in 0..3 {
            assert!((r[i][j] - expect[i][j]).abs() < 1e-15);
        }
    }
}

#[test]
fn identity_pose_grid_is_pixel_coordinates() {
    let (h, w) = (5, 7);
    let depth = random(&[h, w], 0.5, 9.0, 1);
    let (g, m) = compute_sample_grid(&depth, &PoseSE3::identity(), &k(10.0, w, h)).unwrap();
    for y in 0..h {
        for x in 0..w {
            assert_eq!(g.at(&[y, x, 0]), x as f64);
            assert_eq!(g.at(&[y, x, 1]), y as f64);
        }
    }
    assert!(m.data().iter().all(|&v| v == 1.0));
}

#[test]
fn fronto_parallel_shift() {
    let (h, w) = (8, 12);
    let depth = Tensor::full(&[h, w], 16.0);
    let (g, _) = compute_sample_grid(&depth, &PoseSE3::from_translation([1.0, 0.0, 0.0]), &k(32.0, w, h)).unwrap();
    for y in 0..h {
        for x in 0..w {
            assert!((g.at(&[y, x, 0]) - x as f64 - 2.0).abs() < 1e-9);
            assert!((g.at(&[y, x, 1]) - y as f64).abs() < 1e-9);
        }
    }
}

#[test]
fn half_turn_rotates_the_grid() {
    let (h, w) = (6, 8);
    let kk = k(20.0, w, h);
    let depth = random(&[h, w], 1.0, 4.0, 2);
    let (g, _) = compute_sample_grid(&depth, &pose([0.0, 0.0, std::f64::consts::PI], [0.0; 3]), &kk).unwrap();
    for y in 0..h {
        for x in 0..w {
            assert!((g.at(&[y, x, 0]) - (2.0 * kk.cx - x as f64)).abs() < 1e-12);
            assert!((g.at(&[y, x, 1]) - (2.0 * kk.cy - y as f64)).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_warp_returns_source() {
    let src = random(&[3, 6, 9], 0.0, 1.0, 3);
    let depth = random(&[6, 9], 1.0, 5.0, 4);
    let (out, mask) = inverse_warp(&src, &depth, &PoseSE3::identity(), &k(8.0, 9, 6)).unwrap();
    assert_eq!(out, src);
    assert!(mask.data().iter().all(|&m| m == 1.0));
    let pe = addv::losses::photometric_error(&src, &out, 0.85).unwrap();
    assert!(pe.data().iter().all(|&v| v.abs() < 1e-12));
}

#[test]
fn two_pixel_shift_of_a_ramp() {
    let (h, w) = (10, 16);
    let src = Tensor::from_fn(&[1, h, w], |i| 0.03 * (i % w) as f64 + 0.01 * (i / w) as f64);
    let depth = Tensor::full(&[h, w], 16.0);
    let (out, mask) = inverse_warp(&src, &depth, &PoseSE3::from_translation([1.0, 0.0, 0.0]), &k(32.0, w, h)).unwrap();
    for y in 0..h {
        for x in 0..w - 2 {
            assert!((out.at(&[0, y, x]) - src.at(&[0, y, x + 2])).abs() < 1e-10);
            assert_eq!(mask.at(&[y, x]), 1.0);
        }
        assert_eq!(mask.at(&[y, w - 1]), 0.0);
    }
}

#[test]
fn depth_gradient_at_interior_pixels() {
    let (h, w) = (6, 8);
    let kk = k(24.0, w, h);
    let src = random(&[1, 2, h, w], 0.0, 1.0, 5);
    let depth = random(&[1, 1, h, w], 14.0, 18.0, 6);
    let p = PoseSE3::from_translation([0.5, 0.1, 0.0]).to_tensor();
    let r = GradCheck::default().with_projection(Projection::Random(9)).run(
        |t, v| {
            let s = t.constant(src.clone());
            let pv = t.constant(p.clone());
            let (out, _) = warp(t, s, v[0], pv, &kk)?;
            // only interior target pixels, whose samples stay in bounds
            let m = t.constant(Tensor::from_fn(&[1, 1, h, w], |i| {
                let (y, x) = (i / w, i % w);
                if y >= 1 && y + 1 < h && x >= 1 && x + 2 < w {
                    1.0
                } else {
                    0.0
                }
            }));
            t.mul(out, m)
        },
        &[depth],
    );
    assert!(r.passed, "{r:?}");
}

fn invalid_columns(tx: f64) -> usize {
    let (h, w) = (4, 20);
    let (_, m) = inverse_warp(&Tensor::zeros(&[1, h, w]), &Tensor::full(&[h, w], 4.0), &PoseSE3::from_translation([tx, 0.0, 0.0]), &k(18.0, w, h)).unwrap();
    (0..w).filter(|&x| m.at(&[0, x]) == 0.0).count()
}

#[test]
fn validity_shrinks_with_translation() {
    let mut prev = 0;
    for tx in [0.0, 0.1, 0.3, 0.5, 1.0, 2.0, -2.5] {
        let n = invalid_columns(tx);
        assert!(n >= prev, "tx {tx}: {n} < {prev}");
        prev = n;
    }
}

#[test]
fn disparity_depth_mapping_spans_range() {
    let r = DepthRange::default();
    assert!((r.to_depth(0.0) - 100.0).abs() < 1e-9);
    assert!((r.to_depth(1.0) - 0.1).abs() < 1e-12);
    assert!((r.to_disparity(r.to_depth(0.37)) - 0.37).abs() < 1e-12);
}

proptest! {
    #[test]
    fn rotations_are_orthonormal(w in prop::array::uniform3(-4.0f64..4.0)) {
        let r = rodrigues(w);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let eye = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - eye).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_is_scale_invariant(
        w in prop::array::uniform3(-0.05f64..0.05),
        t in prop::array::uniform3(-0.3f64..0.3),
        s in 0.1f64..10.0,
        seed in 0u64..1000,
    ) {
        let depth = random(&[4, 5], 2.0, 6.0, seed);
        let kk = k(12.0, 5, 4);
        let (a, _) = compute_sample_grid(&depth, &pose(w, t), &kk).unwrap();
        let (b, _) = compute_sample_grid(&depth.map(|d| d * s), &pose(w, [t[0] * s, t[1] * s, t[2] * s]), &kk).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
