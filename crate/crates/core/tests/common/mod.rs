#![allow(dead_code)]

use addv::diffcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d:e} exceeds {tol:e}");
}

/// Mean photometric error of each source frame warped into the target with
/// ground-truth depth and motion. Pixels within 4 of the image border or 2 of
/// a depth discontinuity (occlusion bands) are left out, as are samples that
/// leave the source view.
pub fn gt_warp_error(t: &addv::datagen::Triplet) -> [f64; 2] {
    use addv::geometry::inverse_warp;
    use addv::losses::photometric_error;

    let gt = t.gt_depth.as_ref().expect("ground truth");
    let motions = t.motions.expect("ground-truth motion");
    let (h, w) = (t.height(), t.width());
    // a step of more than 5% between neighbours marks a discontinuity
    let step = |y: usize, x: usize| {
        let z = gt.at(&[y, x]);
        let jump = |v: usize, u: usize| (gt.at(&[v, u]) - z).abs() > 0.05 * z;
        (x + 1 < w && jump(y, x + 1)) || (y + 1 < h && jump(y + 1, x))
    };
    let edge = |y: usize, x: usize| (y - 3..=y + 2).any(|v| (x - 3..=x + 2).any(|u| step(v, u)));
    let mut out = [0.0; 2];
    for (k, (src, m)) in [(&t.frames[0], &motions[0]), (&t.frames[2], &motions[1])].into_iter().enumerate() {
        let (warped, mask) = inverse_warp(&src.reshape(&[1, 3, h, w]).unwrap(), gt, m, &t.intrinsics).unwrap();
        let pe = photometric_error(t.target(), &warped.reshape(&[3, h, w]).unwrap(), 0.85).unwrap();
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 4..h - 4 {
            for x in 4..w - 4 {
                if mask.at(&[y, x]) > 0.0 && !edge(y, x) {
                    sum += pe.at(&[y, x]);
                    n += 1;
                }
            }
        }
        assert!(n > (h - 8) * (w - 8) / 2, "only {n} interior pixels");
        out[k] = sum / n as f64;
    }
    out
}
