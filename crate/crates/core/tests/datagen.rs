mod common;

use std::fs;

use addv::datagen::*;
use addv::diffcore::Tensor;
use addv::geometry::PoseSE3;
use addv::Error;

#[test]
fn zero_motion_gives_identical_frames() {
    let mut spec = SceneSpec::random(Layout::Heightfield, 32, 32, 1);
    spec.motions = [PoseSE3::identity(); 2];
    let t = generate_triplet(&spec).unwrap();
    assert_eq!(t.frames[0], t.frames[1]);
    assert_eq!(t.frames[2], t.frames[1]);
}

#[test]
fn two_plane_depth_has_exactly_two_values() {
    for seed in 0..5 {
        let spec = SceneSpec::random(Layout::TwoPlane, 64, 48, seed);
        let t = generate_triplet(&spec).unwrap();
        let mut v = t.gt_depth.unwrap().data().to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        assert_eq!(v, [spec.near, spec.far]);
    }
}

/// Integer shift `s` maximizing the normalized correlation of
/// `src(x + s)` with `target(x)` over every row.
fn correlation_peak(src: &Tensor, target: &Tensor, max_shift: i64) -> i64 {
    let (h, w) = (target.shape()[1], target.shape()[2]);
    let mut best = (f64::MIN, 0);
    for s in -max_shift..=max_shift {
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for c in 0..3 {
            for y in 0..h {
                for x in max_shift as usize..w - max_shift as usize {
                    let a = target.at(&[c, y, x]) - 0.5;
                    let b = src.at(&[c, y, (x as i64 + s) as usize]) - 0.5;
                    ab += a * b;
                    aa += a * a;
                    bb += b * b;
                }
            }
        }
        let r = ab / (aa * bb).sqrt();
        if r > best.0 {
            best = (r, s);
        }
    }
    best.1
}

#[test]
fn fronto_parallel_shift_is_fx_tx_over_d() {
    for (seed, pixels) in [(2, 3.0), (3, -2.0), (4, 5.0)] {
        let mut spec = SceneSpec::random(Layout::TwoPlane, 64, 32, seed);
        spec.foreground = [0.0; 4];
        let tx = pixels * spec.far / spec.intrinsics.fx;
        spec.motions = [PoseSE3::from_translation([tx, 0.0, 0.0]), PoseSE3::identity()];
        let t = generate_triplet(&spec).unwrap();
        assert!(t.gt_depth.as_ref().unwrap().data().iter().all(|&d| d == spec.far));
        assert_eq!(correlation_peak(&t.frames[0], &t.frames[1], 8), pixels as i64);
    }
}

#[test]
fn ground_truth_warp_is_photometrically_consistent() {
    for layout in [Layout::TwoPlane, Layout::Heightfield] {
        for (i, t) in generate_set(layout, 10, 64, 64, 11).unwrap().iter().enumerate() {
            for pe in common::gt_warp_error(t) {
                assert!(pe < 0.01, "{layout} scene {i}: mean pe {pe}");
            }
        }
    }
}

#[test]
fn png_and_pfm_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let t = generate_random(Layout::Heightfield, 48, 32, 5).unwrap();
    save_triplet(dir.path(), &t).unwrap();
    let back = load_triplet(dir.path()).unwrap();
    for (a, b) in t.frames.iter().zip(&back.frames) {
        assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-12);
    }
    let (d0, d1) = (t.gt_depth.unwrap(), back.gt_depth.unwrap());
    assert!(d0.data().iter().zip(d1.data()).all(|(a, b)| ((a - b) / a).abs() < 1e-6));
    assert_eq!(back.intrinsics, t.intrinsics);
}

#[test]
fn dataset_directory_handling() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(dir.path()).unwrap().is_empty());

    for (i, t) in generate_set(Layout::TwoPlane, 3, 32, 32, 0).unwrap().iter().enumerate() {
        save_triplet(&dir.path().join(triplet_dir_name(2 - i)), t).unwrap();
    }
    let ds = load_dataset(dir.path()).unwrap();
    let names: Vec<_> = ds.entries().iter().map(|p| p.file_name().unwrap().to_owned()).collect();
    assert_eq!(names, ["000000", "000001", "000002"]);

    let meta = dir.path().join("000001").join(INTRINSICS_FILE);
    fs::write(&meta, "{ \"fx\": 1.0, ").unwrap();
    let err = ds.get(1).unwrap_err();
    assert!(err.to_string().contains(&meta.display().to_string()), "{err}");
    assert!(matches!(err, Error::Format { .. }), "{err:?}");
    assert!(ds.get(0).is_ok());
}

#[test]
fn missing_frame_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let t = generate_random(Layout::TwoPlane, 32, 32, 2).unwrap();
    save_triplet(dir.path(), &t).unwrap();
    fs::remove_file(dir.path().join(FRAME_FILES[2])).unwrap();
    let err = load_triplet(dir.path()).unwrap_err();
    assert!(err.to_string().contains(FRAME_FILES[2]), "{err}");
}

#[test]
fn augmentation_examples() {
    let t = generate_random(Layout::Heightfield, 32, 32, 7).unwrap();
    for seed in 0..20 {
        assert_eq!(augment(&t, seed), augment(&t, seed));
    }
    let flip = AugmentParams { flip: true, ..AugmentParams::IDENTITY };
    let once = apply_augmentation(&t, &flip);
    assert_ne!(once, t);
    assert_eq!(once.intrinsics.cx, 31.0 - t.intrinsics.cx);
    assert_eq!(apply_augmentation(&once, &flip), t);

    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    for seed in 0..10_000 {
        let p = AugmentParams::sample(seed);
        for f in [p.brightness, p.contrast, p.saturation] {
            assert!((0.8..=1.2).contains(&f), "seed {seed}: {p:?}");
        }
        assert!((-0.1..=0.1).contains(&p.hue));
        lo = lo.min(p.brightness);
        hi = hi.max(p.brightness);
    }
    assert!(lo < 0.801 && hi > 1.199, "[{lo}, {hi}]");
}

#[test]
fn jitter_is_shared_and_depth_untouched() {
    let t = generate_random(Layout::TwoPlane, 32, 32, 8).unwrap();
    let p = AugmentParams { flip: false, brightness: 1.15, contrast: 0.85, saturation: 1.1, hue: 0.05 };
    let a = apply_augmentation(&t, &p);
    assert_eq!(a.gt_depth, t.gt_depth);
    // identical source pixels map to identical outputs in every frame
    let mut seen = std::collections::HashMap::new();
    for (f, g) in t.frames.iter().zip(&a.frames) {
        for i in 0..32 * 32 {
            let key: Vec<u64> = (0..3).map(|c| f.data()[c * 1024 + i].to_bits()).collect();
            let val: Vec<u64> = (0..3).map(|c| g.data()[c * 1024 + i].to_bits()).collect();
            assert_eq!(seen.entry(key).or_insert(val.clone()), &val);
        }
    }
    assert!(a.frames.iter().all(|f| f.data().iter().all(|v| (0.0..=1.0).contains(v))));
}
