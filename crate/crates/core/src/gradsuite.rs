//! Finite-difference checks of every differentiable operation, grouped into
//! the scopes exposed on the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::{generate_random, Layout};
use crate::ddv::soft_argmax_on_tape;
use crate::diffcore::{GradCheck, GradReport, Projection, Tape, Tensor, Var};
use crate::discretize::adaptive_bins_on_tape;
use crate::geometry::{warp, CameraIntrinsics, DepthRange, PoseSE3};
use crate::losses::{
    edge_smoothness_on_tape, min_reprojection_on_tape, photometric_error_on_tape, ssim_on_tape,
    uniformizing_v2_on_tape, LossConfig,
};
use crate::nets::{Model, ModelConfig};
use crate::trainer::record_loss;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Losses,
    E2e,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "losses" => Ok(Scope::Losses),
            "e2e" => Ok(Scope::E2e),
            _ => Err(Error::InvalidArgument(format!("unknown scope {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub passed: bool,
    pub failure: Option<String>,
}

impl CheckResult {
    fn new(name: &str, r: GradReport) -> Self {
        Self {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            coords_checked: r.coords_checked,
            passed: r.passed,
            failure: r.failure,
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Random values bounded away from zero, for kinks at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Grid coordinates at least 0.1 px from integer positions, inside the image.
fn sample_grid_values(rng: &mut ChaCha8Rng, gh: usize, gw: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[1, gh, gw, 2], |i| {
        let lim = if i % 2 == 0 { w } else { h };
        rng.gen_range(0..lim - 1) as f64 + rng.gen_range(0.1..0.9)
    })
}

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 7.0,
        fy: 7.5,
        cx: 3.6,
        cy: 3.4,
    }
}

fn small_pose() -> Tensor {
    PoseSE3 {
        axis_angle: [0.01, -0.02, 0.015],
        translation: [0.08, -0.03, 0.02],
    }
    .to_tensor()
}

type Op = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    op: Op,
    inputs: Vec<Tensor>,
    projection: Projection,
    max_coords: Option<usize>,
}

fn case(name: &'static str, inputs: Vec<Tensor>, op: impl Fn(&Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        op: Box::new(op),
        inputs,
        projection: Projection::Random(17),
        max_coords: Some(24),
    }
}

fn op_cases() -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let r = &mut r;
    let a = rand_tensor(r, &[2, 3, 4], -1.0, 1.0);
    let b = rand_tensor(r, &[3, 1], -1.0, 1.0);
    let pos = rand_tensor(r, &[2, 3, 4], 0.5, 2.0);
    let pos2 = rand_tensor(r, &[2, 3, 4], 0.5, 2.0);
    let img = rand_tensor(r, &[1, 3, 6, 8], 0.0, 1.0);
    vec![
        case("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])),
        case("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])),
        case("div", vec![a.clone(), pos.clone()], |t, v| t.div(v[0], v[1])),
        case("minimum", vec![pos.clone(), pos2.clone()], |t, v| t.minimum(v[0], v[1])),
        case("maximum", vec![pos.clone(), pos2.clone()], |t, v| t.maximum(v[0], v[1])),
        case("abs", vec![away_from_zero(r, &[3, 5])], |t, v| t.abs(v[0])),
        case("exp", vec![a.clone()], |t, v| t.exp(v[0])),
        case("log", vec![pos.clone()], |t, v| t.log(v[0])),
        case("sqrt", vec![pos.clone()], |t, v| t.sqrt(v[0])),
        case("square", vec![a.clone()], |t, v| t.square(v[0])),
        case("sigmoid", vec![rand_tensor(r, &[4, 5], -4.0, 4.0)], |t, v| t.sigmoid(v[0])),
        case("elu", vec![away_from_zero(r, &[4, 5])], |t, v| t.elu(v[0])),
        case("scalar_div", vec![pos.clone()], |t, v| t.scalar_div(2.0, v[0])),
        case("mean_axis", vec![a.clone()], |t, v| t.mean_axis(v[0], 1)),
        case("sum_axis", vec![a.clone()], |t, v| t.sum_axis(v[0], 2)),
        case("concat", vec![a.clone(), pos.clone()], |t, v| t.concat(&[v[0], v[1]], 1)),
        case("diff", vec![img.clone()], |t, v| t.diff(v[0], 3)),
        case(
            "conv2d",
            vec![
                rand_tensor(r, &[2, 3, 5, 7], -1.0, 1.0),
                rand_tensor(r, &[4, 3, 3, 3], -1.0, 1.0),
                rand_tensor(r, &[4], -1.0, 1.0),
            ],
            |t, v| t.conv2d(v[0], v[1], v[2], 1, 1),
        ),
        case(
            "conv2d_strided",
            vec![
                rand_tensor(r, &[1, 2, 7, 9], -1.0, 1.0),
                rand_tensor(r, &[3, 2, 3, 3], -1.0, 1.0),
                rand_tensor(r, &[3], -1.0, 1.0),
            ],
            |t, v| t.conv2d(v[0], v[1], v[2], 2, 1),
        ),
        case(
            "conv2d_pointwise",
            vec![
                rand_tensor(r, &[1, 5, 3, 4], -1.0, 1.0),
                rand_tensor(r, &[2, 5, 1, 1], -1.0, 1.0),
                rand_tensor(r, &[2], -1.0, 1.0),
            ],
            |t, v| t.conv2d(v[0], v[1], v[2], 1, 0),
        ),
        case("softmax_tau", vec![rand_tensor(r, &[1, 6, 3, 4], -2.0, 2.0)], |t, v| {
            t.softmax(v[0], 1, 0.5)
        }),
        case("softmax_tau1", vec![rand_tensor(r, &[1, 6, 3, 4], -2.0, 2.0)], |t, v| {
            t.softmax(v[0], 1, 1.0)
        }),
        case("cumsum", vec![a.clone()], |t, v| t.cumsum(v[0], 1)),
        case("normalize_by_last", vec![pos.clone()], |t, v| t.normalize_by_last(v[0], 1)),
        case("global_avg_pool", vec![img.clone()], |t, v| t.global_avg_pool(v[0])),
        case("avg_pool2", vec![img.clone()], |t, v| t.avg_pool2(v[0])),
        case("upsample_bilinear", vec![rand_tensor(r, &[1, 2, 3, 4], -1.0, 1.0)], |t, v| {
            t.upsample_bilinear(v[0], 2)
        }),
        case("box_filter3", vec![img.clone()], |t, v| t.box_filter3(v[0])),
        case(
            "bilinear_sample",
            vec![img.clone(), sample_grid_values(r, 4, 5, 6, 8)],
            |t, v| Ok(t.bilinear_sample(v[0], v[1])?.0),
        ),
        case("pose_matrix", vec![Tensor::new(&[6], vec![0.3, -0.2, 0.5, 0.1, 0.2, -0.3]).unwrap()], |t, v| {
            t.pose_matrix(v[0])
        }),
        case("pose_matrix_small", vec![Tensor::new(&[6], vec![2e-4, -1e-4, 3e-4, 0.1, 0.2, -0.3]).unwrap()], |t, v| {
            t.pose_matrix(v[0])
        }),
        case("se3_inverse", vec![small_pose()], |t, v| t.se3_inverse(v[0])),
        case(
            "sample_grid",
            vec![rand_tensor(r, &[1, 1, 8, 8], 2.0, 5.0), small_pose()],
            |t, v| Ok(t.sample_grid(v[0], v[1], intrinsics())?.0),
        ),
        case("adaptive_bins", vec![rand_tensor(r, &[1, 8, 1, 1], -2.0, 2.0)], |t, v| {
            adaptive_bins_on_tape(t, v[0], 1)
        }),
        case(
            "soft_argmax",
            vec![rand_tensor(r, &[1, 5, 3, 4], -2.0, 2.0), rand_tensor(r, &[1, 5, 1, 1], -2.0, 2.0)],
            |t, v| {
                let p = t.softmax(v[0], 1, 0.5)?;
                let b = adaptive_bins_on_tape(t, v[1], 1)?;
                soft_argmax_on_tape(t, p, b)
            },
        ),
        case("disparity_to_depth", vec![rand_tensor(r, &[1, 1, 3, 4], 0.05, 1.0)], |t, v| {
            DepthRange::default().depth_on_tape(t, v[0])
        }),
    ]
}

fn loss_cases() -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(23);
    let r = &mut r;
    let a = rand_tensor(r, &[1, 3, 6, 7], 0.1, 0.9);
    let b = rand_tensor(r, &[1, 3, 6, 7], 0.1, 0.9);
    let mut mask = rand_tensor(r, &[6, 6], 0.0, 1.0).map(|v| if v < 0.7 { 1.0 } else { 0.0 });
    mask.set(&[0, 0], 1.0);
    let target = rand_tensor(r, &[1, 3, 8, 8], 0.1, 0.9);
    let srcs = [rand_tensor(r, &[1, 3, 8, 8], 0.1, 0.9), rand_tensor(r, &[1, 3, 8, 8], 0.1, 0.9)];
    let warped = [rand_tensor(r, &[1, 3, 8, 8], 0.1, 0.9), rand_tensor(r, &[1, 3, 8, 8], 0.1, 0.9)];
    let s0 = srcs[0].clone();
    let s1 = srcs[1].clone();
    let m2 = mask.clone();
    vec![
        case("ssim", vec![a.clone(), b.clone()], |t, v| ssim_on_tape(t, v[0], v[1])),
        case("pe", vec![a.clone(), b.clone()], |t, v| photometric_error_on_tape(t, v[0], v[1], 0.85)),
        case(
            "smoothness",
            vec![rand_tensor(r, &[1, 1, 6, 7], 0.1, 1.0), a.clone()],
            |t, v| edge_smoothness_on_tape(t, v[0], v[1]),
        ),
        case("uniformizing_v2", vec![rand_tensor(r, &[1, 5, 6, 6], -2.0, 2.0)], move |t, v| {
            let p = t.softmax(v[0], 1, 0.5)?;
            Ok(uniformizing_v2_on_tape(t, p, &mask, false)?.0)
        }),
        case("uniformizing_v2_squared", vec![rand_tensor(r, &[1, 5, 6, 6], -2.0, 2.0)], move |t, v| {
            let p = t.softmax(v[0], 1, 0.5)?;
            Ok(uniformizing_v2_on_tape(t, p, &m2, true)?.0)
        }),
        case(
            "min_reprojection",
            vec![target.clone(), warped[0].clone(), warped[1].clone()],
            move |t, v| {
                let s = [t.constant(s0.clone()), t.constant(s1.clone())];
                Ok(min_reprojection_on_tape(t, v[0], &[v[1], v[2]], None, &s, 0.85)?.loss)
            },
        ),
        case(
            "warp",
            vec![rand_tensor(r, &[1, 3, 8, 8], 0.0, 1.0), rand_tensor(r, &[1, 1, 8, 8], 2.0, 5.0), small_pose()],
            |t, v| Ok(warp(t, v[0], v[1], v[2], &intrinsics())?.0),
        ),
    ]
}

/// Small scene and model for the end-to-end checks.
pub fn e2e_fixture() -> Result<(Model, crate::datagen::Triplet)> {
    let triplet = generate_random(Layout::TwoPlane, 16, 16, 5)?;
    let model = Model::new(ModelConfig {
        n_bins: 8,
        seed: 3,
        ..ModelConfig::default()
    })?;
    Ok((model, triplet))
}

fn e2e_cases() -> Result<Vec<Case>> {
    let (model, triplet) = e2e_fixture()?;
    let chosen = [
        "depth.enc0.weight",
        "depth.dec4.weight",
        "depth.head0.prob.weight",
        "depth.head1.bins_post.weight",
        "depth.head3.bins_align.bias",
        "pose.out.weight",
        "pose.conv0.weight",
    ];
    let ids: Vec<usize> = chosen
        .iter()
        .map(|n| {
            model
                .params
                .names()
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| Error::InvalidArgument(format!("no parameter {n}")))
        })
        .collect::<Result<_>>()?;
    let inputs: Vec<Tensor> = ids.iter().map(|&i| model.params.tensors()[i].clone()).collect();
    let m1 = model.clone();
    let t1 = triplet.clone();
    let ids1 = ids.clone();
    let loss_case = Case {
        name: "l_final",
        op: Box::new(move |t, v| {
            let mut vars = m1.params.bind_frozen(t);
            for (k, &i) in ids1.iter().enumerate() {
                vars[i] = v[k];
            }
            Ok(record_loss(t, &vars, &m1, &t1, &LossConfig::default())?.0)
        }),
        inputs,
        projection: Projection::Sum,
        max_coords: Some(6),
    };
    let m2 = model;
    let pose_case = Case {
        name: "pose_translation",
        op: Box::new(move |t, v| {
            let vars = m2.params.bind_frozen(t);
            let p = m2.pose.forward(t, &vars, v[0], v[1])?;
            let w = t.constant(Tensor::new(&[6], vec![0.0, 0.0, 0.0, 1.0, -0.5, 0.25])?);
            t.mul(p, w)
        }),
        inputs: vec![
            triplet.frames[1].reshape(&[1, 3, 16, 16])?,
            triplet.frames[2].reshape(&[1, 3, 16, 16])?,
        ],
        projection: Projection::Sum,
        max_coords: Some(24),
    };
    Ok(vec![loss_case, pose_case])
}

/// Names of the checks in a scope, in execution order.
pub fn case_names(scope: Scope) -> Vec<&'static str> {
    match scope {
        Scope::Ops => op_cases().iter().map(|c| c.name).collect(),
        Scope::Losses => loss_cases().iter().map(|c| c.name).collect(),
        Scope::E2e => vec!["l_final", "pose_translation"],
    }
}

/// Run every check in `scope`. `corrupt` names a tape op whose backward
/// pass is deliberately perturbed (negative control).
pub fn run_suite(scope: Scope, corrupt: Option<&str>) -> Result<Vec<CheckResult>> {
    let cases = match scope {
        Scope::Ops => op_cases(),
        Scope::Losses => loss_cases(),
        Scope::E2e => e2e_cases()?,
    };
    Ok(cases
        .into_iter()
        .map(|c| {
            let mut gc = GradCheck::default().with_projection(c.projection);
            gc.max_coords = c.max_coords;
            gc.corrupt_op = corrupt.map(str::to_string);
            let report = gc.run(&c.op, &c.inputs);
            CheckResult::new(c.name, report)
        })
        .collect())
}
