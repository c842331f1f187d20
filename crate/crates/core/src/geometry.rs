//! Pinhole camera, rigid motion and the differentiable inverse warp.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Points with a source-camera depth at or below this are treated as behind
/// the camera.
pub const MIN_VIEW_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "intrinsics need finite values and positive focal lengths: {self:?}"
            )));
        }
        Ok(())
    }

    /// Intrinsics for the image resized by `s` (e.g. `0.5` for half size),
    /// under the pixel-center convention.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: (self.cx + 0.5) * s - 0.5,
            cy: (self.cy + 0.5) * s - 0.5,
        }
    }

    /// Intrinsics after mirroring an image of the given width.
    pub fn flipped(&self, width: usize) -> Self {
        Self {
            cx: (width - 1) as f64 - self.cx,
            ..*self
        }
    }
}

/// Axis-angle rotation plus translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self {
            axis_angle: [0.0; 3],
            translation: t,
        }
    }

    pub fn from_vector(v: &[f64]) -> Result<Self> {
        if v.len() != 6 {
            return Err(Error::InvalidArgument(format!(
                "pose vector needs 6 entries, got {}",
                v.len()
            )));
        }
        Ok(Self {
            axis_angle: [v[0], v[1], v[2]],
            translation: [v[3], v[4], v[5]],
        })
    }

    pub fn to_vector(&self) -> [f64; 6] {
        let (w, t) = (self.axis_angle, self.translation);
        [w[0], w[1], w[2], t[0], t[1], t[2]]
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        rodrigues(self.axis_angle)
    }

    pub fn matrix(&self) -> [[f64; 4]; 4] {
        se3_exp(self.axis_angle, self.translation)
    }

    /// `[R | t]` as a `[3, 4]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let m = self.matrix();
        Tensor::from_fn(&[3, 4], |i| m[i / 4][i % 4])
    }
}

fn skew(w: [f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Rotation matrix of an axis-angle vector.
pub fn rodrigues(w: [f64; 3]) -> [[f64; 3]; 3] {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-6 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew(w);
    let k2 = matmul3(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// `∂R/∂w_k` for k = 0, 1, 2.
pub fn rodrigues_jacobian(w: [f64; 3]) -> [[[f64; 3]; 3]; 3] {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let theta = theta2.sqrt();
    // a = sinθ/θ, b = (1-cosθ)/θ², da = (da/dθ)/θ, db = (db/dθ)/θ
    let (a, b, da, db) = if theta < 1e-2 {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            -1.0 / 3.0 + theta2 / 30.0 - theta2 * theta2 / 840.0,
            -1.0 / 12.0 + theta2 / 180.0 - theta2 * theta2 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            s / theta,
            (1.0 - c) / theta2,
            (theta * c - s) / (theta2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (theta2 * theta2),
        )
    };
    let k = skew(w);
    let k2 = matmul3(&k, &k);
    let mut out = [[[0.0; 3]; 3]; 3];
    for (axis, o) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[axis] = 1.0;
        let kk = skew(e);
        let kk_k = matmul3(&kk, &k);
        let k_kk = matmul3(&k, &kk);
        for i in 0..3 {
            for j in 0..3 {
                o[i][j] = da * w[axis] * k[i][j]
                    + a * kk[i][j]
                    + db * w[axis] * k2[i][j]
                    + b * (kk_k[i][j] + k_kk[i][j]);
            }
        }
    }
    out
}

/// Homogeneous 4×4 transform from axis-angle rotation and translation.
pub fn se3_exp(axis_angle: [f64; 3], translation: [f64; 3]) -> [[f64; 4]; 4] {
    let r = rodrigues(axis_angle);
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&r[i]);
        m[i][3] = translation[i];
    }
    m[3][3] = 1.0;
    m
}

fn image_hw(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let r = t.rank();
    if r < 2 {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected at least [H, W]".into(),
        });
    }
    let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
    if h * w != t.len() {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected a single-channel map".into(),
        });
    }
    Ok((h, w))
}

fn pose_rows(pose: &Tensor) -> Result<([[f64; 3]; 3], [f64; 3])> {
    if pose.shape() != [3, 4] {
        return Err(Error::InvalidShape {
            op: "sample_grid",
            shape: pose.shape().to_vec(),
            reason: "pose must be [3, 4]".into(),
        });
    }
    let m = pose.data();
    let mut r = [[0.0; 3]; 3];
    let mut t = [0.0; 3];
    for i in 0..3 {
        r[i] = [m[i * 4], m[i * 4 + 1], m[i * 4 + 2]];
        t[i] = m[i * 4 + 3];
    }
    Ok((r, t))
}

struct Projected {
    ray: [f64; 3],
    q: [f64; 3],
    valid: bool,
}

fn project(u: f64, v: f64, d: f64, r: &[[f64; 3]; 3], t: &[f64; 3], k: &CameraIntrinsics) -> Projected {
    let ray = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
    let p = [d * ray[0], d * ray[1], d];
    let mut q = [0.0; 3];
    for i in 0..3 {
        q[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i];
    }
    Projected {
        ray,
        q,
        valid: q[2] > MIN_VIEW_DEPTH && d.is_finite(),
    }
}

pub(crate) fn grid_forward(depth: &Tensor, pose: &Tensor, k: &CameraIntrinsics) -> Result<(Tensor, Tensor)> {
    let (h, w) = image_hw("sample_grid", depth)?;
    let (r, t) = pose_rows(pose)?;
    let mut grid = vec![0.0; h * w * 2];
    let mut valid = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (u, v) = (x as f64, y as f64);
            let pr = project(u, v, depth.data()[i], &r, &t, k);
            if pr.valid {
                // written as an offset from (u, v) so the identity transform
                // reproduces pixel coordinates bit for bit
                let q = pr.q;
                grid[2 * i] = u + k.fx * (q[0] - pr.ray[0] * q[2]) / q[2];
                grid[2 * i + 1] = v + k.fy * (q[1] - pr.ray[1] * q[2]) / q[2];
                valid[i] = 1.0;
            } else {
                grid[2 * i] = -1.0;
                grid[2 * i + 1] = -1.0;
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![1, h, w, 2], grid),
        Tensor::from_parts(vec![1, 1, h, w], valid),
    ))
}

pub(crate) fn grid_backward(
    grad: &Tensor,
    depth: &Tensor,
    pose: &Tensor,
    k: &CameraIntrinsics,
) -> Result<(Tensor, Tensor)> {
    let (h, w) = image_hw("sample_grid", depth)?;
    let (r, t) = pose_rows(pose)?;
    let mut dd = vec![0.0; h * w];
    let mut dp = vec![0.0; 12];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = depth.data()[i];
            let pr = project(x as f64, y as f64, d, &r, &t, k);
            if !pr.valid {
                continue;
            }
            let q = pr.q;
            let (gu, gv) = (grad.data()[2 * i], grad.data()[2 * i + 1]);
            let iz = 1.0 / q[2];
            let gq = [
                gu * k.fx * iz,
                gv * k.fy * iz,
                -(gu * k.fx * q[0] + gv * k.fy * q[1]) * iz * iz,
            ];
            let p = [d * pr.ray[0], d * pr.ray[1], d];
            for a in 0..3 {
                for b in 0..3 {
                    dp[a * 4 + b] += gq[a] * p[b];
                    dd[i] += gq[a] * r[a][b] * pr.ray[b];
                }
                dp[a * 4 + 3] += gq[a];
            }
        }
    }
    Ok((
        Tensor::from_parts(depth.shape().to_vec(), dd),
        Tensor::from_parts(vec![3, 4], dp),
    ))
}

/// Continuous source-image coordinates `[H, W, 2]` of every target pixel,
/// plus an `[H, W]` mask that is zero where the point lands behind the
/// source camera.
pub fn compute_sample_grid(depth: &Tensor, pose: &PoseSE3, k: &CameraIntrinsics) -> Result<(Tensor, Tensor)> {
    let (h, w) = image_hw("compute_sample_grid", depth)?;
    if depth.data().iter().any(|&d| !(d > 0.0)) {
        return Err(Error::InvalidArgument("depth must be positive everywhere".into()));
    }
    let (g, m) = grid_forward(depth, &pose.to_tensor(), k)?;
    Ok((g.reshape(&[h, w, 2])?, m.reshape(&[h, w])?))
}

/// Reconstruct the target view from `src` `[C, H, W]` using target depth and
/// the target→source motion. The mask is 1 where the sample was in view.
pub fn inverse_warp(
    src: &Tensor,
    depth: &Tensor,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
) -> Result<(Tensor, Tensor)> {
    let [_, c, h, w] = src.dims4()?;
    if image_hw("inverse_warp", depth)? != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "inverse_warp",
            left: src.shape().to_vec(),
            right: depth.shape().to_vec(),
        });
    }
    let tape = Tape::new();
    let s = tape.constant(src.reshape(&[1, c, h, w])?);
    let d = tape.constant(depth.clone());
    let p = tape.constant(pose.to_tensor());
    let (out, mask) = warp(&tape, s, d, p, k)?;
    let out = tape.value(out).reshape(src.shape())?;
    Ok((out, mask.reshape(&[h, w])?))
}

/// Tape form of [`inverse_warp`] with `pose` a `[3, 4]` target→source
/// transform; the returned mask combines in-view and in-bounds tests.
pub fn warp(tape: &Tape, src: Var, depth: Var, pose: Var, k: &CameraIntrinsics) -> Result<(Var, Tensor)> {
    let (grid, valid) = tape.sample_grid(depth, pose, *k)?;
    let (out, inside) = tape.bilinear_sample(src, grid)?;
    let mask = Tensor::from_fn(valid.shape(), |i| valid.data()[i] * inside.data()[i]);
    Ok((out, mask))
}

/// Mapping between normalized disparity in `[0, 1]` and metric depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self {
            min_depth: 0.1,
            max_depth: 100.0,
        }
    }
}

impl DepthRange {
    /// `(a, b)` with `depth = 1 / (a * disp + b)`.
    pub fn coefficients(&self) -> (f64, f64) {
        let lo = 1.0 / self.max_depth;
        let hi = 1.0 / self.min_depth;
        (hi - lo, lo)
    }

    pub fn to_depth(&self, disp: f64) -> f64 {
        let (a, b) = self.coefficients();
        1.0 / (a * disp + b)
    }

    pub fn to_disparity(&self, depth: f64) -> f64 {
        let (a, b) = self.coefficients();
        (1.0 / depth - b) / a
    }

    pub fn depth_map(&self, disp: &Tensor) -> Tensor {
        disp.map(|d| self.to_depth(d))
    }

    pub fn depth_on_tape(&self, tape: &Tape, disp: Var) -> Result<Var> {
        let (a, b) = self.coefficients();
        let scaled = tape.affine(disp, a, b)?;
        tape.scalar_div(1.0, scaled)
    }
}
