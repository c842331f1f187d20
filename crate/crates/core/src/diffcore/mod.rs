//! Tensors, the recording tape and the finite-difference oracle.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradCheck, GradReport, Projection};
pub use tape::{sigmoid, softmax_axis, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::Result;

/// Evaluate a tape computation once without keeping the graph.
pub fn eval<F>(inputs: &[&Tensor], f: F) -> Result<Tensor>
where
    F: FnOnce(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&tape, &vars)?;
    let v = tape.value(out).clone();
    Ok(v)
}

/// Pointwise helpers on plain tensors, routed through a throwaway tape.
pub mod ops {
    use super::{eval, kernels, Tensor};
    use crate::Result;

    pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        eval(&[a, b], |t, v| t.add(v[0], v[1]))
    }

    pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        eval(&[a, b], |t, v| t.sub(v[0], v[1]))
    }

    pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        eval(&[a, b], |t, v| t.mul(v[0], v[1]))
    }

    pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        eval(&[a, b], |t, v| t.div(v[0], v[1]))
    }

    pub fn minimum(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        eval(&[a, b], |t, v| t.minimum(v[0], v[1]))
    }

    pub fn maximum(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        eval(&[a, b], |t, v| t.maximum(v[0], v[1]))
    }

    pub fn abs(a: &Tensor) -> Result<Tensor> {
        eval(&[a], |t, v| t.abs(v[0]))
    }

    pub fn exp(a: &Tensor) -> Result<Tensor> {
        eval(&[a], |t, v| t.exp(v[0]))
    }

    pub fn log(a: &Tensor) -> Result<Tensor> {
        eval(&[a], |t, v| t.log(v[0]))
    }

    pub fn sigmoid(a: &Tensor) -> Tensor {
        a.map(super::sigmoid)
    }

    /// Per-pixel temperature softmax over the channel axis of `[N, H, W]` or
    /// `[B, N, H, W]`.
    pub fn softmax_tau(y: &Tensor, tau: f64) -> Result<Tensor> {
        let axis = if y.rank() == 4 { 1 } else { 0 };
        super::softmax_axis(y, axis, tau)
    }

    pub fn cumsum_channels(x: &Tensor) -> Result<Tensor> {
        eval(&[x], |t, v| t.cumsum(v[0], 0))
    }

    pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
        eval(&[x], |t, v| t.global_avg_pool(v[0]))
    }

    pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        kernels::conv2d_forward(x, w, b, stride, padding)
    }

    pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
        kernels::upsample_forward(x, factor)
    }

    /// Returns the sampled image and its validity mask.
    pub fn bilinear_sample(img: &Tensor, grid: &Tensor) -> Result<(Tensor, Tensor)> {
        kernels::sample_forward(img, grid)
    }
}
