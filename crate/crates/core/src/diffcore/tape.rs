use std::cell::{Ref, RefCell};

use super::kernels;
use super::Tensor;
use crate::geometry::CameraIntrinsics;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct BackwardCtx<'a> {
    grad: &'a Tensor,
    inputs: Vec<&'a Tensor>,
    output: &'a Tensor,
    needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>>>;

/// One recorded operation: its inputs, its output and the map from the
/// output cotangent to input cotangents.
struct GradRecord {
    op: &'static str,
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Reverse-mode recording of a computation over [`Tensor`] values.
///
/// A tape is built per forward pass and discarded afterwards. It is not
/// shared between threads; parallel callers build one tape each.
pub struct Tape {
    nodes: RefCell<Vec<GradRecord>>,
    corrupt: Option<String>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Cotangents produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Abs,
    Exp,
    Log,
    Sigmoid,
    Elu,
    Square,
    Sqrt,
}

/// For each element of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast to it. `None` when the shapes are identical.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Option<Vec<usize>> {
    if out_shape == in_shape {
        return None;
    }
    let r = out_shape.len();
    let offset = r - in_shape.len();
    let mut in_strides = vec![0usize; r];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[offset + i] = if in_shape[i] == 1 { 0 } else { acc };
        acc *= in_shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; r];
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        for d in (0..r).rev() {
            idx[d] += 1;
            cur += in_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= in_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::ShapeMismatch {
                op,
                left: a.to_vec(),
                right: b.to_vec(),
            });
        };
    }
    Ok(out)
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must lie in (0, 1], got {tau}"
        )));
    }
    Ok(())
}

/// Temperature softmax along `axis` with max subtraction.
pub fn softmax_axis(x: &Tensor, axis: usize, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    check_axis("softmax", x, axis)?;
    let (outer, n, inner) = axis_layout(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for j in 0..inner {
            let mut m = f64::NEG_INFINITY;
            for i in 0..n {
                m = m.max(src[base + i * inner + j]);
            }
            let mut z = 0.0;
            for i in 0..n {
                let e = ((src[base + i * inner + j] - m) / tau).exp();
                out[base + i * inner + j] = e;
                z += e;
            }
            for i in 0..n {
                out[base + i * inner + j] /= z;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            corrupt: None,
        }
    }

    /// Test hook: every backward pass of the named op has its input
    /// cotangents scaled by 1.5.
    pub fn with_corrupted_op(op: &str) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            corrupt: Some(op.to_string()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        op: &'static str,
        value: Tensor,
        inputs: Vec<Var>,
        backward: Option<BackwardFn>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = backward.is_some() && inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(GradRecord {
            op,
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(GradRecord {
            op: "leaf",
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var(nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(GradRecord {
            op: "constant",
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Detached copy of `v`.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Reverse pass seeded with a unit cotangent on the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let seed = {
            let nodes = self.nodes.borrow();
            Tensor::ones(nodes[output.0].value.shape())
        };
        self.backward_with(output, seed)
    }

    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if seed.shape() != nodes[output.0].value.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: nodes[output.0].value.shape().to_vec(),
                right: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.inputs.iter().map(|&i| &nodes[i].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|&i| nodes[i].requires_grad).collect(),
            };
            let mut input_grads = backward(&ctx)?;
            if self.corrupt.as_deref() == Some(node.op) {
                for g in input_grads.iter_mut().flatten() {
                    for v in g.data_mut() {
                        *v *= 1.5;
                    }
                }
            }
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[input].value.shape(), "{}", node.op);
                match grads[input].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[input] = Some(g),
                }
            }
            // keep the cotangent of leaves and inputs around for callers
            if node.inputs.is_empty() {
                grads[id] = Some(grad);
            }
        }
        Ok(Gradients { grads })
    }

    // ---------------------------------------------------------------
    // pointwise
    // ---------------------------------------------------------------

    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let op = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Min => "min",
            Binary::Max => "max",
        };
        let (value, out_shape, sa, sb) = {
            let ta = self.value(a);
            let tb = self.value(b);
            let out_shape = broadcast_shape(op, ta.shape(), tb.shape())?;
            let ma = broadcast_map(&out_shape, ta.shape());
            let mb = broadcast_map(&out_shape, tb.shape());
            let n: usize = out_shape.iter().product();
            let (da, db) = (ta.data(), tb.data());
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let x = da[ma.as_ref().map_or(i, |m| m[i])];
                let y = db[mb.as_ref().map_or(i, |m| m[i])];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => {
                        if y == 0.0 {
                            return Err(Error::DivisionByZero { op });
                        }
                        x / y
                    }
                    Binary::Min => x.min(y),
                    Binary::Max => x.max(y),
                });
            }
            (
                Tensor::from_parts(out_shape.clone(), out),
                out_shape,
                ta.shape().to_vec(),
                tb.shape().to_vec(),
            )
        };
        let backward: BackwardFn = Box::new(move |ctx| {
            let (ta, tb) = (ctx.inputs[0], ctx.inputs[1]);
            let ma = broadcast_map(&out_shape, &sa);
            let mb = broadcast_map(&out_shape, &sb);
            let mut ga = vec![0.0; ta.len()];
            let mut gb = vec![0.0; tb.len()];
            let g = ctx.grad.data();
            for (i, &gi) in g.iter().enumerate() {
                let ia = ma.as_ref().map_or(i, |m| m[i]);
                let ib = mb.as_ref().map_or(i, |m| m[i]);
                let (x, y) = (ta.data()[ia], tb.data()[ib]);
                let (dx, dy) = match kind {
                    Binary::Add => (1.0, 1.0),
                    Binary::Sub => (1.0, -1.0),
                    Binary::Mul => (y, x),
                    Binary::Div => (1.0 / y, -x / (y * y)),
                    Binary::Min => {
                        if x <= y {
                            (1.0, 0.0)
                        } else {
                            (0.0, 1.0)
                        }
                    }
                    Binary::Max => {
                        if x >= y {
                            (1.0, 0.0)
                        } else {
                            (0.0, 1.0)
                        }
                    }
                };
                ga[ia] += gi * dx;
                gb[ib] += gi * dy;
            }
            Ok(vec![
                ctx.needs[0].then(|| Tensor::from_parts(sa.clone(), ga)),
                ctx.needs[1].then(|| Tensor::from_parts(sb.clone(), gb)),
            ])
        });
        self.push(op, value, vec![a, b], Some(backward))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn minimum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    /// `scale * x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        let backward: BackwardFn =
            Box::new(move |ctx| Ok(vec![Some(ctx.grad.map(|g| g * scale))]));
        self.push("affine", value, vec![x], Some(backward))
    }

    pub fn scale(&self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, 1.0, c)
    }

    /// `c / x`.
    pub fn scalar_div(&self, c: f64, x: Var) -> Result<Var> {
        let value = {
            let t = self.value(x);
            if t.data().contains(&0.0) {
                return Err(Error::DivisionByZero { op: "scalar_div" });
            }
            t.map(|v| c / v)
        };
        let backward: BackwardFn = Box::new(move |ctx| {
            let x = ctx.inputs[0].data();
            let g = ctx.grad.data();
            let d = g.iter().zip(x).map(|(&g, &x)| -g * c / (x * x)).collect();
            Ok(vec![Some(Tensor::from_parts(ctx.grad.shape().to_vec(), d))])
        });
        self.push("scalar_div", value, vec![x], Some(backward))
    }

    fn unary(&self, kind: Unary, x: Var) -> Result<Var> {
        let op = match kind {
            Unary::Abs => "abs",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sigmoid => "sigmoid",
            Unary::Elu => "elu",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
        };
        let value = {
            let t = self.value(x);
            if matches!(kind, Unary::Log | Unary::Sqrt) && t.data().iter().any(|&v| v <= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{op}: argument must be positive"
                )));
            }
            t.map(|v| match kind {
                Unary::Abs => v.abs(),
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
                Unary::Sigmoid => sigmoid(v),
                Unary::Elu => {
                    if v > 0.0 {
                        v
                    } else {
                        v.exp_m1()
                    }
                }
                Unary::Square => v * v,
                Unary::Sqrt => v.sqrt(),
            })
        };
        let backward: BackwardFn = Box::new(move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            let d = ctx
                .grad
                .data()
                .iter()
                .enumerate()
                .map(|(i, &g)| {
                    let dydx = match kind {
                        Unary::Abs => {
                            if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Exp => y[i],
                        Unary::Log => 1.0 / x[i],
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Elu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                y[i] + 1.0
                            }
                        }
                        Unary::Square => 2.0 * x[i],
                        Unary::Sqrt => 0.5 / y[i],
                    };
                    g * dydx
                })
                .collect();
            Ok(vec![Some(Tensor::from_parts(ctx.grad.shape().to_vec(), d))])
        });
        self.push(op, value, vec![x], Some(backward))
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn elu(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Elu, x)
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    // ---------------------------------------------------------------
    // reductions and layout
    // ---------------------------------------------------------------

    pub fn sum(&self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let backward: BackwardFn = Box::new(|ctx| {
            let g = ctx.grad.item();
            Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), g))])
        });
        self.push("sum", value, vec![x], Some(backward))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it as an extent-1 dimension.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let t = self.value(x);
            check_axis("sum_axis", &t, axis)?;
            let (outer, n, inner) = axis_layout(t.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..n {
                    let src = &t.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = 1;
            Tensor::from_parts(shape, out)
        };
        let backward: BackwardFn = Box::new(move |ctx| {
            let x = ctx.inputs[0];
            let (outer, n, inner) = axis_layout(x.shape(), axis);
            let mut d = vec![0.0; x.len()];
            for o in 0..outer {
                let g = &ctx.grad.data()[o * inner..(o + 1) * inner];
                for i in 0..n {
                    d[(o * n + i) * inner..(o * n + i + 1) * inner].copy_from_slice(g);
                }
            }
            Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), d))])
        });
        self.push("sum_axis", value, vec![x], Some(backward))
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let n = {
            let t = self.value(x);
            check_axis("mean_axis", &t, axis)?;
            t.shape()[axis] as f64
        };
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n)
    }

    /// `[B, N, H, W] → [B, N, 1, 1]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let value = {
            let t = self.value(x);
            let [b, n, h, w] = match *t.shape() {
                [b, n, h, w] => [b, n, h, w],
                _ => {
                    return Err(Error::InvalidShape {
                        op: "global_avg_pool",
                        shape: t.shape().to_vec(),
                        reason: "expected [B, N, H, W]".into(),
                    })
                }
            };
            let hw = (h * w) as f64;
            let out = t.data().chunks(h * w).map(|c| c.iter().sum::<f64>() / hw).collect();
            Tensor::from_parts(vec![b, n, 1, 1], out)
        };
        let backward: BackwardFn = Box::new(|ctx| {
            let x = ctx.inputs[0];
            let [_, _, h, w] = x.dims4()?;
            let hw = (h * w) as f64;
            let mut d = Vec::with_capacity(x.len());
            for &g in ctx.grad.data() {
                d.extend(std::iter::repeat_n(g / hw, h * w));
            }
            Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), d))])
        });
        self.push("global_avg_pool", value, vec![x], Some(backward))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let backward: BackwardFn = Box::new(|ctx| {
            Ok(vec![Some(ctx.grad.reshape(ctx.inputs[0].shape())?)])
        });
        self.push("reshape", value, vec![x], Some(backward))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let (value, sizes) = {
            let ts: Vec<Ref<'_, Tensor>> = xs.iter().map(|&v| self.value(v)).collect();
            let first = ts.first().ok_or_else(|| {
                Error::InvalidArgument("concat: at least one input required".into())
            })?;
            check_axis("concat", first, axis)?;
            let mut shape = first.shape().to_vec();
            let mut sizes = Vec::new();
            shape[axis] = 0;
            for t in &ts {
                let mut a = t.shape().to_vec();
                let mut b = first.shape().to_vec();
                if a.len() != b.len() {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        left: b,
                        right: a,
                    });
                }
                sizes.push(a[axis]);
                shape[axis] += a[axis];
                a[axis] = 0;
                b[axis] = 0;
                if a != b {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        left: first.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for (t, &n) in ts.iter().zip(&sizes) {
                    out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
                }
            }
            (Tensor::from_parts(shape, out), sizes)
        };
        let backward: BackwardFn = Box::new(move |ctx| {
            let shape = ctx.grad.shape();
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[axis];
            let mut result = Vec::new();
            let mut start = 0;
            for (k, &n) in sizes.iter().enumerate() {
                if !ctx.needs[k] {
                    result.push(None);
                    start += n;
                    continue;
                }
                let mut d = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    d.extend_from_slice(&ctx.grad.data()[base..base + n * inner]);
                }
                result.push(Some(Tensor::from_parts(ctx.inputs[k].shape().to_vec(), d)));
                start += n;
            }
            Ok(result)
        });
        self.push("concat", value, xs.to_vec(), Some(backward))
    }

    /// Forward difference `x[i+1] - x[i]` along `axis`.
    pub fn diff(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let t = self.value(x);
            check_axis("diff", &t, axis)?;
            let (outer, n, inner) = axis_layout(t.shape(), axis);
            if n < 2 {
                return Err(Error::InvalidShape {
                    op: "diff",
                    shape: t.shape().to_vec(),
                    reason: format!("axis {axis} needs extent >= 2"),
                });
            }
            let mut out = Vec::with_capacity(outer * (n - 1) * inner);
            for o in 0..outer {
                for i in 0..n - 1 {
                    let a = &t.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                    let b = &t.data()[(o * n + i + 1) * inner..(o * n + i + 2) * inner];
                    out.extend(a.iter().zip(b).map(|(a, b)| b - a));
                }
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = n - 1;
            Tensor::from_parts(shape, out)
        };
        let backward: BackwardFn = Box::new(move |ctx| {
            let x = ctx.inputs[0];
            let (outer, n, inner) = axis_layout(x.shape(), axis);
            let mut d = vec![0.0; x.len()];
            let g = ctx.grad.data();
            for o in 0..outer {
                for i in 0..n - 1 {
                    for j in 0..inner {
                        let gv = g[(o * (n - 1) + i) * inner + j];
                        d[(o * n + i) * inner + j] -= gv;
                        d[(o * n + i + 1) * inner + j] += gv;
                    }
                }
            }
            Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), d))])
        });
        self.push("diff", value, vec![x], Some(backward))
    }

    // ---------------------------------------------------------------
    // distributions over an axis
    // ---------------------------------------------------------------

    /// Temperature-scaled softmax along `axis` (`tau` in `(0, 1]`).
    pub fn softmax(&self, x: Var, axis: usize, tau: f64) -> Result<Var> {
        let value = softmax_axis(&self.value(x), axis, tau)?;
        let backward: BackwardFn = Box::new(move |ctx| {
            let p = ctx.output;
            let (outer, n, inner) = axis_layout(p.shape(), axis);
            let (pd, g) = (p.data(), ctx.grad.data());
            let mut d = vec![0.0; p.len()];
            for o in 0..outer {
                let base = o * n * inner;
                for j in 0..inner {
                    let mut dot = 0.0;
                    for i in 0..n {
                        let k = base + i * inner + j;
                        dot += pd[k] * g[k];
                    }
                    for i in 0..n {
                        let k = base + i * inner + j;
                        d[k] = pd[k] * (g[k] - dot) / tau;
                    }
                }
            }
            Ok(vec![Some(Tensor::from_parts(p.shape().to_vec(), d))])
        });
        self.push("softmax", value, vec![x], Some(backward))
    }

    /// Inclusive prefix sum along `axis`.
    pub fn cumsum(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let t = self.value(x);
            check_axis("cumsum", &t, axis)?;
            let (outer, n, inner) = axis_layout(t.shape(), axis);
            let mut out = t.data().to_vec();
            for o in 0..outer {
                for i in 1..n {
                    for j in 0..inner {
                        out[(o * n + i) * inner + j] += out[(o * n + i - 1) * inner + j];
                    }
                }
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        };
        let backward: BackwardFn = Box::new(move |ctx| {
            let (outer, n, inner) = axis_layout(ctx.grad.shape(), axis);
            let mut d = ctx.grad.data().to_vec();
            for o in 0..outer {
                for i in (0..n - 1).rev() {
                    for j in 0..inner {
                        d[(o * n + i) * inner + j] += d[(o * n + i + 1) * inner + j];
                    }
                }
            }
            Ok(vec![Some(Tensor::from_parts(ctx.grad.shape().to_vec(), d))])
        });
        self.push("cumsum", value, vec![x], Some(backward))
    }

    /// Divide every slice along `axis` by its last element.
    pub fn normalize_by_last(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let t = self.value(x);
            check_axis("normalize_by_last", &t, axis)?;
            let (outer, n, inner) = axis_layout(t.shape(), axis);
            let mut out = t.data().to_vec();
            for o in 0..outer {
                for j in 0..inner {
                    let last = t.data()[(o * n + n - 1) * inner + j];
                    if last == 0.0 {
                        return Err(Error::DivisionByZero {
                            op: "normalize_by_last",
                        });
                    }
                    for i in 0..n {
                        out[(o * n + i) * inner + j] /= last;
                    }
                }
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        };
        let backward: BackwardFn = Box::new(move |ctx| {
            let x = ctx.inputs[0];
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let (outer, n, inner) = axis_layout(x.shape(), axis);
            let mut d = vec![0.0; x.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let li = (o * n + n - 1) * inner + j;
                    let last = x.data()[li];
                    let mut acc = 0.0;
                    for i in 0..n {
                        let k = (o * n + i) * inner + j;
                        d[k] += g[k] / last;
                        acc += g[k] * y[k];
                    }
                    d[li] -= acc / last;
                }
            }
            Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), d))])
        });
        self.push("normalize_by_last", value, vec![x], Some(backward))
    }

    // ---------------------------------------------------------------
    // spatial
    // ---------------------------------------------------------------

    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let value = kernels::conv2d_forward(&self.value(x), &self.value(w), &self.value(b), stride, padding)?;
        let backward: BackwardFn = Box::new(move |ctx| {
            let (dx, dw, db) = kernels::conv2d_backward(
                ctx.grad,
                ctx.inputs[0],
                ctx.inputs[1],
                ctx.inputs[2],
                stride,
                padding,
                ctx.needs[0],
            )?;
            Ok(vec![dx, Some(dw), Some(db)])
        });
        self.push("conv2d", value, vec![x, w, b], Some(backward))
    }

    pub fn upsample_bilinear(&self, x: Var, factor: usize) -> Result<Var> {
        let value = kernels::upsample_forward(&self.value(x), factor)?;
        let backward: BackwardFn = Box::new(move |ctx| {
            Ok(vec![Some(kernels::upsample_backward(ctx.grad, ctx.inputs[0], factor)?)])
        });
        self.push("upsample_bilinear", value, vec![x], Some(backward))
    }

    /// Bilinear lookup of `img` at `grid` pixel coordinates; also returns the
    /// in-bounds mask (not differentiable).
    pub fn bilinear_sample(&self, img: Var, grid: Var) -> Result<(Var, Tensor)> {
        let (value, mask) = kernels::sample_forward(&self.value(img), &self.value(grid))?;
        let backward: BackwardFn = Box::new(|ctx| {
            let (di, dg) = kernels::sample_backward(ctx.grad, ctx.inputs[0], ctx.inputs[1])?;
            Ok(vec![ctx.needs[0].then_some(di), ctx.needs[1].then_some(dg)])
        });
        let out = self.push("bilinear_sample", value, vec![img, grid], Some(backward))?;
        Ok((out, mask))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let value = kernels::avgpool2_forward(&self.value(x))?;
        let backward: BackwardFn = Box::new(|ctx| {
            Ok(vec![Some(kernels::avgpool2_backward(ctx.grad, ctx.inputs[0])?)])
        });
        self.push("avg_pool2", value, vec![x], Some(backward))
    }

    /// 3×3 mean filter with reflection padding.
    pub fn box_filter3(&self, x: Var) -> Result<Var> {
        let value = kernels::box3_forward(&self.value(x))?;
        let backward: BackwardFn = Box::new(|ctx| {
            Ok(vec![Some(kernels::box3_backward(ctx.grad, ctx.inputs[0])?)])
        });
        self.push("box_filter3", value, vec![x], Some(backward))
    }

    // ---------------------------------------------------------------
    // rigid motion
    // ---------------------------------------------------------------

    /// `[6]` axis-angle + translation → `[3, 4]` matrix `[R | t]`.
    pub fn pose_matrix(&self, v: Var) -> Result<Var> {
        let value = {
            let t = self.value(v);
            if t.shape() != [6] {
                return Err(Error::InvalidShape {
                    op: "pose_matrix",
                    shape: t.shape().to_vec(),
                    reason: "expected a 6-vector".into(),
                });
            }
            let d = t.data();
            let r = crate::geometry::rodrigues([d[0], d[1], d[2]]);
            let mut out = Vec::with_capacity(12);
            for i in 0..3 {
                out.extend_from_slice(&r[i]);
                out.push(d[3 + i]);
            }
            Tensor::from_parts(vec![3, 4], out)
        };
        let backward: BackwardFn = Box::new(|ctx| {
            let d = ctx.inputs[0].data();
            let g = ctx.grad.data();
            let jac = crate::geometry::rodrigues_jacobian([d[0], d[1], d[2]]);
            let mut out = vec![0.0; 6];
            for (k, jk) in jac.iter().enumerate() {
                let mut acc = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        acc += g[i * 4 + j] * jk[i][j];
                    }
                }
                out[k] = acc;
            }
            for i in 0..3 {
                out[3 + i] = g[i * 4 + 3];
            }
            Ok(vec![Some(Tensor::from_parts(vec![6], out))])
        });
        self.push("pose_matrix", value, vec![v], Some(backward))
    }

    /// Inverse of a rigid `[3, 4]` transform: `[Rᵀ | -Rᵀ t]`.
    pub fn se3_inverse(&self, p: Var) -> Result<Var> {
        let value = {
            let t = self.value(p);
            if t.shape() != [3, 4] {
                return Err(Error::InvalidShape {
                    op: "se3_inverse",
                    shape: t.shape().to_vec(),
                    reason: "expected [3, 4]".into(),
                });
            }
            let m = t.data();
            let mut out = vec![0.0; 12];
            for i in 0..3 {
                let mut ti = 0.0;
                for j in 0..3 {
                    out[i * 4 + j] = m[j * 4 + i];
                    ti -= m[j * 4 + i] * m[j * 4 + 3];
                }
                out[i * 4 + 3] = ti;
            }
            Tensor::from_parts(vec![3, 4], out)
        };
        let backward: BackwardFn = Box::new(|ctx| {
            let m = ctx.inputs[0].data();
            let g = ctx.grad.data();
            let mut d = vec![0.0; 12];
            for i in 0..3 {
                for j in 0..3 {
                    // out[i][j] = R[j][i]
                    d[j * 4 + i] += g[i * 4 + j];
                    // out[i][3] = -Σ_j R[j][i] t[j]
                    d[j * 4 + i] -= g[i * 4 + 3] * m[j * 4 + 3];
                    d[j * 4 + 3] -= g[i * 4 + 3] * m[j * 4 + i];
                }
            }
            Ok(vec![Some(Tensor::from_parts(vec![3, 4], d))])
        });
        self.push("se3_inverse", value, vec![p], Some(backward))
    }

    /// Source-frame pixel coordinates for every target pixel given its depth
    /// and the target→source transform. Returns `([1, H, W, 2], valid)` where
    /// `valid` is `[1, 1, H, W]` and zero for points at or behind the source
    /// camera.
    pub fn sample_grid(&self, depth: Var, pose: Var, k: CameraIntrinsics) -> Result<(Var, Tensor)> {
        let (value, valid) = {
            let d = self.value(depth);
            let p = self.value(pose);
            crate::geometry::grid_forward(&d, &p, &k)?
        };
        let backward: BackwardFn = Box::new(move |ctx| {
            let (dd, dp) = crate::geometry::grid_backward(ctx.grad, ctx.inputs[0], ctx.inputs[1], &k)?;
            Ok(vec![Some(dd), Some(dp)])
        });
        let out = self.push("sample_grid", value, vec![depth, pose], Some(backward))?;
        Ok((out, valid))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_trailing_and_leading() {
        let m = broadcast_map(&[2, 3], &[3]).unwrap();
        assert_eq!(m, vec![0, 1, 2, 0, 1, 2]);
        let m = broadcast_map(&[2, 3], &[2, 1]).unwrap();
        assert_eq!(m, vec![0, 0, 0, 1, 1, 1]);
        let m = broadcast_map(&[2, 2], &[]).unwrap();
        assert_eq!(m, vec![0, 0, 0, 0]);
        assert!(broadcast_map(&[2], &[2]).is_none());
    }

    #[test]
    fn incompatible_shapes_report_both() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_accumulates_over_reuse() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(2.0));
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 2.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1e308));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
    }
}
