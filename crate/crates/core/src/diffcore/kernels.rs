//! Forward and backward kernels for the spatial operations.
//!
//! These work on raw tensors and carry no graph bookkeeping; [`super::Tape`]
//! wires them into the reverse pass.

use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let [batch, c_in, height, width] = match *x.shape() {
            [b, c, h, w] => [b, c, h, w],
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    shape: x.shape().to_vec(),
                    reason: "input must be [B, C, H, W]".into(),
                })
            }
        };
        let [c_out, wc_in, kh, kw] = match *w.shape() {
            [a, b, c, d] => [a, b, c, d],
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    shape: w.shape().to_vec(),
                    reason: "weights must be [Cout, Cin, k, k]".into(),
                })
            }
        };
        if wc_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        if b.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: w.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: w.shape().to_vec(),
                reason: "kernel must be square with odd extent".into(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        let extent = |n: usize| -> Result<usize> {
            let padded = n + 2 * padding;
            if padded < kh || !(padded - kh).is_multiple_of(stride) {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    shape: x.shape().to_vec(),
                    reason: format!(
                        "output extent ({n} + 2*{padding} - {kh}) / {stride} + 1 is not integral"
                    ),
                });
            }
            Ok((padded - kh) / stride + 1)
        };
        let out_h = extent(height)?;
        let out_w = extent(width)?;
        Ok(Self {
            batch,
            c_in,
            c_out,
            height,
            width,
            kernel: kh,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let plane = g.height * g.width;
    let npix = g.out_pixels();
    for ci in 0..g.c_in {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + ky as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        *out = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let plane = g.height * g.width;
    let npix = g.out_pixels();
    for ci in 0..g.c_in {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            drow[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, with optional transposes expressed
/// through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(x, w, b, stride, padding)?;
    let npix = g.out_pixels();
    let kdim = g.patch_len();
    let in_len = g.c_in * g.height * g.width;
    let out_len = g.c_out * npix;
    let mut out = vec![0.0; g.batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kdim * npix]
    };
    for bi in 0..g.batch {
        let xb = &x.data()[bi * in_len..(bi + 1) * in_len];
        let ob = &mut out[bi * out_len..(bi + 1) * out_len];
        for (co, chunk) in ob.chunks_mut(npix).enumerate() {
            chunk.fill(b.data()[co]);
        }
        let colref: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut cols);
            &cols
        };
        gemm(g.c_out, kdim, npix, w.data(), false, colref, false, 1.0, ob);
    }
    Ok(Tensor::from_parts(vec![g.batch, g.c_out, g.out_h, g.out_w], out))
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_input` is false.
pub fn conv2d_backward(
    grad: &Tensor,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = ConvGeometry::new(x, w, b, stride, padding)?;
    let npix = g.out_pixels();
    let kdim = g.patch_len();
    let in_len = g.c_in * g.height * g.width;
    let out_len = g.c_out * npix;
    let mut dw = vec![0.0; g.c_out * kdim];
    let mut db = vec![0.0; g.c_out];
    let mut dx = need_input.then(|| vec![0.0; x.len()]);
    let mut cols = vec![0.0; kdim * npix];
    for bi in 0..g.batch {
        let xb = &x.data()[bi * in_len..(bi + 1) * in_len];
        let gb = &grad.data()[bi * out_len..(bi + 1) * out_len];
        for (co, chunk) in gb.chunks(npix).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
        let colref: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut cols);
            &cols
        };
        // dW += dOut · colsᵀ
        gemm(g.c_out, npix, kdim, gb, false, colref, true, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[bi * in_len..(bi + 1) * in_len];
            if g.is_pointwise() {
                gemm(kdim, g.c_out, npix, w.data(), true, gb, false, 1.0, dxb);
            } else {
                gemm(kdim, g.c_out, npix, w.data(), true, gb, false, 0.0, &mut cols);
                col2im(&cols, &g, dxb);
            }
        }
    }
    Ok((
        dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(b.shape().to_vec(), db),
    ))
}

/// Source index pair and blend weight for one output coordinate under the
/// half-pixel (align-corners = false) convention.
fn upsample_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w1)
        })
        .collect()
}

pub fn upsample_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "upsample_bilinear: factor must be >= 1".into(),
        ));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let mut out = vec![0.0; b * c * oh * ow];
    for (plane, dst) in out.chunks_mut(oh * ow).enumerate() {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = r0[x0] * (1.0 - wx) + r0[x1] * wx;
                let bot = r1[x0] * (1.0 - wx) + r1[x1] * wx;
                dst[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok(Tensor::from_parts(shape, out))
}

pub fn upsample_backward(grad: &Tensor, x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(grad.clone());
    }
    let [_, _, h, w] = x.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let mut dx = vec![0.0; x.len()];
    for (plane, dst) in dx.chunks_mut(h * w).enumerate() {
        let g = &grad.data()[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                dst[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                dst[y0 * w + x1] += v * (1.0 - wy) * wx;
                dst[y1 * w + x0] += v * wy * (1.0 - wx);
                dst[y1 * w + x1] += v * wy * wx;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), dx))
}

struct SampleTap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    inside_u: bool,
    inside_v: bool,
}

fn sample_tap(u: f64, v: f64, h: usize, w: usize) -> SampleTap {
    let axis = |c: f64, n: usize| -> (usize, usize, f64, bool) {
        let hi = (n - 1) as f64;
        let inside = c.is_finite() && (0.0..=hi).contains(&c);
        let cc = if c.is_finite() { c.clamp(0.0, hi) } else { 0.0 };
        if n == 1 {
            return (0, 0, 0.0, inside);
        }
        let i0 = (cc.floor() as usize).min(n - 2);
        (i0, i0 + 1, cc - i0 as f64, inside)
    };
    let (x0, x1, wx, inside_u) = axis(u, w);
    let (y0, y1, wy, inside_v) = axis(v, h);
    SampleTap {
        x0,
        x1,
        y0,
        y1,
        wx,
        wy,
        inside_u,
        inside_v,
    }
}

fn grid_dims(img: &Tensor, grid: &Tensor) -> Result<([usize; 4], usize, usize)> {
    let dims = img.dims4()?;
    let (gb, gh, gw) = match *grid.shape() {
        [b, h, w, 2] => (b, h, w),
        [h, w, 2] => (1, h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "bilinear_sample",
                shape: grid.shape().to_vec(),
                reason: "grid must be [B, H, W, 2]".into(),
            })
        }
    };
    if gb != dims[0] {
        return Err(Error::ShapeMismatch {
            op: "bilinear_sample",
            left: img.shape().to_vec(),
            right: grid.shape().to_vec(),
        });
    }
    Ok((dims, gh, gw))
}

/// Bilinear lookup at continuous pixel coordinates `(u, v)`.
///
/// Returns the sampled image `[B, C, Hg, Wg]` and a `[B, 1, Hg, Wg]` mask that
/// is 1 where the coordinate fell inside `[0, W-1] × [0, H-1]`. Outside
/// coordinates are clamped to the border.
pub fn sample_forward(img: &Tensor, grid: &Tensor) -> Result<(Tensor, Tensor)> {
    let ([b, c, h, w], gh, gw) = grid_dims(img, grid)?;
    let npix = gh * gw;
    let mut out = vec![0.0; b * c * npix];
    let mut mask = vec![0.0; b * npix];
    for bi in 0..b {
        for p in 0..npix {
            let gi = (bi * npix + p) * 2;
            let tap = sample_tap(grid.data()[gi], grid.data()[gi + 1], h, w);
            if tap.inside_u && tap.inside_v {
                mask[bi * npix + p] = 1.0;
            }
            for ci in 0..c {
                let src = &img.data()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                let top = src[tap.y0 * w + tap.x0] * (1.0 - tap.wx) + src[tap.y0 * w + tap.x1] * tap.wx;
                let bot = src[tap.y1 * w + tap.x0] * (1.0 - tap.wx) + src[tap.y1 * w + tap.x1] * tap.wx;
                out[(bi * c + ci) * npix + p] = top * (1.0 - tap.wy) + bot * tap.wy;
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![b, c, gh, gw], out),
        Tensor::from_parts(vec![b, 1, gh, gw], mask),
    ))
}

/// Returns `(d_img, d_grid)`.
pub fn sample_backward(grad: &Tensor, img: &Tensor, grid: &Tensor) -> Result<(Tensor, Tensor)> {
    let ([b, c, h, w], gh, gw) = grid_dims(img, grid)?;
    let npix = gh * gw;
    let mut dimg = vec![0.0; img.len()];
    let mut dgrid = vec![0.0; grid.len()];
    for bi in 0..b {
        for p in 0..npix {
            let gi = (bi * npix + p) * 2;
            let tap = sample_tap(grid.data()[gi], grid.data()[gi + 1], h, w);
            let (mut du, mut dv) = (0.0, 0.0);
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let g = grad.data()[(bi * c + ci) * npix + p];
                if g == 0.0 {
                    continue;
                }
                let src = &img.data()[base..base + h * w];
                let (i00, i01) = (tap.y0 * w + tap.x0, tap.y0 * w + tap.x1);
                let (i10, i11) = (tap.y1 * w + tap.x0, tap.y1 * w + tap.x1);
                let dst = &mut dimg[base..base + h * w];
                dst[i00] += g * (1.0 - tap.wy) * (1.0 - tap.wx);
                dst[i01] += g * (1.0 - tap.wy) * tap.wx;
                dst[i10] += g * tap.wy * (1.0 - tap.wx);
                dst[i11] += g * tap.wy * tap.wx;
                du += g * ((1.0 - tap.wy) * (src[i01] - src[i00]) + tap.wy * (src[i11] - src[i10]));
                dv += g
                    * ((1.0 - tap.wx) * (src[i10] - src[i00]) + tap.wx * (src[i11] - src[i01]));
            }
            if tap.inside_u && w > 1 {
                dgrid[gi] = du;
            }
            if tap.inside_v && h > 1 {
                dgrid[gi + 1] = dv;
            }
        }
    }
    Ok((
        Tensor::from_parts(img.shape().to_vec(), dimg),
        Tensor::from_parts(grid.shape().to_vec(), dgrid),
    ))
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// 3×3 mean filter over the last two axes with reflection padding.
pub fn box3_forward(x: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = x.dims4()?;
    let mut out = vec![0.0; x.len()];
    for (plane, dst) in out.chunks_mut(h * w).enumerate() {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for dy in -1..=1isize {
                    let ry = reflect(y as isize + dy, h);
                    for dx in -1..=1isize {
                        acc += src[ry * w + reflect(xx as isize + dx, w)];
                    }
                }
                dst[y * w + xx] = acc / 9.0;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn box3_backward(grad: &Tensor, x: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = x.dims4()?;
    let mut dx = vec![0.0; x.len()];
    for (plane, dst) in dx.chunks_mut(h * w).enumerate() {
        let g = &grad.data()[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let v = g[y * w + xx] / 9.0;
                for dy in -1..=1isize {
                    let ry = reflect(y as isize + dy, h);
                    for ddx in -1..=1isize {
                        dst[ry * w + reflect(xx as isize + ddx, w)] += v;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), dx))
}

/// Mean over non-overlapping 2×2 blocks of the last two axes.
pub fn avgpool2_forward(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "avg_pool2",
            shape: x.shape().to_vec(),
            reason: "spatial extents must be even".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * oh * ow];
    for (plane, dst) in out.chunks_mut(oh * ow).enumerate() {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok(Tensor::from_parts(shape, out))
}

pub fn avgpool2_backward(grad: &Tensor, x: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; x.len()];
    for (plane, dst) in dx.chunks_mut(h * w).enumerate() {
        let g = &grad.data()[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = 0.25 * g[(y / 2) * ow + xx / 2];
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), dx))
}

/// Direct nested-loop cross-correlation used as an independent reference.
pub fn conv2d_reference(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(x, w, b, stride, padding)?;
    let k = g.kernel;
    let mut out = Tensor::zeros(&[g.batch, g.c_out, g.out_h, g.out_w]);
    for bi in 0..g.batch {
        for co in 0..g.c_out {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = b.data()[co];
                    for ci in 0..g.c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                acc += x.at(&[bi, ci, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    out.set(&[bi, co, oy, ox], acc);
                }
            }
        }
    }
    Ok(out)
}
