//! Differentiable tensor operations with hand-written backward passes.
//!
//! Every forward function is pure. Backward functions take the forward inputs
//! (or outputs, where cheaper) plus the upstream gradient and return input
//! gradients. Summation order is fixed so results are bitwise reproducible.

use crate::error::{dim_err, CacError, Result};
use crate::tensor::{PaddingMode, Tensor};

/// `out (m×n) (+)= a (m×k) · b (k×n)`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out (m×n) (+)= a (m×k) · bᵀ` with `b` stored `n×k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out (m×n) (+)= aᵀ · b` with `a` stored `k×m` and `b` stored `k×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for t in 0..k {
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let av = a[t * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return dim_err("matmul", a.shape(), b.shape());
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(&[m, n], out)
}

/// Returns `(dA, dB)` for `C = A·B` given `dC`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    if grad_out.shape() != [m, n] {
        return dim_err("matmul_backward", grad_out.shape(), &[m, n]);
    }
    let mut ga = vec![0.0; m * k];
    gemm_nt(grad_out.data(), b.data(), m, n, k, &mut ga);
    let mut gb = vec![0.0; k * n];
    gemm_tn(a.data(), grad_out.data(), k, m, n, &mut gb);
    Ok((Tensor::new(&[m, k], ga)?, Tensor::new(&[k, n], gb)?))
}

/// 1×1 convolution: a per-position linear map across channels.
/// `weight` is `c_out × c_in`, `bias` has `c_out` entries.
pub fn conv2d_pointwise(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (nb, cin, h, w) = x.dims4()?;
    let (cout, wcin) = weight.dims2()?;
    if wcin != cin {
        return dim_err("conv2d_pointwise", x.shape(), weight.shape());
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return dim_err("conv2d_pointwise bias", b.shape(), &[cout]);
        }
    }
    let hw = h * w;
    let mut out = vec![0.0; nb * cout * hw];
    for bi in 0..nb {
        let o = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        gemm_nn(
            weight.data(),
            &x.data()[bi * cin * hw..(bi + 1) * cin * hw],
            cout,
            cin,
            hw,
            o,
        );
    }
    Tensor::new(&[nb, cout, h, w], out)
}

/// Gradients of [`conv2d_pointwise`]: `(dX, dW, dBias)`; `dBias` only when `with_bias`.
pub fn conv2d_pointwise_backward(
    x: &Tensor,
    weight: &Tensor,
    with_bias: bool,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (nb, cin, h, w) = x.dims4()?;
    let (cout, _) = weight.dims2()?;
    if grad_out.shape() != [nb, cout, h, w] {
        return dim_err("conv2d_pointwise_backward", grad_out.shape(), &[nb, cout, h, w]);
    }
    let hw = h * w;
    let mut gx = vec![0.0; nb * cin * hw];
    let mut gw = vec![0.0; cout * cin];
    let mut gb = vec![0.0; cout];
    for bi in 0..nb {
        let g = &grad_out.data()[bi * cout * hw..(bi + 1) * cout * hw];
        let xb = &x.data()[bi * cin * hw..(bi + 1) * cin * hw];
        gemm_tn(weight.data(), g, cin, cout, hw, &mut gx[bi * cin * hw..(bi + 1) * cin * hw]);
        gemm_nt(g, xb, cout, hw, cin, &mut gw);
        if with_bias {
            for (co, chunk) in g.chunks(hw).enumerate() {
                gb[co] += chunk.iter().sum::<f64>();
            }
        }
    }
    Ok((
        Tensor::new(&[nb, cin, h, w], gx)?,
        Tensor::new(&[cout, cin], gw)?,
        if with_bias {
            Some(Tensor::new(&[cout], gb)?)
        } else {
            None
        },
    ))
}

/// Validated geometry of a depth-wise kernel: either shared `[s, s, c]`
/// or one kernel per batch item `[n_b, s, s, c]`.
struct DepthwiseGeometry {
    s: usize,
    per_item: bool,
}

fn depthwise_geometry(x: &Tensor, kernel: &Tensor, dilation: usize) -> Result<DepthwiseGeometry> {
    let (nb, c, _, _) = x.dims4()?;
    let (s, per_item) = match *kernel.shape() {
        [s1, s2, kc] if s1 == s2 && kc == c => (s1, false),
        [kn, s1, s2, kc] if s1 == s2 && kc == c && kn == nb => (s1, true),
        _ => return dim_err("conv2d_depthwise_dilated", x.shape(), kernel.shape()),
    };
    if s % 2 == 0 {
        return Err(CacError::Config(format!(
            "depth-wise kernel size must be odd, got {s}"
        )));
    }
    if dilation == 0 {
        return Err(CacError::Config("dilation must be at least 1".into()));
    }
    Ok(DepthwiseGeometry { s, per_item })
}

/// Visits every (output index, input index, tap index) triple of one batch
/// item's depth-wise correlation in fixed order. `visit(out_idx, in_idx, tap)`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn for_each_tap(
    c: usize,
    h: usize,
    w: usize,
    s: usize,
    dilation: usize,
    pad: PaddingMode,
    mut visit: impl FnMut(usize, usize, usize),
) {
    let r = (s / 2) as isize;
    let d = dilation as isize;
    let hw = h * w;
    // precomputed source coordinates per tap offset
    let cols: Vec<Vec<Option<usize>>> = (0..s)
        .map(|kx| {
            let dx = (kx as isize - r) * d;
            (0..w).map(|x| pad.resolve(x as isize + dx, w)).collect()
        })
        .collect();
    for ch in 0..c {
        for ky in 0..s {
            let dy = (ky as isize - r) * d;
            for kx in 0..s {
                let tap = (ky * s + kx) * c + ch;
                let col = &cols[kx];
                for y in 0..h {
                    let Some(sy) = pad.resolve(y as isize + dy, h) else {
                        continue;
                    };
                    let out_row = ch * hw + y * w;
                    let in_row = ch * hw + sy * w;
                    for (x, sx) in col.iter().enumerate() {
                        if let Some(sx) = sx {
                            visit(out_row + x, in_row + sx, tap);
                        }
                    }
                }
            }
        }
    }
}

/// Depth-wise dilated 2-D correlation with same padding. Channel `j` of the
/// output is channel `j` of `x` correlated with `kernel[:, :, j]`.
///
/// `kernel` is `[s, s, c]` (shared by the batch) or `[n_b, s, s, c]`.
pub fn conv2d_depthwise_dilated(
    x: &Tensor,
    kernel: &Tensor,
    dilation: usize,
    pad: PaddingMode,
) -> Result<Tensor> {
    let geo = depthwise_geometry(x, kernel, dilation)?;
    let (nb, c, h, w) = x.dims4()?;
    let item = c * h * w;
    let ksize = geo.s * geo.s * c;
    let mut out = vec![0.0; nb * item];
    for bi in 0..nb {
        let xb = &x.data()[bi * item..(bi + 1) * item];
        let kb = if geo.per_item {
            &kernel.data()[bi * ksize..(bi + 1) * ksize]
        } else {
            kernel.data()
        };
        let ob = &mut out[bi * item..(bi + 1) * item];
        for_each_tap(c, h, w, geo.s, dilation, pad, |o, i, t| {
            ob[o] += kb[t] * xb[i];
        });
    }
    Tensor::new(&[nb, c, h, w], out)
}

/// Gradients of [`conv2d_depthwise_dilated`]: `(dX, dKernel)`, with `dKernel`
/// shaped like `kernel`.
pub fn conv2d_depthwise_dilated_backward(
    x: &Tensor,
    kernel: &Tensor,
    dilation: usize,
    pad: PaddingMode,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let geo = depthwise_geometry(x, kernel, dilation)?;
    x.same_shape(grad_out, "conv2d_depthwise_dilated_backward")?;
    let (nb, c, h, w) = x.dims4()?;
    let item = c * h * w;
    let ksize = geo.s * geo.s * c;
    let mut gx = vec![0.0; nb * item];
    let mut gk = vec![0.0; kernel.len()];
    for bi in 0..nb {
        let xb = &x.data()[bi * item..(bi + 1) * item];
        let gb = &grad_out.data()[bi * item..(bi + 1) * item];
        let koff = if geo.per_item { bi * ksize } else { 0 };
        let kb = &kernel.data()[koff..koff + ksize];
        let gxb = &mut gx[bi * item..(bi + 1) * item];
        let gkb = &mut gk[koff..koff + ksize];
        for_each_tap(c, h, w, geo.s, dilation, pad, |o, i, t| {
            gxb[i] += kb[t] * gb[o];
            gkb[t] += gb[o] * xb[i];
        });
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(kernel.shape(), gk)?,
    ))
}

/// Per-channel spatial mean: `n_b×c×h×w → n_b×c`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (nb, c, h, w) = x.dims4()?;
    let hw = h * w;
    if hw == 0 {
        return dim_err("global_avg_pool", x.shape(), &[nb, c, 1, 1]);
    }
    let data = x
        .data()
        .chunks(hw)
        .map(|ch| ch.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(&[nb, c], data)
}

pub fn global_avg_pool_backward(x_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [nb, c, h, w] = *x_shape else {
        return dim_err("global_avg_pool_backward", x_shape, &[0, 0, 0, 0]);
    };
    if grad_out.shape() != [nb, c] {
        return dim_err("global_avg_pool_backward", grad_out.shape(), &[nb, c]);
    }
    let hw = h * w;
    let inv = 1.0 / hw as f64;
    let mut out = Vec::with_capacity(nb * c * hw);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat(g * inv).take(hw));
    }
    Tensor::new(x_shape, out)
}

/// Replicates an `n_b×c` vector to every spatial position.
pub fn broadcast_spatial(v: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (nb, c) = v.dims2()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(nb * c * hw);
    for &g in v.data() {
        out.extend(std::iter::repeat(g).take(hw));
    }
    Tensor::new(&[nb, c, h, w], out)
}

/// Adjoint of [`broadcast_spatial`]: spatial sum.
pub fn broadcast_spatial_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (nb, c, h, w) = grad_out.dims4()?;
    let data = grad_out
        .data()
        .chunks(h * w)
        .map(|ch| ch.iter().sum())
        .collect();
    Tensor::new(&[nb, c], data)
}

/// Source taps for align-corners-false linear interpolation along one axis.
fn interp_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor (align-corners false).
pub fn bilinear_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(CacError::Config("upsample factor must be at least 1".into()));
    }
    let (nb, c, h, w) = x.dims4()?;
    if factor == 1 {
        return Tensor::new(x.shape(), x.data().to_vec());
    }
    let (oh, ow) = (h * factor, w * factor);
    let ty = interp_taps(h, factor);
    let tx = interp_taps(w, factor);
    let mut out = vec![0.0; nb * c * oh * ow];
    for (plane, src) in out.chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = (1.0 - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1];
                let bot = (1.0 - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1];
                plane[oy * ow + ox] = (1.0 - ly) * top + ly * bot;
            }
        }
    }
    Tensor::new(&[nb, c, oh, ow], out)
}

pub fn bilinear_upsample_backward(x_shape: &[usize], factor: usize, grad_out: &Tensor) -> Result<Tensor> {
    let [nb, c, h, w] = *x_shape else {
        return dim_err("bilinear_upsample_backward", x_shape, &[0, 0, 0, 0]);
    };
    if factor < 1 {
        return Err(CacError::Config("upsample factor must be at least 1".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    if grad_out.shape() != [nb, c, oh, ow] {
        return dim_err("bilinear_upsample_backward", grad_out.shape(), &[nb, c, oh, ow]);
    }
    if factor == 1 {
        return Tensor::new(x_shape, grad_out.data().to_vec());
    }
    let ty = interp_taps(h, factor);
    let tx = interp_taps(w, factor);
    let mut gx = vec![0.0; nb * c * h * w];
    for (plane, g) in gx.chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let go = g[oy * ow + ox];
                plane[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * go;
                plane[y0 * w + x1] += (1.0 - ly) * lx * go;
                plane[y1 * w + x0] += ly * (1.0 - lx) * go;
                plane[y1 * w + x1] += ly * lx * go;
            }
        }
    }
    Tensor::new(x_shape, gx)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward of the sigmoid from its output `y`: `g·y·(1−y)`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    y.same_shape(grad_out, "sigmoid_backward")?;
    Tensor::new(
        y.shape(),
        y.data()
            .iter()
            .zip(grad_out.data())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect(),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.same_shape(grad_out, "relu_backward")?;
    Tensor::new(
        x.shape(),
        x.data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

/// Mean per-pixel softmax cross-entropy over non-ignored pixels.
///
/// `labels` holds `n_b·h·w` class ids in batch/row-major order. Returns the
/// loss and its gradient with respect to `logits`.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    ignore_index: Option<usize>,
) -> Result<(f64, Tensor)> {
    let (nb, k, h, w) = logits.dims4()?;
    let hw = h * w;
    if labels.len() != nb * hw {
        return dim_err("softmax_cross_entropy", &[nb, h, w], &[labels.len()]);
    }
    let data = logits.data();
    let mut grad = vec![0.0; data.len()];
    let mut total = 0.0;
    let mut count = 0usize;
    let mut probs = vec![0.0; k];
    for bi in 0..nb {
        for p in 0..hw {
            let label = labels[bi * hw + p];
            if Some(label) == ignore_index {
                continue;
            }
            if label >= k {
                return Err(CacError::Data(format!(
                    "label {label} out of range [0, {k}) at (batch {bi}, y {}, x {})",
                    p / w,
                    p % w
                )));
            }
            let base = bi * k * hw + p;
            let max = (0..k).map(|j| data[base + j * hw]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, pr) in probs.iter_mut().enumerate() {
                *pr = (data[base + j * hw] - max).exp();
                z += *pr;
            }
            total += z.ln() + max - data[base + label * hw];
            for (j, pr) in probs.iter().enumerate() {
                grad[base + j * hw] = pr / z;
            }
            grad[base + label * hw] -= 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return Ok((0.0, Tensor::zeros(logits.shape())));
    }
    let inv = 1.0 / count as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, Tensor::new(logits.shape(), grad)?))
}

/// Full `k×k` convolution (correlation), stride 1, zero same-padding.
/// `weight` is `[c_out, c_in, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (nb, cin, h, w) = x.dims4()?;
    let (cout, wcin, k, k2) = weight.dims4()?;
    if wcin != cin || k != k2 {
        return dim_err("conv2d", x.shape(), weight.shape());
    }
    if k % 2 == 0 {
        return Err(CacError::Config(format!("conv2d kernel size must be odd, got {k}")));
    }
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![0.0; nb * cout * hw];
    for bi in 0..nb {
        for co in 0..cout {
            let o = &mut out[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
            if let Some(b) = bias {
                o.fill(b.data()[co]);
            }
            for ci in 0..cin {
                let src = &x.data()[(bi * cin + ci) * hw..(bi * cin + ci + 1) * hw];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight.data()[((co * cin + ci) * k + ky) * k + kx];
                        let (dy, dx) = (ky as isize - r, kx as isize - r);
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let x_lo = (-dx).max(0) as usize;
                            let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                            let srow = sy as usize * w;
                            for xx in x_lo..x_hi {
                                o[y * w + xx] += wv * src[srow + (xx as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[nb, cout, h, w], out)
}

/// Gradients of [`conv2d`]: `(dX, dW, dBias)`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    with_bias: bool,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (nb, cin, h, w) = x.dims4()?;
    let (cout, _, k, _) = weight.dims4()?;
    if grad_out.shape() != [nb, cout, h, w] {
        return dim_err("conv2d_backward", grad_out.shape(), &[nb, cout, h, w]);
    }
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; cout];
    for bi in 0..nb {
        for co in 0..cout {
            let g = &grad_out.data()[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
            if with_bias {
                gb[co] += g.iter().sum::<f64>();
            }
            for ci in 0..cin {
                let xoff = (bi * cin + ci) * hw;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * cin + ci) * k + ky) * k + kx;
                        let wv = weight.data()[widx];
                        let (dy, dx) = (ky as isize - r, kx as isize - r);
                        let mut acc = 0.0;
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let x_lo = (-dx).max(0) as usize;
                            let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                            let srow = xoff + sy as usize * w;
                            for xx in x_lo..x_hi {
                                let si = srow + (xx as isize + dx) as usize;
                                let go = g[y * w + xx];
                                acc += go * x.data()[si];
                                gx[si] += wv * go;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(weight.shape(), gw)?,
        if with_bias { Some(Tensor::new(&[cout], gb)?) } else { None },
    ))
}

/// Non-overlapping `f×f` average pooling; extents must be divisible by `f`.
pub fn avg_pool2d(x: &Tensor, f: usize) -> Result<Tensor> {
    let (nb, c, h, w) = x.dims4()?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(CacError::Config(format!(
            "average pool factor {f} must divide spatial extent {h}×{w}"
        )));
    }
    if f == 1 {
        return Tensor::new(x.shape(), x.data().to_vec());
    }
    let (oh, ow) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; nb * c * oh * ow];
    for (plane, src) in out.chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                plane[(y / f) * ow + xx / f] += src[y * w + xx] * inv;
            }
        }
    }
    Tensor::new(&[nb, c, oh, ow], out)
}

pub fn avg_pool2d_backward(x_shape: &[usize], f: usize, grad_out: &Tensor) -> Result<Tensor> {
    let [nb, c, h, w] = *x_shape else {
        return dim_err("avg_pool2d_backward", x_shape, &[0, 0, 0, 0]);
    };
    if f == 1 {
        return Tensor::new(x_shape, grad_out.data().to_vec());
    }
    let (oh, ow) = (h / f, w / f);
    if grad_out.shape() != [nb, c, oh, ow] {
        return dim_err("avg_pool2d_backward", grad_out.shape(), &[nb, c, oh, ow]);
    }
    let inv = 1.0 / (f * f) as f64;
    let mut gx = vec![0.0; nb * c * h * w];
    for (plane, g) in gx.chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for y in 0..h {
            for xx in 0..w {
                plane[y * w + xx] = g[(y / f) * ow + xx / f] * inv;
            }
        }
    }
    Tensor::new(x_shape, gx)
}

/// Mirrors a 4-D tensor along its width axis.
pub fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    let (_, _, _, w) = x.dims4()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(x.shape(), out)
}

/// Concatenates 4-D tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| CacError::Config("concat of zero tensors".into()))?;
    let (nb, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (nb, h, w) {
            return dim_err("concat_channels", first.shape(), p.shape());
        }
        total_c += pc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(nb * total_c * hw);
    for bi in 0..nb {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[bi * pc * hw..(bi + 1) * pc * hw]);
        }
    }
    Tensor::new(&[nb, total_c, h, w], out)
}

/// Inverse of [`concat_channels`].
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let (nb, c, h, w) = x.dims4()?;
    if sizes.iter().sum::<usize>() != c {
        return dim_err("split_channels", x.shape(), sizes);
    }
    let hw = h * w;
    let mut parts: Vec<Vec<f64>> = sizes.iter().map(|s| Vec::with_capacity(nb * s * hw)).collect();
    for bi in 0..nb {
        let mut off = bi * c * hw;
        for (part, &s) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&x.data()[off..off + s * hw]);
            off += s * hw;
        }
    }
    parts
        .into_iter()
        .zip(sizes)
        .map(|(d, &s)| Tensor::new(&[nb, s, h, w], d))
        .collect()
}
