//! Forward kernels for the fixed operation menu, plus the adjoint kernels the
//! tape in [`crate::graph`] calls during the backward pass.
//!
//! Layouts are row-major: images are `N×C×H×W`, token sequences `N×T×D`,
//! linear weights `out×in`, conv weights `out×in×k×k`, transposed-conv
//! weights `in×out×k×k`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Default batch-norm momentum for the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance floor shared by batch and layer normalization.
pub const NORM_EPS: f64 = 1e-5;

#[inline]
fn s<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

/// Spatial geometry of a (forward) convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::arg(op, "stride must be at least 1"));
        }
        if kernel > height + 2 * pad || kernel > width + 2 * pad {
            return Err(Error::shape(
                op,
                format!("kernel {kernel}x{kernel} does not fit input {height}x{width} with padding {pad}"),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one `C×H×W` image into a `(C·k·k)×(Ho·Wo)` patch matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (k, cols) = (g.kernel, g.col_cols());
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, slot) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *slot = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into an image.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let (k, cols) = (g.kernel, g.col_cols());
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn dims4<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<[usize; 4]> {
    x.expect_ndim(op, 4)?;
    let s = x.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(Error::shape(
                op,
                format!("bias shape {:?} does not match {channels} output channels", b.shape()),
            ));
        }
    }
    Ok(())
}

pub(crate) fn conv2d_geom<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    const OP: &str = "conv2d";
    let [_, c, h, wd] = dims4(OP, x)?;
    w.expect_ndim(OP, 4)?;
    let ws = w.shape();
    if ws[1] != c || ws[2] != ws[3] {
        return Err(Error::shape(
            OP,
            format!("input {:?} is incompatible with weight {:?}", x.shape(), ws),
        ));
    }
    ConvGeom::new(OP, c, h, wd, ws[2], stride, pad)
}

/// 2-D cross-correlation. Output extent is `(H + 2p − k)/s + 1`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv2d_geom(x, w, stride, pad)?;
    let n = x.shape()[0];
    let out_c = w.shape()[0];
    check_bias("conv2d", bias, out_c)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); n * out_c * cols];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
    for b in 0..n {
        let xb = x.batch_item(b);
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut col);
            &col
        };
        let ob = &mut out[b * out_c * cols..(b + 1) * out_c * cols];
        if let Some(bias) = bias {
            for (o, chunk) in ob.chunks_mut(cols).enumerate() {
                chunk.fill(bias.data()[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(out_c, rows, cols, T::one(), w.data(), (rows, 1), src, (cols, 1), beta, ob, (cols, 1));
    }
    Ok(Tensor::from_parts(vec![n, out_c, g.out_h, g.out_w], out))
}

/// Gradients of [`conv2d`] with respect to its input, weight and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let n = x.shape()[0];
    let out_c = w.shape()[0];
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_len = g.channels * g.height * g.width;
    let mut dx = need_dx.then(|| vec![T::zero(); n * in_len]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = vec![T::zero(); out_c];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
    for b in 0..n {
        let dyb = &dy[b * out_c * cols..(b + 1) * out_c * cols];
        for (o, chunk) in dyb.chunks(cols).enumerate() {
            db[o] += chunk.iter().copied().sum();
        }
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                x.batch_item(b)
            } else {
                im2col(x.batch_item(b), g, &mut col);
                &col
            };
            T::gemm(out_c, cols, rows, T::one(), dyb, (cols, 1), src, (1, cols), T::one(), dw, (rows, 1));
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(rows, out_c, cols, T::one(), w.data(), (1, rows), dyb, (cols, 1), T::zero(), dxb, (cols, 1));
            } else {
                T::gemm(rows, out_c, cols, T::one(), w.data(), (1, rows), dyb, (cols, 1), T::zero(), &mut col, (cols, 1));
                col2im(&col, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Geometry of the forward convolution whose adjoint a transposed
/// convolution computes: it maps the transposed output back to the input.
pub(crate) fn conv_transpose2d_geom<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    const OP: &str = "conv_transpose2d";
    let [_, c, h, wd] = dims4(OP, x)?;
    w.expect_ndim(OP, 4)?;
    let ws = w.shape();
    if ws[0] != c || ws[2] != ws[3] {
        return Err(Error::shape(
            OP,
            format!("input {:?} is incompatible with weight {:?}", x.shape(), ws),
        ));
    }
    let k = ws[2];
    if stride == 0 {
        return Err(Error::arg(OP, "stride must be at least 1"));
    }
    let out_h = ((h - 1) * stride + k).checked_sub(2 * pad);
    let out_w = ((wd - 1) * stride + k).checked_sub(2 * pad);
    match (out_h, out_w) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => {
            let g = ConvGeom::new(OP, ws[1], oh, ow, k, stride, pad)?;
            debug_assert_eq!((g.out_h, g.out_w), (h, wd));
            Ok(g)
        }
        _ => Err(Error::shape(
            OP,
            format!("padding {pad} leaves no output for input {:?} and kernel {k}", x.shape()),
        )),
    }
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same weight
/// (read as `in×out×k×k`), plus a bias. Output extent `(H − 1)s − 2p + k`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_transpose2d_geom(x, w, stride, pad)?;
    let [n, in_c, h, wd] = dims4("conv_transpose2d", x)?;
    let out_c = g.channels;
    check_bias("conv_transpose2d", bias, out_c)?;
    let (rows, cols) = (g.col_rows(), h * wd);
    let plane = g.height * g.width;
    let mut out = vec![T::zero(); n * out_c * plane];
    let mut col = vec![T::zero(); rows * cols];
    for b in 0..n {
        T::gemm(rows, in_c, cols, T::one(), w.data(), (1, rows), x.batch_item(b), (cols, 1), T::zero(), &mut col, (cols, 1));
        let ob = &mut out[b * out_c * plane..(b + 1) * out_c * plane];
        col2im(&col, &g, ob);
        if let Some(bias) = bias {
            for (o, chunk) in ob.chunks_mut(plane).enumerate() {
                let v = bias.data()[o];
                chunk.iter_mut().for_each(|e| *e += v);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, out_c, g.height, g.width], out))
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let n = x.shape()[0];
    let in_c = x.shape()[1];
    let out_c = g.channels;
    let plane = g.height * g.width;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = vec![T::zero(); out_c];
    let mut col = vec![T::zero(); rows * cols];
    for b in 0..n {
        let dyb = &dy[b * out_c * plane..(b + 1) * out_c * plane];
        for (o, chunk) in dyb.chunks(plane).enumerate() {
            db[o] += chunk.iter().copied().sum();
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(dyb, g, &mut col);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_c * cols..(b + 1) * in_c * cols];
            T::gemm(in_c, rows, cols, T::one(), w.data(), (rows, 1), &col, (cols, 1), T::zero(), dxb, (cols, 1));
        }
        if let Some(dw) = dw.as_mut() {
            T::gemm(in_c, cols, rows, T::one(), x.batch_item(b), (cols, 1), &col, (1, cols), T::one(), dw, (rows, 1));
        }
    }
    (dx, dw, db)
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4("avg_pool2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("avg_pool2", format!("odd spatial extent in {:?}", x.shape())));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = s::<T>(0.25);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let r0 = &plane[2 * y * w..(2 * y + 1) * w];
            let r1 = &plane[(2 * y + 1) * w..(2 * y + 2) * w];
            for xx in 0..ow {
                out.push((r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]) * quarter);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub(crate) fn avg_pool2_backward<T: Scalar>(dy: &[T], in_shape: &[usize]) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let planes = in_shape[0] * in_shape[1];
    let quarter = s::<T>(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                dx[p * h * w + y * w + xx] = dy[p * oh * ow + (y / 2) * ow + xx / 2] * quarter;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling: every pixel becomes a 2×2 block.
pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4("upsample_nearest2", x)?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for y in 0..oh {
            let row = &src[p * h * w + (y / 2) * w..p * h * w + (y / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub(crate) fn upsample_nearest2_backward<T: Scalar>(dy: &[T], in_shape: &[usize]) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let ow = 2 * w;
    let planes = in_shape[0] * in_shape[1];
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..2 * h {
            for xx in 0..ow {
                dx[p * h * w + (y / 2) * w + xx / 2] += dy[p * 4 * h * w + y * ow + xx];
            }
        }
    }
    dx
}

fn rows_of<T: Scalar>(op: &'static str, x: &Tensor<T>, width: usize) -> Result<usize> {
    let last = *x.shape().last().unwrap_or(&0);
    if last != width {
        return Err(Error::shape(
            op,
            format!("last axis of {:?} must be {width}", x.shape()),
        ));
    }
    Ok(x.len() / width)
}

/// Affine map over the last axis: `y = x·Wᵀ + b` with `W` shaped `out×in`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    w.expect_ndim("linear", 2)?;
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    let rows = rows_of("linear", x, in_f)?;
    check_bias("linear", bias, out_f)?;
    let mut out = vec![T::zero(); rows * out_f];
    if let Some(b) = bias {
        for chunk in out.chunks_mut(out_f) {
            chunk.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(rows, in_f, out_f, T::one(), x.data(), (in_f, 1), w.data(), (1, in_f), beta, &mut out, (out_f, 1));
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / in_f;
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); rows * in_f];
        T::gemm(rows, out_f, in_f, T::one(), dy, (out_f, 1), w.data(), (in_f, 1), T::zero(), &mut dx, (in_f, 1));
        dx
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); out_f * in_f];
        T::gemm(out_f, rows, in_f, T::one(), dy, (1, out_f), x.data(), (in_f, 1), T::zero(), &mut dw, (in_f, 1));
        dw
    });
    let mut db = vec![T::zero(); out_f];
    for chunk in dy.chunks(out_f) {
        for (acc, &g) in db.iter_mut().zip(chunk) {
            *acc += g;
        }
    }
    (dx, dw, db)
}

/// Normalized values and reciprocal standard deviations kept for backward.
#[derive(Debug, Clone)]
pub(crate) struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Layer normalization over the last axis, then `gain ⊙ x̂ + shift`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(layer_norm_cached(x, gain, shift)?.0)
}

pub(crate) fn layer_norm_cached<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let d = gain.len();
    if shift.len() != d {
        return Err(Error::shape("layer_norm", "gain and shift lengths differ"));
    }
    let rows = rows_of("layer_norm", x, d)?;
    let eps = s::<T>(NORM_EPS);
    let inv_d = s::<T>(1.0 / d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for i in 0..d {
            let h = (row[i] - mean) * is;
            xhat[r * d + i] = h;
            out[r * d + i] = h * gain.data()[i] + shift.data()[i];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        NormCache { xhat, inv_std },
    ))
}

/// Shared backward of a normalization over groups of `m` values:
/// `dx = inv_std/m · (m·g − Σg − x̂·Σ(g·x̂))`, where `g` is the gradient
/// with respect to `x̂`.
#[inline]
fn norm_backward_group<T: Scalar>(dxhat: &[T], xhat: &[T], inv_std: T, out: &mut [T]) {
    let m = s::<T>(dxhat.len() as f64);
    let sum_g: T = dxhat.iter().copied().sum();
    let sum_gx: T = dxhat.iter().zip(xhat).map(|(&g, &h)| g * h).sum();
    let scale = inv_std / m;
    for ((o, &g), &h) in out.iter_mut().zip(dxhat).zip(xhat) {
        *o = scale * (m * g - sum_g - h * sum_gx);
    }
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gain: &Tensor<T>,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gain.len();
    let rows = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgain = vec![T::zero(); d];
    let mut dshift = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for i in 0..d {
            dgain[i] += dyr[i] * xh[i];
            dshift[i] += dyr[i];
            dxhat[i] = dyr[i] * gain.data()[i];
        }
        norm_backward_group(&dxhat, xh, cache.inv_std[r], &mut dx[r * d..(r + 1) * d]);
    }
    (dx, dgain, dshift)
}

/// Running statistics of a batch-norm layer; not trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Scalar = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
        }
    }
}

/// Batch normalization over `N×H×W` per channel.
///
/// Training mode normalizes with the batch statistics and folds them into
/// `stats` by exponential moving average (unbiased variance); eval mode
/// normalizes with `stats`.
pub fn batch_norm2d<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    stats: &mut RunningStats<T>,
    training: bool,
) -> Result<Tensor<T>> {
    Ok(batch_norm2d_cached(x, gain, shift, stats, training)?.0)
}

pub(crate) fn batch_norm2d_cached<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    stats: &mut RunningStats<T>,
    training: bool,
) -> Result<(Tensor<T>, NormCache<T>)> {
    const OP: &str = "batch_norm2d";
    let [n, c, h, w] = dims4(OP, x)?;
    if gain.len() != c || shift.len() != c || stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::shape(
            OP,
            format!("{c} channels in {:?} but {} gains / {} running entries", x.shape(), gain.len(), stats.mean.len()),
        ));
    }
    if training && n < 2 {
        return Err(Error::arg(OP, "training mode needs a batch of at least 2"));
    }
    let plane = h * w;
    let m = n * plane;
    let eps = s::<T>(NORM_EPS);
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let (mean, var) = if training {
            let mut sum = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * plane;
                sum += src[off..off + plane].iter().copied().sum();
            }
            let mean = sum / s::<T>(m as f64);
            let mut sq = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * plane;
                sq += src[off..off + plane].iter().map(|&v| (v - mean) * (v - mean)).sum();
            }
            let var = sq / s::<T>(m as f64);
            let mom = s::<T>(stats.momentum);
            let unbiased = sq / s::<T>((m - 1) as f64);
            stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean;
            stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * unbiased;
            (mean, var)
        } else {
            (stats.mean[ch], stats.var[ch])
        };
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let (gn, sh) = (gain.data()[ch], shift.data()[ch]);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let hv = (src[i] - mean) * is;
                xhat[i] = hv;
                out[i] = hv * gn + sh;
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        NormCache { xhat, inv_std },
    ))
}

/// Backward of training-mode batch norm. Eval mode is a per-channel affine
/// map and is handled by [`batch_norm2d_eval_backward`].
pub(crate) fn batch_norm2d_backward<T: Scalar>(
    cache: &NormCache<T>,
    gain: &Tensor<T>,
    shape: &[usize],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = n * plane;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgain = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    let mut g = vec![T::zero(); m];
    let mut xh = vec![T::zero(); m];
    let mut tmp = vec![T::zero(); m];
    for ch in 0..c {
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in 0..plane {
                let idx = b * plane + i;
                let d = dy[off + i];
                dgain[ch] += d * cache.xhat[off + i];
                dshift[ch] += d;
                g[idx] = d * gain.data()[ch];
                xh[idx] = cache.xhat[off + i];
            }
        }
        norm_backward_group(&g, &xh, cache.inv_std[ch], &mut tmp);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            dx[off..off + plane].copy_from_slice(&tmp[b * plane..(b + 1) * plane]);
        }
    }
    (dx, dgain, dshift)
}

pub(crate) fn batch_norm2d_eval_backward<T: Scalar>(
    cache: &NormCache<T>,
    gain: &Tensor<T>,
    shape: &[usize],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgain = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let k = gain.data()[ch] * cache.inv_std[ch];
            for i in off..off + plane {
                dgain[ch] += dy[i] * cache.xhat[i];
                dshift[ch] += dy[i];
                dx[i] = dy[i] * k;
            }
        }
    }
    (dx, dgain, dshift)
}

/// Softmax along the last axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        softmax_in_place(row);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `dx = y ⊙ (dy − Σ dy·y)` per row.
pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], d: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for i in 0..d {
            dxr[i] = yr[i] * (dyr[i] - dot);
        }
    }
    dx
}

/// Pointwise nonlinearities of the menu.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    /// Exact (erf) GELU.
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::LeakyRelu(slope) => {
                if v > T::zero() {
                    v
                } else {
                    v * s::<T>(slope)
                }
            }
            Activation::Tanh => v.tanh(),
            Activation::Gelu => s::<T>(0.5) * v * (T::one() + (v * s::<T>(std::f64::consts::FRAC_1_SQRT_2)).erf()),
        }
    }

    /// Derivative at input `x` with output `y`.
    #[inline]
    pub(crate) fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    s::<T>(slope)
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Gelu => {
                let cdf = s::<T>(0.5) * (T::one() + (x * s::<T>(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-(x * x) * s::<T>(0.5)).exp() * s::<T>(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                cdf + x * pdf
            }
        }
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| Activation::Relu.apply(v))
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    x.map(|v| Activation::LeakyRelu(slope).apply(v))
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| Activation::Gelu.apply(v))
}

/// Inverted-scaling dropout mask: entries are `0` or `1/(1 − rate)`.
pub(crate) fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = s::<T>(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::arg("dropout", format!("rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Dropout. Identity when `training` is false or `rate` is 0.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, rate: f64, training: bool, rng: &mut R) -> Result<Tensor<T>> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T, R>(x.len(), rate, rng);
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
    ))
}

/// Split an `N×C×H×W` image into a row-major grid of `p×p` patches, each
/// flattened channel-major, giving `N×(H/p·W/p)×(C·p·p)`.
pub fn patchify<T: Scalar>(x: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4("patchify", x)?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "patchify",
            format!("spatial extent {h}x{w} is not divisible by patch size {patch}"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let plen = c * patch * patch;
    let mut out = vec![T::zero(); n * gh * gw * plen];
    patch_copy(x.data(), &mut out, [n, c, h, w], patch, true);
    Ok(Tensor::from_parts(vec![n, gh * gw, plen], out))
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, channels: usize, height: usize, width: usize, patch: usize) -> Result<Tensor<T>> {
    tokens.expect_ndim("unpatchify", 3)?;
    let n = tokens.shape()[0];
    if patch == 0
        || height % patch != 0
        || width % patch != 0
        || tokens.shape()[1] != (height / patch) * (width / patch)
        || tokens.shape()[2] != channels * patch * patch
    {
        return Err(Error::shape(
            "unpatchify",
            format!("tokens {:?} do not tile a {channels}x{height}x{width} image with patch {patch}", tokens.shape()),
        ));
    }
    let mut out = vec![T::zero(); n * channels * height * width];
    patch_copy(tokens.data(), &mut out, [n, channels, height, width], patch, false);
    Ok(Tensor::from_parts(vec![n, channels, height, width], out))
}

/// Moves values between image layout and patch layout.
pub(crate) fn patch_copy<T: Scalar>(src: &[T], dst: &mut [T], [n, c, h, w]: [usize; 4], p: usize, to_patches: bool) {
    let gw = w / p;
    let tokens = (h / p) * gw;
    let plen = c * p * p;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let img = ((b * c + ch) * h + y) * w + x;
                    let tok = (y / p) * gw + x / p;
                    let within = (ch * p + y % p) * p + x % p;
                    let pat = (b * tokens + tok) * plen + within;
                    if to_patches {
                        dst[pat] = src[img];
                    } else {
                        dst[img] = src[pat];
                    }
                }
            }
        }
    }
}

/// Bilinear resize of `N×C×H×W` to `N×C×oh×ow` with half-pixel centres
/// and edge clamping.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4("resize_bilinear", x)?;
    if oh == 0 || ow == 0 {
        return Err(Error::arg("resize_bilinear", "output extent must be positive"));
    }
    let ys = bilinear_taps(h, oh);
    let xs = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * s::<T>(1.0 - fx) + plane[y0 * w + x1] * s::<T>(fx);
                let bot = plane[y1 * w + x0] * s::<T>(1.0 - fx) + plane[y1 * w + x1] * s::<T>(fx);
                out.push(top * s::<T>(1.0 - fy) + bot * s::<T>(fy));
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

/// Source indices and blend weight for each output coordinate.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}
