//! Forward and adjoint kernels shared by the pure API and the tape.
//!
//! Image tensors are channel-first `C×H×W`. Flow tensors are `2×H×W` with
//! channel 0 holding the horizontal and channel 1 the vertical displacement.

use crate::{Error, Result, Tensor};

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("{what}: expected C×H×W, got {s:?}"))),
    }
}

/// `C = alpha * A·B + beta * C` for row-major `A: m×k`, `B: k×n`, with
/// optional transposition expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above; strides describe in-bounds layouts.
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

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = match *input {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::Shape(format!("conv2d input must be C×H×W, got {s:?}"))),
        };
        let (c_out, kc, kh, kw) = match *kernel {
            [a, b, c, d] => (a, b, c, d),
            ref s => {
                return Err(Error::Shape(format!(
                    "conv2d kernel must be Cout×Cin×k×k, got {s:?}"
                )))
            }
        };
        if kc != c_in {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d kernel must be square with odd size, got {kh}×{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh} larger than padded input {h}×{w} (pad {pad})"
            )));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * n];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n = g.out_len();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of a `C_in×H×W` input with a `C_out×C_in×k×k` kernel,
/// zero padding, optional per-output-channel bias.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    if let Some(b) = bias {
        b.expect_shape(&[g.c_out])?;
    }
    let n = g.out_len();
    let mut out = vec![0.0; g.c_out * n];
    if let Some(b) = bias {
        for (co, &bv) in b.data().iter().enumerate() {
            out[co * n..(co + 1) * n].fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(g.c_out, g.c_in, n, kernel.data(), false, input.data(), false, &mut out, beta);
    } else {
        let cols = im2col(input.data(), &g);
        gemm(g.c_out, g.patch_len(), n, kernel.data(), false, &cols, false, &mut out, beta);
    }
    Tensor::new(&[g.c_out, g.h_out, g.w_out], out)
}

/// Adjoint of [`conv2d`]: returns `(d_input, d_kernel, d_bias)` for the
/// requested operands.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    want: [bool; 3],
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    let n = g.out_len();
    let dy = grad_out.data();
    let cols_owned;
    let cols: &[f64] = if g.is_pointwise() {
        input.data()
    } else if want[1] {
        cols_owned = im2col(input.data(), &g);
        &cols_owned
    } else {
        &[]
    };
    let d_kernel = if want[1] {
        let mut dk = vec![0.0; g.c_out * g.patch_len()];
        gemm(g.c_out, n, g.patch_len(), dy, false, cols, true, &mut dk, 0.0);
        Some(Tensor::new(kernel.shape(), dk)?)
    } else {
        None
    };
    let d_bias = if want[2] {
        let db = (0..g.c_out).map(|co| dy[co * n..(co + 1) * n].iter().sum()).collect();
        Some(Tensor::new(&[g.c_out], db)?)
    } else {
        None
    };
    let d_input = if want[0] {
        let mut dx = vec![0.0; g.c_in * g.h * g.w];
        if g.is_pointwise() {
            gemm(g.c_in, g.c_out, n, kernel.data(), true, dy, false, &mut dx, 0.0);
        } else {
            let mut dcols = vec![0.0; g.patch_len() * n];
            gemm(g.patch_len(), g.c_out, n, kernel.data(), true, dy, false, &mut dcols, 0.0);
            col2im(&dcols, &g, &mut dx);
        }
        Some(Tensor::new(input.shape(), dx)?)
    } else {
        None
    };
    Ok((d_input, d_kernel, d_bias))
}

/// Bilinear tap along one axis with clamp-to-edge: `(i0, i1, frac, clamped)`.
#[inline]
fn tap(coord: f64, size: usize) -> (usize, usize, f64, bool) {
    let hi = (size - 1) as f64;
    let clamped = !(0.0..=hi).contains(&coord);
    let c = coord.clamp(0.0, hi);
    if size == 1 {
        return (0, 0, 0.0, clamped);
    }
    let i0 = (c.floor() as usize).min(size - 2);
    (i0, i0 + 1, c - i0 as f64, clamped)
}

/// Backward bilinear warp: output pixel `(x, y)` reads the input at
/// `(x + flow[0], y + flow[1])`. Sampling positions outside the frame clamp
/// to the border.
pub fn warp(frame: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(frame, "warp frame")?;
    flow.expect_shape(&[2, h, w])?;
    let (fx, fy) = flow.data().split_at(h * w);
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (x0, x1, ax, _) = tap(x as f64 + fx[p], w);
            let (y0, y1, ay, _) = tap(y as f64 + fy[p], h);
            for ch in 0..c {
                let f = frame.channel(ch);
                let top = (1.0 - ax) * f[y0 * w + x0] + ax * f[y0 * w + x1];
                let bot = (1.0 - ax) * f[y1 * w + x0] + ax * f[y1 * w + x1];
                out[ch * h * w + p] = (1.0 - ay) * top + ay * bot;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

pub(crate) fn warp_backward(
    frame: &Tensor,
    flow: &Tensor,
    grad_out: &Tensor,
    want: [bool; 2],
) -> (Option<Tensor>, Option<Tensor>) {
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let (fx, fy) = flow.data().split_at(h * w);
    let go = grad_out.data();
    let mut d_frame = want[0].then(|| vec![0.0; c * h * w]);
    let mut d_flow = want[1].then(|| vec![0.0; 2 * h * w]);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (x0, x1, ax, cx) = tap(x as f64 + fx[p], w);
            let (y0, y1, ay, cy) = tap(y as f64 + fy[p], h);
            let (mut gx, mut gy) = (0.0, 0.0);
            for ch in 0..c {
                let g = go[ch * h * w + p];
                if g == 0.0 {
                    continue;
                }
                if let Some(df) = d_frame.as_mut() {
                    let base = ch * h * w;
                    df[base + y0 * w + x0] += g * (1.0 - ax) * (1.0 - ay);
                    df[base + y0 * w + x1] += g * ax * (1.0 - ay);
                    df[base + y1 * w + x0] += g * (1.0 - ax) * ay;
                    df[base + y1 * w + x1] += g * ax * ay;
                }
                if d_flow.is_some() {
                    let f = frame.channel(ch);
                    let (f00, f01) = (f[y0 * w + x0], f[y0 * w + x1]);
                    let (f10, f11) = (f[y1 * w + x0], f[y1 * w + x1]);
                    gx += g * ((1.0 - ay) * (f01 - f00) + ay * (f11 - f10));
                    gy += g * ((1.0 - ax) * (f10 - f00) + ax * (f11 - f01));
                }
            }
            if let Some(dfl) = d_flow.as_mut() {
                if !cx && w > 1 {
                    dfl[p] = gx;
                }
                if !cy && h > 1 {
                    dfl[h * w + p] = gy;
                }
            }
        }
    }
    (
        d_frame.map(|d| Tensor::new(&[c, h, w], d).expect("shape")),
        d_flow.map(|d| Tensor::new(&[2, h, w], d).expect("shape")),
    )
}

fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let coord = if dst == 1 {
                0.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let (i0, i1, a, _) = tap(coord, src);
            (i0, i1, a)
        })
        .collect()
}

/// Bilinear resize with aligned corners: output corners sample input corners.
pub fn resize_bilinear(input: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(input, "resize")?;
    if h_out == 0 || w_out == 0 {
        return Err(Error::Shape("resize to an empty size".into()));
    }
    if (h, w) == (h_out, w_out) {
        return Ok(input.clone());
    }
    let ty = resize_taps(h, h_out);
    let tx = resize_taps(w, w_out);
    let mut out = Vec::with_capacity(c * h_out * w_out);
    for ch in 0..c {
        let f = input.channel(ch);
        for &(y0, y1, ay) in &ty {
            for &(x0, x1, ax) in &tx {
                let top = (1.0 - ax) * f[y0 * w + x0] + ax * f[y0 * w + x1];
                let bot = (1.0 - ax) * f[y1 * w + x0] + ax * f[y1 * w + x1];
                out.push((1.0 - ay) * top + ay * bot);
            }
        }
    }
    Tensor::new(&[c, h_out, w_out], out)
}

pub(crate) fn resize_bilinear_backward(in_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (h_out, w_out) = (grad_out.shape()[1], grad_out.shape()[2]);
    if (h, w) == (h_out, w_out) {
        return grad_out.clone();
    }
    let ty = resize_taps(h, h_out);
    let tx = resize_taps(w, w_out);
    let mut d = vec![0.0; c * h * w];
    let go = grad_out.data();
    let mut i = 0;
    for ch in 0..c {
        let df = &mut d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, ay) in &ty {
            for &(x0, x1, ax) in &tx {
                let g = go[i];
                i += 1;
                df[y0 * w + x0] += g * (1.0 - ax) * (1.0 - ay);
                df[y0 * w + x1] += g * ax * (1.0 - ay);
                df[y1 * w + x0] += g * (1.0 - ax) * ay;
                df[y1 * w + x1] += g * ax * ay;
            }
        }
    }
    Tensor::new(in_shape, d).expect("shape")
}

/// 2×2 average pooling with stride 2. Spatial sizes must be even.
pub fn avg_pool2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(input, "avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("avg_pool2 needs even size, got {h}×{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let f = input.channel(ch);
        for y in 0..ho {
            for x in 0..wo {
                let i = 2 * y * w + 2 * x;
                out.push(0.25 * (f[i] + f[i + 1] + f[i + w] + f[i + w + 1]));
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

pub(crate) fn avg_pool2_backward(in_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (h / 2, w / 2);
    let mut d = vec![0.0; c * h * w];
    let go = grad_out.data();
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let g = 0.25 * go[(ch * ho + y) * wo + x];
                let i = ch * h * w + 2 * y * w + 2 * x;
                d[i] += g;
                d[i + 1] += g;
                d[i + w] += g;
                d[i + w + 1] += g;
            }
        }
    }
    Tensor::new(in_shape, d).expect("shape")
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(input, "upsample2")?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let f = input.channel(ch);
        for y in 0..ho {
            for x in 0..wo {
                out.push(f[(y / 2) * w + x / 2]);
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

pub(crate) fn upsample2_backward(in_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let wo = 2 * w;
    let mut d = vec![0.0; c * h * w];
    for (i, &g) in grad_out.data().iter().enumerate() {
        let x = i % wo;
        let y = (i / wo) % (2 * h);
        let ch = i / (wo * 2 * h);
        d[(ch * h + y / 2) * w + x / 2] += g;
    }
    Tensor::new(in_shape, d).expect("shape")
}

/// Softmax across the leading axis, independently at every trailing position.
pub fn softmax_leading(input: &Tensor) -> Result<Tensor> {
    if input.rank() < 1 {
        return Err(Error::Shape("softmax of a scalar".into()));
    }
    let n = input.shape()[0];
    let plane = input.len() / n.max(1);
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for p in 0..plane {
        let m = (0..n).map(|i| x[i * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for i in 0..n {
            let e = (x[i * plane + p] - m).exp();
            out[i * plane + p] = e;
            s += e;
        }
        for i in 0..n {
            out[i * plane + p] /= s;
        }
    }
    Tensor::new(input.shape(), out)
}

/// Softmax over the trailing `H×W` plane of each leading slice, computed on
/// `input / temperature`.
pub fn spatial_softmax(input: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if input.rank() < 1 || input.is_empty() {
        return Err(Error::Shape("spatial softmax of an empty tensor".into()));
    }
    let n = input.shape()[0];
    let plane = input.len() / n;
    let mut out = Vec::with_capacity(input.len());
    for k in 0..n {
        let row = &input.data()[k * plane..(k + 1) * plane];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&v| ((v - m) / temperature).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(input.shape(), out)
}

/// Expected pixel coordinates `(x, y)` under non-negative weights over an
/// `H×W` grid; the weights need not be normalized.
pub(crate) fn expected_pixel(weights: &[f64], h: usize, w: usize) -> (f64, f64) {
    let (mut ex, mut ey, mut total) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let p = weights[y * w + x];
            ex += p * x as f64;
            ey += p * y as f64;
            total += p;
        }
    }
    (ex / total, ey / total)
}

/// Soft-argmax of a single `H×W` heatmap, returned in pixel coordinates.
pub fn soft_argmax(heatmap: &Tensor, temperature: f64) -> Result<(f64, f64)> {
    let (h, w) = match *heatmap.shape() {
        [h, w] => (h, w),
        ref s => return Err(Error::Shape(format!("soft_argmax expects H×W, got {s:?}"))),
    };
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let m = heatmap.max();
    let weights: Vec<f64> = heatmap.data().iter().map(|&v| ((v - m) / temperature).exp()).collect();
    let (x, y) = expected_pixel(&weights, h, w);
    Ok((x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(&[1, 3, 3], |ix| (ix[1] * 3 + ix[2]) as f64);
        let k = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &k, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_window_counts() {
        let x = Tensor::ones(&[1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.get(&[0, 1, 1]), 9.0);
        assert_eq!(y.get(&[0, 0, 0]), 4.0);
        assert_eq!(y.get(&[0, 0, 1]), 6.0);
    }

    #[test]
    fn conv_output_size_with_stride() {
        let x = Tensor::zeros(&[2, 7, 6]);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let y = conv2d(&x, &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 4, 3]);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros(&[2, 4, 4]);
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), None, 1, 1),
            Err(Error::Shape(_))
        ));
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), None, 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), Some(&Tensor::zeros(&[2])), 1, 1).is_err());
    }

    #[test]
    fn warp_zero_flow_is_exact() {
        let f = Tensor::from_fn(&[2, 5, 4], |ix| ((ix[0] + 1) * (ix[1] * 7 + ix[2] * 3)) as f64 * 0.37);
        assert_eq!(warp(&f, &Tensor::zeros(&[2, 5, 4])).unwrap(), f);
    }

    #[test]
    fn warp_clamps_outside() {
        let f = Tensor::from_fn(&[1, 3, 3], |ix| ix[2] as f64);
        let flow = Tensor::from_fn(&[2, 3, 3], |ix| if ix[0] == 0 { 10.0 } else { 0.0 });
        let out = warp(&f, &flow).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn resize_corners_and_constant() {
        let f = Tensor::from_fn(&[1, 4, 4], |ix| (ix[1] * 4 + ix[2]) as f64);
        let r = resize_bilinear(&f, 7, 7).unwrap();
        assert_eq!(r.get(&[0, 0, 0]), 0.0);
        assert_eq!(r.get(&[0, 6, 6]), 15.0);
        let c = resize_bilinear(&Tensor::full(&[1, 5, 3], 0.3), 9, 11).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn soft_argmax_cases() {
        let uniform = Tensor::zeros(&[5, 5]);
        assert_eq!(soft_argmax(&uniform, 1.0).unwrap(), (2.0, 2.0));

        let mut peaks = Tensor::zeros(&[5, 5]);
        peaks.set(&[0, 0], 5.0);
        peaks.set(&[4, 4], 5.0);
        let (x, y) = soft_argmax(&peaks, 0.01).unwrap();
        assert!((x - 2.0).abs() < 1e-12 && (y - 2.0).abs() < 1e-12);

        let mut one_hot = Tensor::zeros(&[32, 24]);
        one_hot.set(&[20, 10], 1.0);
        let (x, y) = soft_argmax(&one_hot, 0.01).unwrap();
        assert!((x - 10.0).abs() < 1e-6 && (y - 20.0).abs() < 1e-6);

        assert!(soft_argmax(&uniform, 0.0).is_err());
    }
}
