//! Convolution kernels: im2col/col2im plus a row-major GEMM.

use super::{Shape, Tensor4};
use crate::error::{Error, Result};

/// Output spatial size of a cross-correlation, or `None` when it would be empty.
pub fn conv2d_output_dims(
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
) -> Option<(usize, usize)> {
    if stride == 0 || kh == 0 || kw == 0 {
        return None;
    }
    let ph = h + 2 * padding;
    let pw = w + 2 * padding;
    if ph < kh || pw < kw {
        return None;
    }
    Some(((ph - kh) / stride + 1, (pw - kw) / stride + 1))
}

/// Output spatial size of a transpose convolution: `(in - 1) * s - 2p + k`.
pub fn transpose_conv2d_output_dims(
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
) -> Option<(usize, usize)> {
    if stride == 0 || h == 0 || w == 0 {
        return None;
    }
    let oh = ((h - 1) * stride + kh).checked_sub(2 * padding)?;
    let ow = ((w - 1) * stride + kw).checked_sub(2 * padding)?;
    (oh > 0 && ow > 0).then_some((oh, ow))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `(C, H, W)` image into a `(C*kh*kw, out_h*out_w)` matrix.
pub(crate) fn im2col(image: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let n = g.cols();
    debug_assert_eq!(cols.len(), g.rows() * n);
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + j) as isize - pad;
                        *v = if x < 0 || x >= g.width as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, image: &mut [f64]) {
    let n = g.cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - pad;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + j) as isize - pad;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = beta * c + op(a) * op(b)` for row-major matrices, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are asserted above and the strides describe
    // exactly those row-major (or transposed) layouts.
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

fn kernel_dims(weight: Shape) -> (usize, usize) {
    (weight.height, weight.width)
}

/// Validates shapes and returns the geometry of the convolution's input side.
pub(crate) fn conv2d_geometry(
    input: Shape,
    weight: Shape,
    bias: Option<Shape>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be >= 1"));
    }
    if weight.channels != input.channels {
        return Err(Error::shape(
            "conv2d",
            format!("weight in_ch {} (input {input})", input.channels),
            format!("weight {weight}"),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != weight.batch {
            return Err(Error::shape(
                "conv2d",
                format!("bias with {} elements", weight.batch),
                format!("bias {b}"),
            ));
        }
    }
    let (kh, kw) = kernel_dims(weight);
    let (out_h, out_w) = conv2d_output_dims((input.height, input.width), (kh, kw), stride, padding)
        .ok_or_else(|| Error::InvalidShape {
            op: "conv2d",
            detail: format!(
                "input {input} with kernel {kh}x{kw}, stride {stride}, padding {padding} gives an empty output"
            ),
        })?;
    Ok(ConvGeometry {
        channels: input.channels,
        height: input.height,
        width: input.width,
        kh,
        kw,
        stride,
        padding,
        out_h,
        out_w,
    })
}

/// Geometry of the equivalent forward convolution whose input is the
/// transpose convolution's output.
pub(crate) fn transpose_geometry(
    input: Shape,
    weight: Shape,
    bias: Option<Shape>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    if stride == 0 {
        return Err(Error::invalid("transpose_conv2d: stride must be >= 1"));
    }
    if weight.batch != input.channels {
        return Err(Error::shape(
            "transpose_conv2d",
            format!("weight in_ch {} (input {input})", input.channels),
            format!("weight {weight}"),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != weight.channels {
            return Err(Error::shape(
                "transpose_conv2d",
                format!("bias with {} elements", weight.channels),
                format!("bias {b}"),
            ));
        }
    }
    let (kh, kw) = kernel_dims(weight);
    let (oh, ow) =
        transpose_conv2d_output_dims((input.height, input.width), (kh, kw), stride, padding)
            .ok_or_else(|| Error::InvalidShape {
                op: "transpose_conv2d",
                detail: format!(
                    "input {input} with kernel {kh}x{kw}, stride {stride}, padding {padding} gives an empty output"
                ),
            })?;
    Ok(ConvGeometry {
        channels: weight.channels,
        height: oh,
        width: ow,
        kh,
        kw,
        stride,
        padding,
        out_h: input.height,
        out_w: input.width,
    })
}

pub(crate) fn conv2d_forward(
    input: &Tensor4,
    weight: &Tensor4,
    bias: Option<&Tensor4>,
    g: &ConvGeometry,
) -> Tensor4 {
    let s = input.shape();
    let out_c = weight.shape().batch;
    let n = g.cols();
    let mut out = Tensor4::zeros(Shape::new(s.batch, out_c, g.out_h, g.out_w));
    let mut cols = vec![0.0; g.rows() * n];
    let item = out_c * n;
    for b in 0..s.batch {
        im2col(input.item_slice(b), g, &mut cols);
        let dst = &mut out.data_mut()[b * item..(b + 1) * item];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(n).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        gemm(out_c, g.rows(), n, weight.data(), false, &cols, false, 1.0, dst);
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)` for a forward convolution.
pub(crate) fn conv2d_backward(
    input: &Tensor4,
    weight: &Tensor4,
    grad_out: &Tensor4,
    g: &ConvGeometry,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor4>, Option<Tensor4>, Tensor4) {
    let s = input.shape();
    let out_c = weight.shape().batch;
    let n = g.cols();
    let rows = g.rows();
    let mut d_input = need_input.then(|| Tensor4::zeros(s));
    let mut d_weight = need_weight.then(|| Tensor4::zeros(weight.shape()));
    let mut d_bias = Tensor4::zeros(Shape::new(1, out_c, 1, 1));
    let mut cols = vec![0.0; rows * n];
    for b in 0..s.batch {
        let gy = grad_out.item_slice(b);
        for (co, chunk) in gy.chunks(n).enumerate() {
            d_bias.data_mut()[co] += chunk.iter().sum::<f64>();
        }
        if let Some(dw) = d_weight.as_mut() {
            im2col(input.item_slice(b), g, &mut cols);
            gemm(out_c, n, rows, gy, false, &cols, true, 1.0, dw.data_mut());
        }
        if let Some(dx) = d_input.as_mut() {
            gemm(rows, out_c, n, weight.data(), true, gy, false, 0.0, &mut cols);
            let item = s.item_len();
            col2im(&cols, g, &mut dx.data_mut()[b * item..(b + 1) * item]);
        }
    }
    (d_input, d_weight, d_bias)
}

pub(crate) fn transpose_conv2d_forward(
    input: &Tensor4,
    weight: &Tensor4,
    bias: Option<&Tensor4>,
    g: &ConvGeometry,
) -> Tensor4 {
    let s = input.shape();
    let in_c = s.channels;
    let n = g.cols();
    let rows = g.rows();
    let out_shape = Shape::new(s.batch, g.channels, g.height, g.width);
    let mut out = Tensor4::zeros(out_shape);
    let mut cols = vec![0.0; rows * n];
    let item = out_shape.item_len();
    for b in 0..s.batch {
        gemm(rows, in_c, n, weight.data(), true, input.item_slice(b), false, 0.0, &mut cols);
        let dst = &mut out.data_mut()[b * item..(b + 1) * item];
        col2im(&cols, g, dst);
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(g.height * g.width).enumerate() {
                let bv = bias.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) fn transpose_conv2d_backward(
    input: &Tensor4,
    weight: &Tensor4,
    grad_out: &Tensor4,
    g: &ConvGeometry,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor4>, Option<Tensor4>, Tensor4) {
    let s = input.shape();
    let in_c = s.channels;
    let n = g.cols();
    let rows = g.rows();
    let mut d_input = need_input.then(|| Tensor4::zeros(s));
    let mut d_weight = need_weight.then(|| Tensor4::zeros(weight.shape()));
    let mut d_bias = Tensor4::zeros(Shape::new(1, g.channels, 1, 1));
    let mut cols = vec![0.0; rows * n];
    let plane = g.height * g.width;
    for b in 0..s.batch {
        let gy = grad_out.item_slice(b);
        for (co, chunk) in gy.chunks(plane).enumerate() {
            d_bias.data_mut()[co] += chunk.iter().sum::<f64>();
        }
        im2col(gy, g, &mut cols);
        if let Some(dx) = d_input.as_mut() {
            let item = s.item_len();
            gemm(
                in_c,
                rows,
                n,
                weight.data(),
                false,
                &cols,
                false,
                0.0,
                &mut dx.data_mut()[b * item..(b + 1) * item],
            );
        }
        if let Some(dw) = d_weight.as_mut() {
            gemm(in_c, n, rows, input.item_slice(b), false, &cols, true, 1.0, dw.data_mut());
        }
    }
    (d_input, d_weight, d_bias)
}
