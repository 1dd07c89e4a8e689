//! Dense f64 tensors and the differentiable kernels the pipeline builds on.
//!
//! All operations are pure functions over value-semantic inputs. Reductions
//! run in a fixed row-major order so results are bit-reproducible; every
//! backward pass is the exact analytic gradient of its forward.

use crate::error::{Error, Result};

/// Row-major dense array of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                expected: vec![n],
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat index for a rank-3 tensor laid out [d0][d1][d2].
    #[inline]
    pub fn idx3(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    pub fn assert_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }

    pub fn scaled(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "Tensor::add_assign",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn add_scaled_assign(&mut self, other: &Tensor, factor: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "Tensor::add_scaled_assign",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * factor;
        }
        Ok(())
    }
}

/// A value together with a gradient of identical shape.
#[derive(Debug, Clone)]
pub struct GradPair {
    pub value: Tensor,
    pub grad: Tensor,
}

impl GradPair {
    pub fn new(value: Tensor, grad: Tensor) -> Result<Self> {
        if value.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                context: "GradPair::new",
                expected: value.shape().to_vec(),
                got: grad.shape().to_vec(),
            });
        }
        Ok(GradPair { value, grad })
    }

    /// Pairs `value` with an all-zero gradient.
    pub fn zero_grad(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        GradPair { value, grad }
    }
}

fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = n + 2 * pad;
    if span < k {
        return Err(Error::invalid(format!(
            "conv2d: padded input extent {span} smaller than kernel extent {k}"
        )));
    }
    Ok((span - k) / stride + 1)
}

fn check_conv_args(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<()> {
    if input.shape().len() != 3 {
        return Err(Error::invalid(format!(
            "conv2d: input must be HxWxC, got rank {}",
            input.shape().len()
        )));
    }
    if kernel.shape().len() != 4 {
        return Err(Error::invalid(format!(
            "conv2d: kernel must be khxkwxCinxCout, got rank {}",
            kernel.shape().len()
        )));
    }
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(format!(
            "conv2d: kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be >= 1".to_string()));
    }
    if input.shape()[2] != kernel.shape()[2] {
        return Err(Error::ShapeMismatch {
            context: "conv2d input channels vs kernel Cin",
            expected: vec![kernel.shape()[2]],
            got: vec![input.shape()[2]],
        });
    }
    Ok(())
}

/// 2-D cross-correlation of an HxWxCin map with a khxkwxCinxCout kernel.
///
/// Accumulation order per output element is kernel row-major (ky, kx) with
/// the input channel innermost.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    check_conv_args(input, kernel, stride)?;
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    let oh = conv_out_dim(h, kh, stride, pad)?;
    let ow = conv_out_dim(w, kw, stride, pad)?;

    let mut out = Tensor::zeros(vec![oh, ow, cout]);
    let idata = input.data();
    let kdata = kernel.data();
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = 0.0;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = (iy as usize * w + ix as usize) * cin;
                        let kbase = ((ky * kw + kx) * cin) * cout + co;
                        for ci in 0..cin {
                            acc += idata[ibase + ci] * kdata[kbase + ci * cout];
                        }
                    }
                }
                let o = (oy * ow + ox) * cout + co;
                out.data_mut()[o] = acc;
            }
        }
    }
    Ok(out)
}

/// Exact gradients of `sum(grad_out * conv2d(input, kernel))`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    check_conv_args(input, kernel, stride)?;
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    let oh = conv_out_dim(h, kh, stride, pad)?;
    let ow = conv_out_dim(w, kw, stride, pad)?;
    if grad_out.shape() != [oh, ow, cout] {
        return Err(Error::ShapeMismatch {
            context: "conv2d_backward grad_out",
            expected: vec![oh, ow, cout],
            got: grad_out.shape().to_vec(),
        });
    }

    let mut grad_input = Tensor::zeros(input.shape().to_vec());
    let mut grad_kernel = Tensor::zeros(kernel.shape().to_vec());
    let idata = input.data();
    let kdata = kernel.data();
    let gdata = grad_out.data();
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let g = gdata[(oy * ow + ox) * cout + co];
                if g == 0.0 {
                    continue;
                }
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = (iy as usize * w + ix as usize) * cin;
                        let kbase = ((ky * kw + kx) * cin) * cout + co;
                        for ci in 0..cin {
                            grad_input.data_mut()[ibase + ci] += g * kdata[kbase + ci * cout];
                            grad_kernel.data_mut()[kbase + ci * cout] += g * idata[ibase + ci];
                        }
                    }
                }
            }
        }
    }
    Ok((grad_input, grad_kernel))
}

/// Elementwise max(x, 0).
pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

/// Backward of relu: passes the gradient where x > 0, zero elsewhere.
/// The subgradient at x == 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape != grad_out.shape {
        return Err(Error::ShapeMismatch {
            context: "relu_backward",
            expected: x.shape.clone(),
            got: grad_out.shape.clone(),
        });
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// Bilinear resize of an HxWxC map (align-corners-false, sampling at pixel
/// centers). Unchanged size is an exact identity.
pub fn resize_bilinear(x: &Tensor, h2: usize, w2: usize) -> Result<Tensor> {
    if x.shape().len() != 3 {
        return Err(Error::invalid("resize_bilinear: input must be HxWxC".to_string()));
    }
    if h2 == 0 || w2 == 0 {
        return Err(Error::invalid("resize_bilinear: target dims must be >= 1".to_string()));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h2 == h && w2 == w {
        return Ok(x.clone());
    }
    let sy_scale = h as f64 / h2 as f64;
    let sx_scale = w as f64 / w2 as f64;
    let mut out = Tensor::zeros(vec![h2, w2, c]);
    for oy in 0..h2 {
        let sy = ((oy as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..w2 {
            let sx = ((ox as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let v00 = x.data[x.idx3(y0, x0, ch)];
                let v01 = x.data[x.idx3(y0, x1, ch)];
                let v10 = x.data[x.idx3(y1, x0, ch)];
                let v11 = x.data[x.idx3(y1, x1, ch)];
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                let o = (oy * w2 + ox) * c + ch;
                out.data_mut()[o] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Softmax over the last axis with max-subtraction for stability.
pub fn softmax_rows(scores: &Tensor) -> Result<Tensor> {
    let rank = scores.shape().len();
    if rank == 0 {
        return Err(Error::invalid("softmax_rows: scalar input".to_string()));
    }
    let k = scores.shape()[rank - 1];
    if k == 0 {
        return Err(Error::invalid("softmax_rows: empty last axis".to_string()));
    }
    let mut out = Tensor::zeros(scores.shape().to_vec());
    for (row_in, row_out) in scores
        .data
        .chunks_exact(k)
        .zip(out.data.chunks_exact_mut(k))
    {
        let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}
