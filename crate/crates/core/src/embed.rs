//! The trainable embedding network: a stack of bias-free 3x3 conv blocks
//! with ReLU between layers and a linear final layer. The first two layers
//! use stride 2, so feature maps come out at 1/4 of the image resolution
//! (1/2 for a single-layer net).

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{conv2d, conv2d_backward, relu, relu_backward, Tensor};

/// Architecture description: output channel widths per layer plus kernel
/// size and dilation shared by all layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedSpec {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub dilation: usize,
}

impl EmbedSpec {
    pub fn new(widths: Vec<usize>) -> Self {
        EmbedSpec {
            in_channels: 3,
            widths,
            kernel: 3,
            dilation: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::invalid("embed spec: needs at least one layer".to_string()));
        }
        if self.widths.iter().any(|&w| w == 0) || self.in_channels == 0 {
            return Err(Error::invalid("embed spec: channel widths must be >= 1".to_string()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::invalid(format!(
                "embed spec: kernel size must be odd and >= 1, got {}",
                self.kernel
            )));
        }
        if self.dilation == 0 {
            return Err(Error::invalid("embed spec: dilation must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Total spatial reduction: the first two layers have stride 2.
    pub fn downsample(&self) -> usize {
        1 << self.n_layers().min(2)
    }

    pub fn layer_stride(&self, layer: usize) -> usize {
        if layer < 2 {
            2
        } else {
            1
        }
    }

    pub fn layer_in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.in_channels
        } else {
            self.widths[layer - 1]
        }
    }

    /// Padding keeping spatial dims at exactly extent/stride.
    fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }
}

/// Trainable parameters: one bias-free kernel per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams {
    spec: EmbedSpec,
    layers: Vec<Tensor>,
}

/// Per-layer kernel gradients, shape-matched to [`EmbedParams`].
#[derive(Debug, Clone)]
pub struct EmbedGrads {
    pub kernels: Vec<Tensor>,
}

impl EmbedGrads {
    pub fn zeros_like(params: &EmbedParams) -> Self {
        EmbedGrads {
            kernels: params
                .layers
                .iter()
                .map(|k| Tensor::zeros(k.shape().to_vec()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &EmbedGrads) -> Result<()> {
        if self.kernels.len() != other.kernels.len() {
            return Err(Error::invalid("EmbedGrads: layer count mismatch".to_string()));
        }
        for (a, b) in self.kernels.iter_mut().zip(&other.kernels) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for k in &mut self.kernels {
            for v in k.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Intermediates retained by a forward pass for the matching backward.
#[derive(Debug, Clone)]
pub struct EmbedCache {
    /// Input to each conv layer (activations after the previous ReLU).
    inputs: Vec<Tensor>,
    /// Conv outputs before ReLU, for all layers except the last.
    pre_act: Vec<Tensor>,
    out_shape: Vec<usize>,
}

impl EmbedCache {
    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }
}

/// Spreads a compact kernel onto the dilated lattice.
fn dilate_kernel(kernel: &Tensor, dilation: usize) -> Tensor {
    if dilation == 1 {
        return kernel.clone();
    }
    let (kh, kw, cin, cout) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let eh = dilation * (kh - 1) + 1;
    let ew = dilation * (kw - 1) + 1;
    let mut out = Tensor::zeros(vec![eh, ew, cin, cout]);
    for ky in 0..kh {
        for kx in 0..kw {
            for ci in 0..cin {
                for co in 0..cout {
                    let src = ((ky * kw + kx) * cin + ci) * cout + co;
                    let dst = (((ky * dilation) * ew + kx * dilation) * cin + ci) * cout + co;
                    out.data_mut()[dst] = kernel.data()[src];
                }
            }
        }
    }
    out
}

/// Gathers a dilated-kernel gradient back onto the compact lattice.
fn compact_kernel_grad(grad: &Tensor, kh: usize, kw: usize, dilation: usize) -> Tensor {
    if dilation == 1 {
        return grad.clone();
    }
    let (ew, cin, cout) = (grad.shape()[1], grad.shape()[2], grad.shape()[3]);
    let mut out = Tensor::zeros(vec![kh, kw, cin, cout]);
    for ky in 0..kh {
        for kx in 0..kw {
            for ci in 0..cin {
                for co in 0..cout {
                    let src = (((ky * dilation) * ew + kx * dilation) * cin + ci) * cout + co;
                    let dst = ((ky * kw + kx) * cin + ci) * cout + co;
                    out.data_mut()[dst] = grad.data()[src];
                }
            }
        }
    }
    out
}

impl EmbedParams {
    /// Deterministic fan-in-scaled uniform initialization: every entry is
    /// drawn from [-sqrt(6/fan_in), sqrt(6/fan_in)) keyed on `seed`.
    pub fn init(spec: EmbedSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed).derive(0x454d_4245);
        let mut layers = Vec::with_capacity(spec.n_layers());
        for layer in 0..spec.n_layers() {
            let cin = spec.layer_in_channels(layer);
            let cout = spec.widths[layer];
            let fan_in = (spec.kernel * spec.kernel * cin) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let n = spec.kernel * spec.kernel * cin * cout;
            let data: Vec<f64> = (0..n).map(|_| rng.range_f64(-bound, bound)).collect();
            layers.push(Tensor::new(vec![spec.kernel, spec.kernel, cin, cout], data)?);
        }
        Ok(EmbedParams { spec, layers })
    }

    pub fn from_layers(spec: EmbedSpec, layers: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.n_layers() {
            return Err(Error::invalid("embed params: layer count mismatch".to_string()));
        }
        for (i, k) in layers.iter().enumerate() {
            let want = vec![
                spec.kernel,
                spec.kernel,
                spec.layer_in_channels(i),
                spec.widths[i],
            ];
            if k.shape() != want {
                return Err(Error::ShapeMismatch {
                    context: "embed params layer",
                    expected: want,
                    got: k.shape().to_vec(),
                });
            }
            k.assert_finite("embed params")?;
        }
        Ok(EmbedParams { spec, layers })
    }

    pub fn spec(&self) -> &EmbedSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Tensor] {
        &mut self.layers
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels()
    }

    pub fn downsample(&self) -> usize {
        self.spec.downsample()
    }

    /// Maps an HxWx3 image to an (H/d)x(W/d)xC feature map.
    pub fn forward(&self, img: &Tensor) -> Result<(Tensor, EmbedCache)> {
        if img.shape().len() != 3 || img.shape()[2] != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                context: "embed forward input",
                expected: vec![self.spec.in_channels],
                got: img.shape().to_vec(),
            });
        }
        let d = self.downsample();
        if img.shape()[0] % d != 0 || img.shape()[1] % d != 0 {
            return Err(Error::invalid(format!(
                "embed forward: image dims {}x{} not divisible by downsample factor {d}",
                img.shape()[0],
                img.shape()[1]
            )));
        }
        let pad = self.spec.pad();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_act = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut x = img.clone();
        let last = self.layers.len() - 1;
        for (i, kernel) in self.layers.iter().enumerate() {
            let eff = dilate_kernel(kernel, self.spec.dilation);
            let y = conv2d(&x, &eff, self.spec.layer_stride(i), pad)?;
            inputs.push(x);
            if i < last {
                pre_act.push(y.clone());
                x = relu(&y);
            } else {
                x = y;
            }
        }
        let out_shape = x.shape().to_vec();
        Ok((
            x,
            EmbedCache {
                inputs,
                pre_act,
                out_shape,
            },
        ))
    }

    /// Exact gradient of `<grad_feat, forward(img)>` with respect to all
    /// layer kernels.
    pub fn backward(&self, cache: &EmbedCache, grad_feat: &Tensor) -> Result<EmbedGrads> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::invalid(
                "embed backward: cache does not match network depth".to_string(),
            ));
        }
        if grad_feat.shape() != cache.out_shape {
            return Err(Error::ShapeMismatch {
                context: "embed backward grad_feat",
                expected: cache.out_shape.clone(),
                got: grad_feat.shape().to_vec(),
            });
        }
        for (i, input) in cache.inputs.iter().enumerate() {
            if input.shape()[2] != self.spec.layer_in_channels(i) {
                return Err(Error::invalid(
                    "embed backward: cache was built by a different spec".to_string(),
                ));
            }
        }
        let pad = self.spec.pad();
        let mut grads = vec![Tensor::zeros(vec![0]); self.layers.len()];
        let mut g = grad_feat.clone();
        for i in (0..self.layers.len()).rev() {
            let eff = dilate_kernel(&self.layers[i], self.spec.dilation);
            let (gin, gk) =
                conv2d_backward(&cache.inputs[i], &eff, &g, self.spec.layer_stride(i), pad)?;
            grads[i] = compact_kernel_grad(&gk, self.spec.kernel, self.spec.kernel, self.spec.dilation);
            if i > 0 {
                g = relu_backward(&cache.pre_act[i - 1], &gin)?;
            }
        }
        Ok(EmbedGrads { kernels: grads })
    }
}
