//! Individual layers: convolution, ReLU, max/average pooling, fully
//! connected, softmax, batch normalization, and gradient reversal. Each op
//! comes as a forward and an explicit analytic backward.
//!
//! Single-sample ops take `[C, H, W]` (or `[D]`) tensors; batching across
//! samples is the network's job, except batch normalization which is
//! inherently batch-wise.

use super::NeuralError;
use crate::tensor::{conv_output_shape, Shape2D, Tensor};

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// A bank of square convolution kernels plus per-kernel bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    /// `[k_out, k_in, n, n]`
    pub kernels: Tensor,
    /// `[k_out]`
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn new(
        kernels: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Self, NeuralError> {
        let ks = kernels.shape();
        if ks.len() != 4 || ks[2] != ks[3] {
            return Err(NeuralError::Config(format!(
                "conv kernels must be [k_out, k_in, n, n], got {ks:?}"
            )));
        }
        if bias.rank() != 1 || bias.shape()[0] != ks[0] {
            return Err(NeuralError::Config(format!(
                "conv bias must be [{}], got {:?}",
                ks[0],
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(NeuralError::Config("conv stride must be >= 1".into()));
        }
        Ok(ConvLayer {
            kernels,
            bias,
            stride,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }

    /// Exact trainable parameter count: k_out * (n^2 * k_in + 1).
    pub fn param_count(&self) -> usize {
        self.out_channels() * (self.kernel_size() * self.kernel_size() * self.in_channels() + 1)
    }
}

/// Raw convolution kernel loop over flat slices; shared by the tensor-level
/// op and the batched network forward.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward_into(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    kernels: &[f64],
    bias: &[f64],
    (cout, n, stride, pad): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    out: &mut [f64],
) {
    for co in 0..cout {
        let b = bias[co];
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            let ky_lo = (-iy0).max(0) as usize;
            let ky_hi = n.min((h as isize - iy0).max(0) as usize);
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let kx_lo = (-ix0).max(0) as usize;
                let kx_hi = n.min((w as isize - ix0).max(0) as usize);
                let mut acc = b;
                for ci in 0..cin {
                    let xc = ci * h * w;
                    let kc = ((co * cin + ci) * n) * n;
                    for ky in ky_lo..ky_hi {
                        let xrow = xc + (iy0 + ky as isize) as usize * w;
                        let krow = kc + ky * n;
                        for kx in kx_lo..kx_hi {
                            acc += x[xrow + (ix0 + kx as isize) as usize] * kernels[krow + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_into(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    kernels: &[f64],
    (cout, n, stride, pad): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    grad_out: &[f64],
    grad_x: &mut [f64],
    grad_k: &mut [f64],
    grad_b: &mut [f64],
) {
    for co in 0..cout {
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            let ky_lo = (-iy0).max(0) as usize;
            let ky_hi = n.min((h as isize - iy0).max(0) as usize);
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let kx_lo = (-ix0).max(0) as usize;
                let kx_hi = n.min((w as isize - ix0).max(0) as usize);
                let g = grad_out[(co * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                grad_b[co] += g;
                for ci in 0..cin {
                    let xc = ci * h * w;
                    let kc = ((co * cin + ci) * n) * n;
                    for ky in ky_lo..ky_hi {
                        let xrow = xc + (iy0 + ky as isize) as usize * w;
                        let krow = kc + ky * n;
                        for kx in kx_lo..kx_hi {
                            let xi = xrow + (ix0 + kx as isize) as usize;
                            grad_k[krow + kx] += g * x[xi];
                            grad_x[xi] += g * kernels[krow + kx];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry(
    x: &Tensor,
    layer: &ConvLayer,
) -> Result<(usize, usize, usize, usize, usize), NeuralError> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(NeuralError::Shape(format!(
            "conv input must be [channels, height, width], got {xs:?}"
        )));
    }
    if xs[0] != layer.in_channels() {
        return Err(NeuralError::Config(format!(
            "conv expects {} input channels, got {}",
            layer.in_channels(),
            xs[0]
        )));
    }
    let out = conv_output_shape(
        Shape2D::new(xs[1], xs[2]),
        layer.kernel_size(),
        layer.stride,
        layer.pad,
    )?;
    Ok((xs[1], xs[2], out.height, out.width, layer.out_channels()))
}

/// Cross-correlate the zero-padded input with every kernel and add bias:
/// one output channel per kernel.
pub fn conv_forward(x: &Tensor, layer: &ConvLayer) -> Result<Tensor, NeuralError> {
    let (h, w, oh, ow, cout) = conv_geometry(x, layer)?;
    let mut out = vec![0.0; cout * oh * ow];
    conv_forward_into(
        x.data(),
        (layer.in_channels(), h, w),
        layer.kernels.data(),
        layer.bias.data(),
        (cout, layer.kernel_size(), layer.stride, layer.pad),
        (oh, ow),
        &mut out,
    );
    Ok(Tensor::new(&[cout, oh, ow], out)?)
}

/// Analytic gradients of [`conv_forward`] with respect to the input, the
/// kernels, and the bias.
pub fn conv_backward(
    x: &Tensor,
    layer: &ConvLayer,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NeuralError> {
    let (h, w, oh, ow, cout) = conv_geometry(x, layer)?;
    if grad_out.shape() != [cout, oh, ow] {
        return Err(NeuralError::Shape(format!(
            "conv grad_out must be [{cout}, {oh}, {ow}], got {:?}",
            grad_out.shape()
        )));
    }
    let mut grad_x = vec![0.0; x.len()];
    let mut grad_k = vec![0.0; layer.kernels.len()];
    let mut grad_b = vec![0.0; layer.bias.len()];
    conv_backward_into(
        x.data(),
        (layer.in_channels(), h, w),
        layer.kernels.data(),
        (cout, layer.kernel_size(), layer.stride, layer.pad),
        (oh, ow),
        grad_out.data(),
        &mut grad_x,
        &mut grad_k,
        &mut grad_b,
    );
    Ok((
        Tensor::new(x.shape(), grad_x)?,
        Tensor::new(layer.kernels.shape(), grad_k)?,
        Tensor::new(layer.bias.shape(), grad_b)?,
    ))
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

/// f(x) = x for x > 0, else 0.
pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Pass the gradient where the input was strictly positive. The gradient at
/// exactly 0 is defined as 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor, NeuralError> {
    Ok(x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })?)
}

// ---------------------------------------------------------------------------
// Pooling (non-overlapping 2x2, stride 2)
// ---------------------------------------------------------------------------

const POOL: usize = 2;

fn pool_geometry(x: &Tensor) -> Result<(usize, usize, usize), NeuralError> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(NeuralError::Shape(format!(
            "pool input must be [channels, height, width], got {xs:?}"
        )));
    }
    if !xs[1].is_multiple_of(POOL) || !xs[2].is_multiple_of(POOL) {
        return Err(NeuralError::Geometry(format!(
            "pool needs even spatial dims, got {}x{}",
            xs[1], xs[2]
        )));
    }
    Ok((xs[0], xs[1], xs[2]))
}

/// Max over non-overlapping 2x2 windows. Also returns, per output element,
/// the flat index of the winning input element; ties go to the first element
/// in row-major window order, and the backward pass routes the gradient to
/// exactly that element.
pub fn maxpool_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>), NeuralError> {
    let (c, h, w) = pool_geometry(x)?;
    let (oh, ow) = (h / POOL, w / POOL);
    let data = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (ci * h + oy * POOL) * w + ox * POOL;
                let mut best = data[best_idx];
                for wy in 0..POOL {
                    for wx in 0..POOL {
                        let idx = (ci * h + oy * POOL + wy) * w + ox * POOL + wx;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, argmax))
}

/// Route each output gradient to the recorded argmax input element.
pub fn maxpool_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor, NeuralError> {
    if argmax.len() != grad_out.len() {
        return Err(NeuralError::Shape(format!(
            "argmax has {} entries, grad_out has {}",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut grad_x = Tensor::zeros(input_shape).into_data();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        grad_x[idx] += g;
    }
    Ok(Tensor::new(input_shape, grad_x)?)
}

/// Mean over non-overlapping 2x2 windows.
pub fn avgpool_forward(x: &Tensor) -> Result<Tensor, NeuralError> {
    let (c, h, w) = pool_geometry(x)?;
    let (oh, ow) = (h / POOL, w / POOL);
    let data = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for wy in 0..POOL {
                    for wx in 0..POOL {
                        acc += data[(ci * h + oy * POOL + wy) * w + ox * POOL + wx];
                    }
                }
                out.push(acc / (POOL * POOL) as f64);
            }
        }
    }
    Ok(Tensor::new(&[c, oh, ow], out)?)
}

/// Distribute each output gradient evenly over its 2x2 window.
pub fn avgpool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor, NeuralError> {
    if input_shape.len() != 3 {
        return Err(NeuralError::Shape(format!(
            "pool input shape must have rank 3, got {input_shape:?}"
        )));
    }
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (h / POOL, w / POOL);
    if grad_out.shape() != [c, oh, ow] {
        return Err(NeuralError::Shape(format!(
            "avgpool grad_out must be [{c}, {oh}, {ow}], got {:?}",
            grad_out.shape()
        )));
    }
    let mut grad_x = vec![0.0; c * h * w];
    let quarter = 1.0 / (POOL * POOL) as f64;
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out.data()[(ci * oh + oy) * ow + ox] * quarter;
                for wy in 0..POOL {
                    for wx in 0..POOL {
                        grad_x[(ci * h + oy * POOL + wy) * w + ox * POOL + wx] += g;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(input_shape, grad_x)?)
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FcLayer {
    /// `[d_out, d_in]`
    pub weights: Tensor,
    /// `[d_out]`
    pub bias: Tensor,
}

impl FcLayer {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self, NeuralError> {
        if weights.rank() != 2 {
            return Err(NeuralError::Config(format!(
                "fc weights must be [d_out, d_in], got {:?}",
                weights.shape()
            )));
        }
        if bias.rank() != 1 || bias.shape()[0] != weights.shape()[0] {
            return Err(NeuralError::Config(format!(
                "fc bias must be [{}], got {:?}",
                weights.shape()[0],
                bias.shape()
            )));
        }
        Ok(FcLayer { weights, bias })
    }

    pub fn d_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.weights.shape()[1]
    }
}

pub(crate) fn fc_forward_into(
    x: &[f64],
    weights: &[f64],
    bias: &[f64],
    d_out: usize,
    d_in: usize,
    out: &mut [f64],
) {
    for o in 0..d_out {
        let row = &weights[o * d_in..(o + 1) * d_in];
        let mut acc = bias[o];
        for (w, xv) in row.iter().zip(x) {
            acc += w * xv;
        }
        out[o] = acc;
    }
}

/// y = W x + b for a single feature vector.
pub fn fc_forward(x: &Tensor, layer: &FcLayer) -> Result<Tensor, NeuralError> {
    if x.rank() != 1 || x.len() != layer.d_in() {
        return Err(NeuralError::Shape(format!(
            "fc input must be [{}], got {:?}",
            layer.d_in(),
            x.shape()
        )));
    }
    let mut out = vec![0.0; layer.d_out()];
    fc_forward_into(
        x.data(),
        layer.weights.data(),
        layer.bias.data(),
        layer.d_out(),
        layer.d_in(),
        &mut out,
    );
    Ok(Tensor::new(&[layer.d_out()], out)?)
}

/// Gradients of [`fc_forward`]: (grad_x, grad_weights, grad_bias).
pub fn fc_backward(
    x: &Tensor,
    layer: &FcLayer,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NeuralError> {
    if grad_out.rank() != 1 || grad_out.len() != layer.d_out() {
        return Err(NeuralError::Shape(format!(
            "fc grad_out must be [{}], got {:?}",
            layer.d_out(),
            grad_out.shape()
        )));
    }
    let (d_out, d_in) = (layer.d_out(), layer.d_in());
    let mut grad_x = vec![0.0; d_in];
    let mut grad_w = vec![0.0; d_out * d_in];
    for o in 0..d_out {
        let g = grad_out.data()[o];
        let wrow = &layer.weights.data()[o * d_in..(o + 1) * d_in];
        let grow = &mut grad_w[o * d_in..(o + 1) * d_in];
        for i in 0..d_in {
            grad_x[i] += g * wrow[i];
            grow[i] = g * x.data()[i];
        }
    }
    Ok((
        Tensor::new(&[d_in], grad_x)?,
        Tensor::new(&[d_out, d_in], grad_w)?,
        grad_out.clone(),
    ))
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Numerically stable softmax over a logit vector (max-subtraction before
/// exponentiation). Output entries are positive and sum to 1.
pub fn softmax(logits: &Tensor) -> Result<Tensor, NeuralError> {
    if logits.rank() != 1 {
        return Err(NeuralError::Shape(format!(
            "softmax expects a rank-1 logit vector, got {:?}",
            logits.shape()
        )));
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(NeuralError::Numeric {
            location: "softmax".into(),
            detail: "non-finite logit".into(),
        });
    }
    let max = logits
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Tensor::new(
        logits.shape(),
        exps.into_iter().map(|e| e / sum).collect(),
    )?)
}

/// Jacobian-vector product of softmax: given probabilities p and the
/// gradient with respect to them, return the gradient with respect to the
/// logits: p .* (g - <p, g>).
pub fn softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Result<Tensor, NeuralError> {
    if probs.shape() != grad_out.shape() {
        return Err(NeuralError::Shape(format!(
            "softmax backward shapes differ: {:?} vs {:?}",
            probs.shape(),
            grad_out.shape()
        )));
    }
    let dot: f64 = probs
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&p, &g)| p * g)
        .sum();
    Ok(probs.zip_map(grad_out, |p, g| p * (g - dot))?)
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Batch-wise normalization state: learnable scale/shift plus running
/// statistics for eval mode. Variance is the biased (1/N) estimate in both
/// batch and running form.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    /// `[C]`
    pub gamma: Tensor,
    /// `[C]`
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Saved intermediates for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub per_channel: usize,
}

/// Batch statistics produced by a train-mode forward; the training loop
/// folds them into the running averages after the optimizer step.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Index map for per-channel iteration over `[B, C]` and `[B, C, H, W]`.
fn bn_layout(x: &Tensor, channels: usize) -> Result<(usize, usize), NeuralError> {
    let xs = x.shape();
    match xs.len() {
        2 if xs[1] == channels => Ok((xs[0], 1)),
        4 if xs[1] == channels => Ok((xs[0], xs[2] * xs[3])),
        _ => Err(NeuralError::Shape(format!(
            "batchnorm over {channels} channels cannot apply to input {xs:?}"
        ))),
    }
}

fn bn_offsets(
    batch: usize,
    channels: usize,
    spatial: usize,
    c: usize,
) -> impl Iterator<Item = usize> {
    (0..batch).flat_map(move |b| {
        let base = (b * channels + c) * spatial;
        base..base + spatial
    })
}

/// Normalize per channel. Train mode uses batch statistics (batch size >= 2
/// required) and reports updated running stats; eval mode normalizes with
/// the stored running statistics.
pub fn batchnorm_forward(
    x: &Tensor,
    bn: &BatchNorm,
    mode: BnMode,
) -> Result<(Tensor, Option<BnCache>, Option<BnStats>), NeuralError> {
    let channels = bn.channels();
    let (batch, spatial) = bn_layout(x, channels)?;
    let data = x.data();
    let gamma = bn.gamma.data();
    let beta = bn.beta.data();
    let mut out = vec![0.0; data.len()];

    match mode {
        BnMode::Train => {
            if batch < 2 {
                return Err(NeuralError::Config(format!(
                    "batchnorm train mode needs batch size >= 2, got {batch}"
                )));
            }
            let count = (batch * spatial) as f64;
            let mut x_hat = vec![0.0; data.len()];
            let mut inv_std = vec![0.0; channels];
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut sum = 0.0;
                for i in bn_offsets(batch, channels, spatial, c) {
                    sum += data[i];
                }
                let mu = sum / count;
                let mut sq = 0.0;
                for i in bn_offsets(batch, channels, spatial, c) {
                    let d = data[i] - mu;
                    sq += d * d;
                }
                let v = sq / count;
                let istd = 1.0 / (v + bn.eps).sqrt();
                for i in bn_offsets(batch, channels, spatial, c) {
                    let xh = (data[i] - mu) * istd;
                    x_hat[i] = xh;
                    out[i] = gamma[c] * xh + beta[c];
                }
                mean[c] = mu;
                var[c] = v;
                inv_std[c] = istd;
            }
            Ok((
                Tensor::new(x.shape(), out)?,
                Some(BnCache {
                    x_hat,
                    inv_std,
                    per_channel: batch * spatial,
                }),
                Some(BnStats { mean, var }),
            ))
        }
        BnMode::Eval => {
            let rm = bn.running_mean.data();
            let rv = bn.running_var.data();
            for c in 0..channels {
                let istd = 1.0 / (rv[c] + bn.eps).sqrt();
                for i in bn_offsets(batch, channels, spatial, c) {
                    out[i] = gamma[c] * (data[i] - rm[c]) * istd + beta[c];
                }
            }
            Ok((Tensor::new(x.shape(), out)?, None, None))
        }
    }
}

/// Gradients of a train-mode [`batchnorm_forward`]:
/// (grad_x, grad_gamma, grad_beta).
pub fn batchnorm_backward(
    bn: &BatchNorm,
    x_shape: &[usize],
    cache: &BnCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NeuralError> {
    let channels = bn.channels();
    let (batch, spatial) = bn_layout(grad_out, channels)?;
    if grad_out.shape() != x_shape {
        return Err(NeuralError::Shape(format!(
            "batchnorm grad_out {:?} does not match input {:?}",
            grad_out.shape(),
            x_shape
        )));
    }
    let g = grad_out.data();
    let gamma = bn.gamma.data();
    let m = cache.per_channel as f64;
    let mut grad_x = vec![0.0; g.len()];
    let mut grad_gamma = vec![0.0; channels];
    let mut grad_beta = vec![0.0; channels];
    for c in 0..channels {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in bn_offsets(batch, channels, spatial, c) {
            sum_g += g[i];
            sum_gx += g[i] * cache.x_hat[i];
        }
        grad_beta[c] = sum_g;
        grad_gamma[c] = sum_gx;
        let scale = gamma[c] * cache.inv_std[c] / m;
        for i in bn_offsets(batch, channels, spatial, c) {
            grad_x[i] = scale * (m * g[i] - sum_g - cache.x_hat[i] * sum_gx);
        }
    }
    Ok((
        Tensor::new(x_shape, grad_x)?,
        Tensor::new(&[channels], grad_gamma)?,
        Tensor::new(&[channels], grad_beta)?,
    ))
}

// ---------------------------------------------------------------------------
// Gradient reversal
// ---------------------------------------------------------------------------

/// Identity on the forward pass.
pub fn grad_reversal_forward(x: &Tensor, _lambda: f64) -> Tensor {
    x.clone()
}

/// Negate and scale the gradient on the backward pass: -lambda * grad.
pub fn grad_reversal_backward(grad_out: &Tensor, lambda: f64) -> Tensor {
    grad_out.scale(-lambda)
}
