//! Differentiable operations: forward constructors and their backward passes.
//!
//! Each constructor validates shapes, computes the forward value through the
//! kernels in [`super::kernels`], and records an [`Op`] node when gradients
//! are being tracked. [`backprop`] is the single dispatch point used by
//! `TensorBase::backward`.

use rand_chacha::rand_core::RngCore;

use super::kernels;
use super::{Element, Node, TensorBase, TensorError};

/// Per-channel running statistics for batch normalization.
#[derive(Clone, Debug)]
pub struct BnStats<T: Element> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> BnStats<T> {
    /// Fresh statistics: mean 0, variance 1.
    pub fn identity(channels: usize) -> Self {
        BnStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn cast<U: Element>(&self) -> BnStats<U> {
        BnStats {
            mean: self.mean.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            var: self.var.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

pub(crate) enum Op<T: Element> {
    /// inputs: [x, weight] or [x, weight, bias]
    Conv2d { stride: usize, padding: usize },
    /// inputs: [x, weight]
    ConvTranspose2d { stride: usize },
    /// inputs: [x]
    MaxPool2d { argmax: Vec<usize> },
    /// inputs: [x, gamma, beta]; xhat is the normalized input saved for the
    /// backward pass, inv_std is per channel. `batch_stats` distinguishes the
    /// train-mode backward (gradient flows through the batch statistics) from
    /// the eval-mode one (statistics are constants).
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu,
    Sigmoid,
    /// inputs: [a, b] of identical shape
    Add,
    /// inputs: [a, b]; a contributes the first `c_first` channels
    ConcatChannels { c_first: usize },
    /// inputs: [x]; channels [start, start+len) of a tensor with c_in channels
    SliceChannels {
        start: usize,
        len: usize,
        c_in: usize,
    },
    /// inputs: [x]; y = mul * x + c (the constant is not needed for backward)
    Affine { mul: T },
    /// inputs: [x]
    MeanAll,
    /// inputs: [x]; per-(n,c) factor, 0 for dropped channels, 1/(1-p) otherwise
    SpatialDropout { factor: Vec<T> },
    /// inputs: [target, pred]; gradient flows to pred only
    SoftJaccard { eps: T },
    /// inputs: [target, pred]; gradient flows to pred only
    Bce { eps: T },
}

fn dims4<T: Element>(t: &TensorBase<T>, op: &'static str) -> Result<(usize, usize, usize, usize), TensorError> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(TensorError::Dimension {
            op,
            message: format!("expected a rank-4 NCHW tensor, got shape {s:?}"),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// 2D convolution over NCHW input with OIHW weights and zero padding.
pub fn conv2d<T: Element>(
    x: &TensorBase<T>,
    weight: &TensorBase<T>,
    bias: Option<&TensorBase<T>>,
    stride: usize,
    padding: usize,
) -> Result<TensorBase<T>, TensorError> {
    let (n, ci, h, w) = dims4(x, "conv2d")?;
    let (co, wi, kh, kw) = dims4(weight, "conv2d")?;
    if stride == 0 {
        return Err(TensorError::InvalidConfig {
            op: "conv2d",
            message: "stride must be positive".into(),
        });
    }
    if wi != ci {
        return Err(TensorError::Dimension {
            op: "conv2d",
            message: format!("input has {ci} channels but weight expects {wi}"),
        });
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(TensorError::Dimension {
            op: "conv2d",
            message: format!(
                "kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                left: b.shape().to_vec(),
                right: vec![co],
            });
        }
    }

    let out = kernels::conv2d_forward(
        &x.data(),
        (n, ci, h, w),
        &weight.data(),
        (co, kh, kw),
        bias.map(|b| b.to_vec()).as_deref(),
        stride,
        padding,
    );
    let oh = kernels::conv_out_dim(h, kh, stride, padding);
    let ow = kernels::conv_out_dim(w, kw, stride, padding);
    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(TensorBase::from_op(
        out,
        vec![n, co, oh, ow],
        Node {
            op: Op::Conv2d { stride, padding },
            inputs,
        },
    ))
}

/// Transposed convolution (fractionally strided) with IOHW weights, no padding.
pub fn conv_transpose2d<T: Element>(
    x: &TensorBase<T>,
    weight: &TensorBase<T>,
    stride: usize,
) -> Result<TensorBase<T>, TensorError> {
    let (n, ci, h, w) = dims4(x, "conv_transpose2d")?;
    let (wi, co, kh, kw) = dims4(weight, "conv_transpose2d")?;
    if stride == 0 {
        return Err(TensorError::InvalidConfig {
            op: "conv_transpose2d",
            message: "stride must be positive".into(),
        });
    }
    if wi != ci {
        return Err(TensorError::Dimension {
            op: "conv_transpose2d",
            message: format!("input has {ci} channels but weight expects {wi}"),
        });
    }
    let out = kernels::convt2d_forward(
        &x.data(),
        (n, ci, h, w),
        &weight.data(),
        (co, kh, kw),
        stride,
    );
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    Ok(TensorBase::from_op(
        out,
        vec![n, co, oh, ow],
        Node {
            op: Op::ConvTranspose2d { stride },
            inputs: vec![x.clone(), weight.clone()],
        },
    ))
}

/// Max pooling; gradient routes to the first maximum of each window in
/// row-major order. Padding cells never win.
pub fn maxpool2d<T: Element>(
    x: &TensorBase<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<TensorBase<T>, TensorError> {
    let (n, c, h, w) = dims4(x, "maxpool2d")?;
    if kernel == 0 || stride == 0 {
        return Err(TensorError::InvalidConfig {
            op: "maxpool2d",
            message: "kernel and stride must be positive".into(),
        });
    }
    if padding >= kernel {
        return Err(TensorError::InvalidConfig {
            op: "maxpool2d",
            message: format!("padding {padding} must be smaller than kernel {kernel}"),
        });
    }
    if h < kernel.saturating_sub(2 * padding) || h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(TensorError::Dimension {
            op: "maxpool2d",
            message: format!("kernel {kernel} larger than padded input {h}x{w}"),
        });
    }
    let (out, argmax) = kernels::maxpool2d_forward(&x.data(), (n, c, h, w), kernel, stride, padding);
    let oh = kernels::conv_out_dim(h, kernel, stride, padding);
    let ow = kernels::conv_out_dim(w, kernel, stride, padding);
    Ok(TensorBase::from_op(
        out,
        vec![n, c, oh, ow],
        Node {
            op: Op::MaxPool2d { argmax },
            inputs: vec![x.clone()],
        },
    ))
}

/// Batch normalization over the (N, H, W) extent of each channel.
///
/// Train mode normalizes by batch statistics and folds them into `stats` with
/// `running = (1 - momentum) * running + momentum * batch`; eval mode
/// normalizes by the running statistics.
pub fn batchnorm2d<T: Element>(
    x: &TensorBase<T>,
    gamma: &TensorBase<T>,
    beta: &TensorBase<T>,
    stats: &mut BnStats<T>,
    train: bool,
    eps: f64,
    momentum: f64,
) -> Result<TensorBase<T>, TensorError> {
    let (n, c, h, w) = dims4(x, "batchnorm2d")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::Dimension {
            op: "batchnorm2d",
            message: format!(
                "gamma/beta must have length {c}, got {:?}/{:?}",
                gamma.shape(),
                beta.shape()
            ),
        });
    }
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(TensorError::Dimension {
            op: "batchnorm2d",
            message: format!("running stats sized {} but input has {c} channels", stats.mean.len()),
        });
    }

    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let m = n * h * w;
    let plane = h * w;
    let eps_t = T::from_f64(eps);

    let (mean, var) = if train {
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let inv_m = T::from_f64(1.0 / m as f64);
        for ch in 0..c {
            let mut acc = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for &v in &xd[base..base + plane] {
                    acc = acc + v;
                }
            }
            let mu = acc * inv_m;
            let mut vacc = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for &v in &xd[base..base + plane] {
                    let d = v - mu;
                    vacc = vacc + d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = vacc * inv_m;
        }
        let mom = T::from_f64(momentum);
        let keep = T::from_f64(1.0 - momentum);
        for ch in 0..c {
            stats.mean[ch] = keep * stats.mean[ch] + mom * mean[ch];
            stats.var[ch] = keep * stats.var[ch] + mom * var[ch];
        }
        (mean, var)
    } else {
        (stats.mean.clone(), stats.var.clone())
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let mu = mean[ch];
            let istd = inv_std[ch];
            let g = gd[ch];
            let be = bd[ch];
            for i in base..base + plane {
                let nx = (xd[i] - mu) * istd;
                xhat[i] = nx;
                out[i] = g * nx + be;
            }
        }
    }
    drop(xd);

    Ok(TensorBase::from_op(
        out,
        vec![n, c, h, w],
        Node {
            op: Op::BatchNorm {
                xhat,
                inv_std,
                batch_stats: train,
            },
            inputs: vec![x.clone(), gamma.clone(), beta.clone()],
        },
    ))
}

pub fn relu<T: Element>(x: &TensorBase<T>) -> TensorBase<T> {
    let out: Vec<T> = x.data().iter().map(|&v| v.max(T::zero())).collect();
    TensorBase::from_op(
        out,
        x.shape().to_vec(),
        Node {
            op: Op::Relu,
            inputs: vec![x.clone()],
        },
    )
}

pub fn sigmoid<T: Element>(x: &TensorBase<T>) -> TensorBase<T> {
    let out: Vec<T> = x
        .data()
        .iter()
        .map(|&v| T::one() / (T::one() + (-v).exp()))
        .collect();
    TensorBase::from_op(
        out,
        x.shape().to_vec(),
        Node {
            op: Op::Sigmoid,
            inputs: vec![x.clone()],
        },
    )
}

/// Elementwise sum of two tensors of identical shape.
pub fn add<T: Element>(a: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "add",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let out: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(TensorBase::from_op(
        out,
        a.shape().to_vec(),
        Node {
            op: Op::Add,
            inputs: vec![a.clone(), b.clone()],
        },
    ))
}

/// Concatenates two NCHW tensors along the channel axis.
pub fn concat_channels<T: Element>(
    a: &TensorBase<T>,
    b: &TensorBase<T>,
) -> Result<TensorBase<T>, TensorError> {
    let (na, ca, ha, wa) = dims4(a, "concat_channels")?;
    let (nb, cb, hb, wb) = dims4(b, "concat_channels")?;
    if na != nb || ha != hb || wa != wb {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let plane = ha * wa;
    let mut out = Vec::with_capacity(na * (ca + cb) * plane);
    let ad = a.data();
    let bd = b.data();
    for n in 0..na {
        out.extend_from_slice(&ad[n * ca * plane..(n + 1) * ca * plane]);
        out.extend_from_slice(&bd[n * cb * plane..(n + 1) * cb * plane]);
    }
    drop(ad);
    drop(bd);
    Ok(TensorBase::from_op(
        out,
        vec![na, ca + cb, ha, wa],
        Node {
            op: Op::ConcatChannels { c_first: ca },
            inputs: vec![a.clone(), b.clone()],
        },
    ))
}

/// Extracts channels `[start, start+len)` of an NCHW tensor.
pub fn slice_channels<T: Element>(
    x: &TensorBase<T>,
    start: usize,
    len: usize,
) -> Result<TensorBase<T>, TensorError> {
    let (n, c, h, w) = dims4(x, "slice_channels")?;
    if start + len > c || len == 0 {
        return Err(TensorError::Dimension {
            op: "slice_channels",
            message: format!("range {start}..{} out of {c} channels", start + len),
        });
    }
    let plane = h * w;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        let base = (b * c + start) * plane;
        out.extend_from_slice(&xd[base..base + len * plane]);
    }
    drop(xd);
    Ok(TensorBase::from_op(
        out,
        vec![n, len, h, w],
        Node {
            op: Op::SliceChannels { start, len, c_in: c },
            inputs: vec![x.clone()],
        },
    ))
}

/// y = s * x.
pub fn scale_mul<T: Element>(x: &TensorBase<T>, s: T) -> TensorBase<T> {
    affine(x, s, T::zero())
}

/// y = mul * x + add, elementwise.
pub fn affine<T: Element>(x: &TensorBase<T>, mul: T, add: T) -> TensorBase<T> {
    let out: Vec<T> = x.data().iter().map(|&v| mul * v + add).collect();
    TensorBase::from_op(
        out,
        x.shape().to_vec(),
        Node {
            op: Op::Affine { mul },
            inputs: vec![x.clone()],
        },
    )
}

/// Mean over all elements, producing a scalar.
pub fn mean_all<T: Element>(x: &TensorBase<T>) -> TensorBase<T> {
    let n = x.numel();
    let mut acc = T::zero();
    for &v in x.data().iter() {
        acc = acc + v;
    }
    let out = vec![acc * T::from_f64(1.0 / n as f64)];
    TensorBase::from_op(
        out,
        vec![1],
        Node {
            op: Op::MeanAll,
            inputs: vec![x.clone()],
        },
    )
}

/// Spatial dropout: zeroes whole (n, c) channels with probability `p` and
/// rescales survivors by 1/(1-p). Eval mode is the identity.
pub fn spatial_dropout<T: Element>(
    x: &TensorBase<T>,
    p: f64,
    train: bool,
    rng: &mut impl RngCore,
) -> Result<TensorBase<T>, TensorError> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::InvalidConfig {
            op: "spatial_dropout",
            message: format!("p must be in [0, 1), got {p}"),
        });
    }
    if !train {
        return Ok(x.clone());
    }
    let (n, c, h, w) = dims4(x, "spatial_dropout")?;
    let keep_scale = T::from_f64(1.0 / (1.0 - p));
    let factor: Vec<T> = (0..n * c)
        .map(|_| {
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u < p {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let plane = h * w;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for (nc, &f) in factor.iter().enumerate() {
        let base = nc * plane;
        for i in base..base + plane {
            out[i] = xd[i] * f;
        }
    }
    drop(xd);
    Ok(TensorBase::from_op(
        out,
        vec![n, c, h, w],
        Node {
            op: Op::SpatialDropout { factor },
            inputs: vec![x.clone()],
        },
    ))
}

/// Differentiable soft Jaccard score: mean over pixels of
/// (y*p + eps) / (y + p - y*p + eps). Gradient flows to the prediction only.
pub fn soft_jaccard_op<T: Element>(
    target: &TensorBase<T>,
    pred: &TensorBase<T>,
    eps: f64,
) -> Result<TensorBase<T>, TensorError> {
    if target.shape() != pred.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "soft_jaccard",
            left: target.shape().to_vec(),
            right: pred.shape().to_vec(),
        });
    }
    let e = T::from_f64(eps);
    let n = T::from_f64(1.0 / target.numel() as f64);
    let mut acc = T::zero();
    for (&y, &p) in target.data().iter().zip(pred.data().iter()) {
        let num = y * p + e;
        let den = y + p - y * p + e;
        acc = acc + num / den;
    }
    Ok(TensorBase::from_op(
        vec![acc * n],
        vec![1],
        Node {
            op: Op::SoftJaccard { eps: e },
            inputs: vec![target.clone(), pred.clone()],
        },
    ))
}

/// Binary cross entropy with the prediction clamped to [eps, 1-eps].
pub fn bce_op<T: Element>(
    target: &TensorBase<T>,
    pred: &TensorBase<T>,
    eps: f64,
) -> Result<TensorBase<T>, TensorError> {
    if target.shape() != pred.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "bce",
            left: target.shape().to_vec(),
            right: pred.shape().to_vec(),
        });
    }
    let e = T::from_f64(eps);
    let hi = T::one() - e;
    let inv_n = T::from_f64(1.0 / target.numel() as f64);
    let mut acc = T::zero();
    for (&y, &p) in target.data().iter().zip(pred.data().iter()) {
        let pc = p.max(e).min(hi);
        acc = acc + y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
    }
    Ok(TensorBase::from_op(
        vec![-(acc * inv_n)],
        vec![1],
        Node {
            op: Op::Bce { eps: e },
            inputs: vec![target.clone(), pred.clone()],
        },
    ))
}

/// L = alpha * H + (1 - alpha) * (1 - J), as a differentiable graph.
pub fn combine_terms<T: Element>(
    h: &TensorBase<T>,
    j: &TensorBase<T>,
    alpha: f64,
) -> Result<TensorBase<T>, TensorError> {
    let a = T::from_f64(alpha);
    let one_minus = T::from_f64(1.0 - alpha);
    add(&affine(h, a, T::zero()), &affine(j, -one_minus, one_minus))
}

fn accumulate_if_tracked<T: Element>(t: &TensorBase<T>, delta: &[T]) {
    if t.requires_grad() {
        t.accumulate_grad(delta);
    }
}

pub(crate) fn backprop<T: Element>(node: &Node<T>, out: &TensorBase<T>, grad: &[T]) {
    match &node.op {
        Op::Conv2d { stride, padding } => {
            let x = &node.inputs[0];
            let wgt = &node.inputs[1];
            let (n, ci, h, w) = {
                let s = x.shape();
                (s[0], s[1], s[2], s[3])
            };
            let (co, kh, kw) = {
                let s = wgt.shape();
                (s[0], s[2], s[3])
            };
            if x.requires_grad() {
                let dx = kernels::conv2d_backward_input(
                    grad,
                    (n, ci, h, w),
                    &wgt.data(),
                    (co, kh, kw),
                    *stride,
                    *padding,
                );
                x.accumulate_grad(&dx);
            }
            if wgt.requires_grad() {
                let dw = kernels::conv2d_backward_weight(
                    grad,
                    &x.data(),
                    (n, ci, h, w),
                    (co, kh, kw),
                    *stride,
                    *padding,
                );
                wgt.accumulate_grad(&dw);
            }
            if let Some(b) = node.inputs.get(2) {
                if b.requires_grad() {
                    let os = out.shape();
                    let db = kernels::conv2d_backward_bias(grad, (os[0], os[1], os[2], os[3]));
                    b.accumulate_grad(&db);
                }
            }
        }
        Op::ConvTranspose2d { stride } => {
            let x = &node.inputs[0];
            let wgt = &node.inputs[1];
            let (n, ci, h, w) = {
                let s = x.shape();
                (s[0], s[1], s[2], s[3])
            };
            let (co, kh, kw) = {
                let s = wgt.shape();
                (s[1], s[2], s[3])
            };
            if x.requires_grad() {
                let dx = kernels::convt2d_backward_input(
                    grad,
                    (n, ci, h, w),
                    &wgt.data(),
                    (co, kh, kw),
                    *stride,
                );
                x.accumulate_grad(&dx);
            }
            if wgt.requires_grad() {
                let dw = kernels::convt2d_backward_weight(
                    grad,
                    &x.data(),
                    (n, ci, h, w),
                    (co, kh, kw),
                    *stride,
                );
                wgt.accumulate_grad(&dw);
            }
        }
        Op::MaxPool2d { argmax } => {
            let x = &node.inputs[0];
            if x.requires_grad() {
                let dx = kernels::maxpool2d_backward(grad, argmax, x.numel());
                x.accumulate_grad(&dx);
            }
        }
        Op::BatchNorm {
            xhat,
            inv_std,
            batch_stats,
        } => {
            let x = &node.inputs[0];
            let gamma = &node.inputs[1];
            let beta = &node.inputs[2];
            let s = x.shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let plane = h * w;
            let m = n * plane;

            // Per-channel reductions of g and g*xhat.
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    for i in base..base + plane {
                        sg = sg + grad[i];
                        sgx = sgx + grad[i] * xhat[i];
                    }
                    sum_g[ch] = sum_g[ch] + sg;
                    sum_gx[ch] = sum_gx[ch] + sgx;
                }
            }
            if gamma.requires_grad() {
                gamma.accumulate_grad(&sum_gx);
            }
            if beta.requires_grad() {
                beta.accumulate_grad(&sum_g);
            }
            if x.requires_grad() {
                let gd = gamma.data();
                let inv_m = T::from_f64(1.0 / m as f64);
                let mut dx = vec![T::zero(); grad.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        let k = gd[ch] * inv_std[ch];
                        if *batch_stats {
                            let mg = sum_g[ch] * inv_m;
                            let mgx = sum_gx[ch] * inv_m;
                            for i in base..base + plane {
                                dx[i] = k * (grad[i] - mg - xhat[i] * mgx);
                            }
                        } else {
                            for i in base..base + plane {
                                dx[i] = k * grad[i];
                            }
                        }
                    }
                }
                drop(gd);
                x.accumulate_grad(&dx);
            }
        }
        Op::Relu => {
            let x = &node.inputs[0];
            if x.requires_grad() {
                let xd = x.data();
                let dx: Vec<T> = grad
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                drop(xd);
                x.accumulate_grad(&dx);
            }
        }
        Op::Sigmoid => {
            let x = &node.inputs[0];
            if x.requires_grad() {
                let od = out.data();
                let dx: Vec<T> = grad
                    .iter()
                    .zip(od.iter())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                drop(od);
                x.accumulate_grad(&dx);
            }
        }
        Op::Add => {
            accumulate_if_tracked(&node.inputs[0], grad);
            accumulate_if_tracked(&node.inputs[1], grad);
        }
        Op::ConcatChannels { c_first } => {
            let a = &node.inputs[0];
            let b = &node.inputs[1];
            let os = out.shape();
            let (n, c_out, plane) = (os[0], os[1], os[2] * os[3]);
            let c_second = c_out - c_first;
            if a.requires_grad() {
                let mut da = Vec::with_capacity(n * c_first * plane);
                for bi in 0..n {
                    let base = bi * c_out * plane;
                    da.extend_from_slice(&grad[base..base + c_first * plane]);
                }
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let mut db = Vec::with_capacity(n * c_second * plane);
                for bi in 0..n {
                    let base = (bi * c_out + c_first) * plane;
                    db.extend_from_slice(&grad[base..base + c_second * plane]);
                }
                b.accumulate_grad(&db);
            }
        }
        Op::SliceChannels { start, len, c_in } => {
            let x = &node.inputs[0];
            if x.requires_grad() {
                let os = out.shape();
                let (n, plane) = (os[0], os[2] * os[3]);
                let mut dx = vec![T::zero(); x.numel()];
                for b in 0..n {
                    let src = b * len * plane;
                    let dst = (b * c_in + start) * plane;
                    dx[dst..dst + len * plane].copy_from_slice(&grad[src..src + len * plane]);
                }
                x.accumulate_grad(&dx);
            }
        }
        Op::Affine { mul } => {
            let x = &node.inputs[0];
            if x.requires_grad() {
                let dx: Vec<T> = grad.iter().map(|&g| g * *mul).collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::MeanAll => {
            let x = &node.inputs[0];
            if x.requires_grad() {
                let g = grad[0] * T::from_f64(1.0 / x.numel() as f64);
                x.accumulate_grad(&vec![g; x.numel()]);
            }
        }
        Op::SpatialDropout { factor } => {
            let x = &node.inputs[0];
            if x.requires_grad() {
                let plane = x.numel() / factor.len();
                let mut dx = vec![T::zero(); x.numel()];
                for (nc, &f) in factor.iter().enumerate() {
                    let base = nc * plane;
                    for i in base..base + plane {
                        dx[i] = grad[i] * f;
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Op::SoftJaccard { eps } => {
            let target = &node.inputs[0];
            let pred = &node.inputs[1];
            if pred.requires_grad() {
                let td = target.data();
                let pd = pred.data();
                let inv_n = T::from_f64(1.0 / pd.len() as f64);
                let g = grad[0] * inv_n;
                let dx: Vec<T> = td
                    .iter()
                    .zip(pd.iter())
                    .map(|(&y, &p)| {
                        let num = y * p + *eps;
                        let den = y + p - y * p + *eps;
                        // d/dp [num/den] = (y*den - num*(1-y)) / den^2
                        g * (y * den - num * (T::one() - y)) / (den * den)
                    })
                    .collect();
                drop(td);
                drop(pd);
                pred.accumulate_grad(&dx);
            }
        }
        Op::Bce { eps } => {
            let target = &node.inputs[0];
            let pred = &node.inputs[1];
            if pred.requires_grad() {
                let td = target.data();
                let pd = pred.data();
                let hi = T::one() - *eps;
                let inv_n = T::from_f64(1.0 / pd.len() as f64);
                let g = grad[0] * inv_n;
                let dx: Vec<T> = td
                    .iter()
                    .zip(pd.iter())
                    .map(|(&y, &p)| {
                        if p < *eps || p > hi {
                            // clamped region: constant w.r.t. p
                            T::zero()
                        } else {
                            -g * (y / p - (T::one() - y) / (T::one() - p))
                        }
                    })
                    .collect();
                drop(td);
                drop(pd);
                pred.accumulate_grad(&dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn conv2d_shape_and_errors() {
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        let w = Tensor::zeros(&[8, 3, 7, 7]);
        let y = conv2d(&x, &w, None, 2, 3).unwrap();
        assert_eq!(y.shape(), &[1, 8, 32, 32]);

        let wrong = Tensor::zeros(&[8, 4, 7, 7]);
        assert!(matches!(
            conv2d(&x, &wrong, None, 2, 3),
            Err(TensorError::Dimension { op: "conv2d", .. })
        ));
        assert!(matches!(
            conv2d(&x, &w, None, 0, 3),
            Err(TensorError::InvalidConfig { .. })
        ));
    }

    #[test]
    fn conv2d_1x1_identity() {
        let x = Tensor::from_vec((0..16).map(|v| v as f32).collect(), &[1, 1, 4, 4]).unwrap();
        let w = Tensor::from_vec(vec![1.0], &[1, 1, 1, 1]).unwrap();
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv_transpose_shape_and_value() {
        let x = Tensor::zeros(&[1, 4, 16, 16]);
        let w = Tensor::zeros(&[4, 6, 2, 2]);
        let y = conv_transpose2d(&x, &w, 2).unwrap();
        assert_eq!(y.shape(), &[1, 6, 32, 32]);

        let x = Tensor::from_vec(vec![2.5], &[1, 1, 1, 1]).unwrap();
        let w = Tensor::from_vec(vec![1.0; 4], &[1, 1, 2, 2]).unwrap();
        let y = conv_transpose2d(&x, &w, 2).unwrap();
        assert_eq!(y.to_vec(), vec![2.5; 4]);
    }

    #[test]
    fn maxpool_gradient_routes_to_argmax() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let y = maxpool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.to_vec(), vec![4.0]);
        let loss = mean_all(&y);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            maxpool2d(&x, 5, 1, 0),
            Err(TensorError::Dimension { .. })
        ));
    }

    #[test]
    fn batchnorm_constant_input_is_zeroed() {
        let x = Tensor::from_vec(vec![3.0; 16], &[2, 2, 2, 2]).unwrap();
        let gamma = Tensor::from_vec(vec![1.0, 1.0], &[2]).unwrap();
        let beta = Tensor::from_vec(vec![0.0, 0.0], &[2]).unwrap();
        let mut stats = BnStats::identity(2);
        let y = batchnorm2d(&x, &gamma, &beta, &mut stats, true, 1e-5, 0.1).unwrap();
        for v in y.to_vec() {
            assert!(v.abs() < 1e-6, "constant input should normalize to ~0, got {v}");
        }
        // running stats pulled toward the batch: mean 0.9*0 + 0.1*3
        assert!((stats.mean[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_beta_shifts_mean() {
        // zero-mean unit-variance input, gamma=1, beta=5: per-channel mean ~5.
        let vals: Vec<f32> = vec![-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0];
        let x = Tensor::from_vec(vals, &[2, 1, 2, 2]).unwrap();
        let gamma = Tensor::from_vec(vec![1.0], &[1]).unwrap();
        let beta = Tensor::from_vec(vec![5.0], &[1]).unwrap();
        let mut stats = BnStats::identity(1);
        let y = batchnorm2d(&x, &gamma, &beta, &mut stats, true, 1e-5, 0.1).unwrap();
        let mean: f32 = y.to_vec().iter().sum::<f32>() / 8.0;
        assert!((mean - 5.0).abs() < 1e-4, "mean {mean}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor::from_vec(vec![0.0], &[1]).unwrap();
        assert_eq!(sigmoid(&x).item(), 0.5);
    }

    #[test]
    fn concat_then_slice_roundtrips() {
        let a = Tensor::from_vec((0..2 * 4 * 3 * 3).map(|v| v as f32).collect(), &[2, 4, 3, 3]).unwrap();
        let b = Tensor::from_vec((0..2 * 6 * 3 * 3).map(|v| -(v as f32)).collect(), &[2, 6, 3, 3]).unwrap();
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), &[2, 10, 3, 3]);
        let a2 = slice_channels(&cat, 0, 4).unwrap();
        let b2 = slice_channels(&cat, 4, 6).unwrap();
        assert_eq!(a2.to_vec(), a.to_vec());
        assert_eq!(b2.to_vec(), b.to_vec());
    }

    #[test]
    fn dropout_identity_cases() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        // p = 0: exact identity values.
        let y = spatial_dropout(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        // eval mode: identity regardless of p.
        let y = spatial_dropout(&x, 0.9, false, &mut rng).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn dropout_rate_matches_p() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_vec(vec![1.0; 10000], &[1, 10000, 1, 1]).unwrap();
        let y = spatial_dropout(&x, 0.3, true, &mut rng).unwrap();
        let zeroed = y.to_vec().iter().filter(|&&v| v == 0.0).count() as f64 / 10000.0;
        assert!((zeroed - 0.3).abs() < 0.02, "zeroed fraction {zeroed}");
    }
}
