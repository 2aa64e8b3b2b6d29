//! Raw convolution, transposed-convolution and pooling loops on flat slices.
//!
//! Every kernel writes each output element from exactly one task and keeps a
//! fixed sequential accumulation order inside a task, so results are
//! bit-identical for any rayon thread count.

use rayon::prelude::*;

use super::Element;

/// Output side length of a strided convolution/pool window sweep.
pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Valid output range `[lo, hi)` such that `o*stride + k - padding` stays in `[0, input)`.
fn valid_out_range(input: usize, k: usize, stride: usize, padding: usize, out: usize) -> (usize, usize) {
    let lo = if k < padding {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    // largest o with o*stride + k - padding <= input - 1
    let hi = if input + padding >= k + 1 {
        (((input + padding - k - 1) / stride) + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    wgt: &[T],
    (co, kh, kw): (usize, usize, usize),
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Vec<T> {
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    let mut out = vec![T::zero(); n * co * oh * ow];

    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, o_plane)| {
        let b = plane / co;
        let oc = plane % co;
        for ic in 0..ci {
            let x_base = (b * ci + ic) * h * w;
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_out_range(h, ky, stride, padding, oh);
                for kx in 0..kw {
                    let wv = wgt[((oc * ci + ic) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox_lo, ox_hi) = valid_out_range(w, kx, stride, padding, ow);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let x_row = x_base + iy * w;
                        let o_row = oy * ow;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - padding;
                            o_plane[o_row + ox] = o_plane[o_row + ox] + wv * x[x_row + ix];
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            let bv = bias[oc];
            for v in o_plane.iter_mut() {
                *v = *v + bv;
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_input<T: Element>(
    grad: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    wgt: &[T],
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    padding: usize,
) -> Vec<T> {
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    let mut dx = vec![T::zero(); n * ci * h * w];

    dx.par_chunks_mut(h * w).enumerate().for_each(|(plane, dx_plane)| {
        let b = plane / ci;
        let ic = plane % ci;
        for oc in 0..co {
            let g_base = (b * co + oc) * oh * ow;
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_out_range(h, ky, stride, padding, oh);
                for kx in 0..kw {
                    let wv = wgt[((oc * ci + ic) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox_lo, ox_hi) = valid_out_range(w, kx, stride, padding, ow);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let g_row = g_base + oy * ow;
                        let dx_row = iy * w;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - padding;
                            dx_plane[dx_row + ix] = dx_plane[dx_row + ix] + wv * grad[g_row + ox];
                        }
                    }
                }
            }
        }
    });
    dx
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_weight<T: Element>(
    grad: &[T],
    x: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    padding: usize,
) -> Vec<T> {
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    let mut dw = vec![T::zero(); co * ci * kh * kw];

    dw.par_chunks_mut(ci * kh * kw).enumerate().for_each(|(oc, dw_oc)| {
        for b in 0..n {
            let g_base = (b * co + oc) * oh * ow;
            for ic in 0..ci {
                let x_base = (b * ci + ic) * h * w;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_out_range(h, ky, stride, padding, oh);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = valid_out_range(w, kx, stride, padding, ow);
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let g_row = g_base + oy * ow;
                            let x_row = x_base + iy * w;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - padding;
                                acc = acc + grad[g_row + ox] * x[x_row + ix];
                            }
                        }
                        let idx = (ic * kh + ky) * kw + kx;
                        dw_oc[idx] = dw_oc[idx] + acc;
                    }
                }
            }
        }
    });
    dw
}

pub(crate) fn conv2d_backward_bias<T: Element>(
    grad: &[T],
    (n, co, oh, ow): (usize, usize, usize, usize),
) -> Vec<T> {
    let mut db = vec![T::zero(); co];
    for b in 0..n {
        for (oc, db_oc) in db.iter_mut().enumerate() {
            let base = (b * co + oc) * oh * ow;
            let mut acc = T::zero();
            for v in &grad[base..base + oh * ow] {
                acc = acc + *v;
            }
            *db_oc = *db_oc + acc;
        }
    }
    db
}

pub(crate) fn convt2d_forward<T: Element>(
    x: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    wgt: &[T],
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
) -> Vec<T> {
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    let mut out = vec![T::zero(); n * co * oh * ow];

    out.par_chunks_mut(co * oh * ow).enumerate().for_each(|(b, out_b)| {
        for ic in 0..ci {
            let x_base = (b * ci + ic) * h * w;
            for oc in 0..co {
                let o_base = oc * oh * ow;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wgt[((ic * co + oc) * kh + ky) * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for y in 0..h {
                            let o_row = o_base + (y * stride + ky) * ow + kx;
                            let x_row = x_base + y * w;
                            for xx in 0..w {
                                let oi = o_row + xx * stride;
                                out_b[oi] = out_b[oi] + wv * x[x_row + xx];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn convt2d_backward_input<T: Element>(
    grad: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    wgt: &[T],
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
) -> Vec<T> {
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    let mut dx = vec![T::zero(); n * ci * h * w];

    dx.par_chunks_mut(ci * h * w).enumerate().for_each(|(b, dx_b)| {
        for ic in 0..ci {
            let dx_base = ic * h * w;
            for oc in 0..co {
                let g_base = (b * co + oc) * oh * ow;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wgt[((ic * co + oc) * kh + ky) * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for y in 0..h {
                            let g_row = g_base + (y * stride + ky) * ow + kx;
                            let dx_row = dx_base + y * w;
                            for xx in 0..w {
                                dx_b[dx_row + xx] =
                                    dx_b[dx_row + xx] + wv * grad[g_row + xx * stride];
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

pub(crate) fn convt2d_backward_weight<T: Element>(
    grad: &[T],
    x: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
) -> Vec<T> {
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    let mut dw = vec![T::zero(); ci * co * kh * kw];

    dw.par_chunks_mut(co * kh * kw).enumerate().for_each(|(ic, dw_ic)| {
        for b in 0..n {
            let x_base = (b * ci + ic) * h * w;
            for oc in 0..co {
                let g_base = (b * co + oc) * oh * ow;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = T::zero();
                        for y in 0..h {
                            let g_row = g_base + (y * stride + ky) * ow + kx;
                            let x_row = x_base + y * w;
                            for xx in 0..w {
                                acc = acc + grad[g_row + xx * stride] * x[x_row + xx];
                            }
                        }
                        let idx = (oc * kh + ky) * kw + kx;
                        dw_ic[idx] = dw_ic[idx] + acc;
                    }
                }
            }
        }
    });
    dw
}

/// Max-pool forward. Padding cells never participate (treated as -inf); the
/// argmax records the flat input index of the first maximum in row-major
/// window order, which is where the full gradient is routed.
pub(crate) fn maxpool2d_forward<T: Element>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Vec<T>, Vec<usize>) {
    let oh = conv_out_dim(h, kernel, stride, padding);
    let ow = conv_out_dim(w, kernel, stride, padding);
    let planes = n * c;
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut argmax = vec![0usize; planes * oh * ow];

    for p in 0..planes {
        let x_base = p * h * w;
        let o_base = p * oh * ow;
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - padding as isize;
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - padding as isize;
                let mut best: Option<(T, usize)> = None;
                for ky in 0..kernel {
                    let iy = y0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = x0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = x_base + iy as usize * w + ix as usize;
                        let v = x[idx];
                        match best {
                            Some((bv, _)) if v <= bv => {}
                            _ => best = Some((v, idx)),
                        }
                    }
                }
                let (bv, bi) = best.expect("window contains at least one valid cell");
                out[o_base + oy * ow + ox] = bv;
                argmax[o_base + oy * ow + ox] = bi;
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool2d_backward<T: Element>(
    grad: &[T],
    argmax: &[usize],
    input_len: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (g, &idx) in grad.iter().zip(argmax) {
        dx[idx] = dx[idx] + *g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1.0 reproduces the input.
        let x: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let out = conv2d_forward(&x, (1, 1, 3, 3), &[1.0f32], (1, 1, 1), None, 1, 0);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let x = vec![1.0f32; 9];
        let w = vec![1.0f32; 9];
        let out = conv2d_forward(&x, (1, 1, 3, 3), &w, (1, 3, 3), None, 1, 0);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn conv_shape_with_stride_and_padding() {
        let x = vec![0.0f32; 3 * 64 * 64];
        let w = vec![0.0f32; 8 * 3 * 7 * 7];
        let out = conv2d_forward(&x, (1, 3, 64, 64), &w, (8, 7, 7), None, 2, 3);
        assert_eq!(out.len(), 8 * 32 * 32);
        assert_eq!(conv_out_dim(64, 7, 2, 3), 32);
    }

    #[test]
    fn convt_single_pixel_broadcasts() {
        // 1x1 input with value v and an all-ones 2x2 kernel, stride 2.
        let out = convt2d_forward(&[3.5f32], (1, 1, 1, 1), &[1.0; 4], (1, 2, 2), 2);
        assert_eq!(out, vec![3.5; 4]);
    }

    #[test]
    fn convt_doubles_spatial_size() {
        let x = vec![0.0f32; 4 * 16 * 16];
        let w = vec![0.0f32; 4 * 6 * 2 * 2];
        let out = convt2d_forward(&x, (1, 4, 16, 16), &w, (6, 2, 2), 2);
        assert_eq!(out.len(), 6 * 32 * 32);
    }

    #[test]
    fn maxpool_basic_and_tie_break() {
        let (out, arg) = maxpool2d_forward(&[1.0f32, 2.0, 3.0, 4.0], (1, 1, 2, 2), 2, 2, 0);
        assert_eq!(out, vec![4.0]);
        assert_eq!(arg, vec![3]);

        // Constant input: first cell in row-major order wins.
        let (out, arg) = maxpool2d_forward(&[7.0f32; 4], (1, 1, 2, 2), 2, 2, 0);
        assert_eq!(out, vec![7.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn maxpool_padding_ignores_outside() {
        // 2x2 input, kernel 3, stride 2, padding 1: single window sees the
        // whole input, padding cells never win.
        let (out, _) = maxpool2d_forward(&[-1.0f32, -2.0, -3.0, -4.0], (1, 1, 2, 2), 3, 2, 1);
        assert_eq!(out, vec![-1.0]);
    }
}
