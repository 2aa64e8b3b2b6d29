//! Inference: whole-image prediction with reflect padding to the next
//! multiple of 32 when needed, 4-rotation test-time augmentation, and
//! binarization.
//!
//! TTA rotates the input by 0/90/180/270 degrees, predicts, inverse-rotates
//! each probability map, and averages per pixel with an order-canonical sum
//! (the four values are sorted, then summed pairwise). That makes the average
//! independent of which orbit element was the actual input, bit-exactly, and
//! exact when the four values coincide.

use std::fmt;

use crate::data::{image_to_tensor, ImageU8, MaskU8, ProbMap};
use crate::model::{Model, ModelError};
use crate::tensor::{no_grad, Tensor, TensorError};

/// Test-time-augmentation settings; rotations are fixed at the four multiples
/// of 90 degrees.
#[derive(Clone, Copy, Debug)]
pub struct TtaConfig {
    pub enabled: bool,
    pub binarize_threshold: f32,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            enabled: true,
            binarize_threshold: 0.5,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<(), InferError> {
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(InferError::Config(format!(
                "binarize threshold must be in (0, 1), got {}",
                self.binarize_threshold
            )));
        }
        Ok(())
    }
}

/// A probability map with its binarized mask.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub source_id: String,
    pub prob_map: ProbMap,
    pub mask: MaskU8,
}

impl Prediction {
    pub fn from_prob(source_id: String, prob_map: ProbMap, threshold: f32) -> Self {
        let mask = binarize(&prob_map, threshold);
        Prediction {
            source_id,
            prob_map,
            mask,
        }
    }
}

#[derive(Debug)]
pub enum InferError {
    Config(String),
    Model(ModelError),
    Tensor(TensorError),
}

impl fmt::Display for InferError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferError::Config(m) => write!(f, "inference config: {m}"),
            InferError::Model(e) => write!(f, "{e}"),
            InferError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for InferError {}

impl From<ModelError> for InferError {
    fn from(e: ModelError) -> Self {
        InferError::Model(e)
    }
}

impl From<TensorError> for InferError {
    fn from(e: TensorError) -> Self {
        InferError::Tensor(e)
    }
}

/// Symmetric padding that lifts `side` to the next multiple of `multiple`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadSpec {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl PadSpec {
    pub fn is_zero(&self) -> bool {
        self.top == 0 && self.bottom == 0 && self.left == 0 && self.right == 0
    }
}

/// Computes the centered padding taking (h, w) to multiples of `multiple`.
pub fn pad_to_multiple(h: usize, w: usize, multiple: usize) -> PadSpec {
    let target = |side: usize| side.div_ceil(multiple) * multiple;
    let (th, tw) = (target(h), target(w));
    PadSpec {
        top: (th - h) / 2,
        bottom: th - h - (th - h) / 2,
        left: (tw - w) / 2,
        right: tw - w - (tw - w) / 2,
    }
}

/// Mirror index without edge duplication (..2,1,0 -> 1,2..), folding any
/// out-of-range offset back into [0, n).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = (2 * n - 2) as isize;
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

fn reflect_pad_chw(data: &[f32], c: usize, h: usize, w: usize, pad: &PadSpec) -> (Vec<f32>, usize, usize) {
    let nh = h + pad.top + pad.bottom;
    let nw = w + pad.left + pad.right;
    let mut out = vec![0.0f32; c * nh * nw];
    for ch in 0..c {
        let src = &data[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * nh * nw..(ch + 1) * nh * nw];
        for y in 0..nh {
            let sy = reflect_index(y as isize - pad.top as isize, h);
            for x in 0..nw {
                let sx = reflect_index(x as isize - pad.left as isize, w);
                dst[y * nw + x] = src[sy * w + sx];
            }
        }
    }
    (out, nh, nw)
}

/// Eval-mode forward over a whole image. Sides divisible by 32 go through
/// unpadded; anything else is reflect-padded up to the next multiple of 32
/// and the output is cropped back, so the result always matches the input
/// size.
pub fn predict_full(model: &Model, image: &ImageU8) -> Result<ProbMap, InferError> {
    model.set_eval();
    let (h, w) = (image.h, image.w);
    let pad = pad_to_multiple(h, w, 32);
    let x = image_to_tensor(image);

    let y = if pad.is_zero() {
        no_grad(|| model.forward(&x, None))?
    } else {
        let (padded, nh, nw) = reflect_pad_chw(&x.data(), 3, h, w, &pad);
        let xt = Tensor::from_vec(padded, &[1, 3, nh, nw])?;
        no_grad(|| model.forward(&xt, None))?
    };

    let ys = y.shape();
    let (oh, ow) = (ys[2], ys[3]);
    let yd = y.data();
    let mut out = Vec::with_capacity(h * w);
    for yy in 0..h {
        let row = (yy + pad.top) * ow + pad.left;
        out.extend_from_slice(&yd[row..row + w]);
    }
    drop(yd);
    debug_assert_eq!(oh, h + pad.top + pad.bottom);
    Ok(ProbMap { h, w, data: out })
}

/// Rotates an RGB image counterclockwise by k * 90 degrees (exact index
/// permutation).
pub fn rot90_image(image: &ImageU8, k: usize) -> ImageU8 {
    let k = k % 4;
    if k == 0 {
        return image.clone();
    }
    let (h, w) = (image.h, image.w);
    let (nh, nw) = if k % 2 == 0 { (h, w) } else { (w, h) };
    let mut out = vec![0u8; h * w * 3];
    for y in 0..nh {
        for x in 0..nw {
            // counterclockwise: new[y][x] = old[x][w-1-y] applied k times
            let (sy, sx) = match k {
                1 => (x, w - 1 - y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (h - 1 - x, y),
            };
            let src = (sy * w + sx) * 3;
            let dst = (y * nw + x) * 3;
            out[dst..dst + 3].copy_from_slice(&image.data[src..src + 3]);
        }
    }
    ImageU8 {
        h: nh,
        w: nw,
        data: out,
    }
}

/// Rotates a probability map clockwise by k * 90 degrees; the exact inverse
/// of [`rot90_image`]'s counterclockwise rotation for equal k.
pub fn rot90_prob_cw(prob: &ProbMap, k: usize) -> ProbMap {
    let k = k % 4;
    if k == 0 {
        return prob.clone();
    }
    let (h, w) = (prob.h, prob.w);
    let (nh, nw) = if k % 2 == 0 { (h, w) } else { (w, h) };
    let mut out = vec![0.0f32; h * w];
    for y in 0..nh {
        for x in 0..nw {
            // clockwise: new[y][x] = old[h-1-x][y] applied k times
            let (sy, sx) = match k {
                1 => (h - 1 - x, y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (x, w - 1 - y),
            };
            out[y * nw + x] = prob.data[sy * w + sx];
        }
    }
    ProbMap {
        h: nh,
        w: nw,
        data: out,
    }
}

/// Order-canonical mean of four aligned maps: per pixel the values are
/// sorted, summed pairwise, and divided by four. Permutation-invariant
/// bit-exactly and exact for four equal values.
fn average4(maps: [ProbMap; 4]) -> ProbMap {
    let (h, w) = (maps[0].h, maps[0].w);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let mut v = [maps[0].data[i], maps[1].data[i], maps[2].data[i], maps[3].data[i]];
        v.sort_by(f32::total_cmp);
        out.push(((v[0] + v[1]) + (v[2] + v[3])) * 0.25);
    }
    ProbMap { h, w, data: out }
}

/// TTA over an arbitrary predictor: rotate 0/90/180/270 CCW, predict,
/// inverse-rotate, average. Disabled TTA is a single plain prediction.
pub fn tta_predict_with<F>(
    mut predict: F,
    image: &ImageU8,
    config: &TtaConfig,
) -> Result<ProbMap, InferError>
where
    F: FnMut(&ImageU8) -> Result<ProbMap, InferError>,
{
    config.validate()?;
    if !config.enabled {
        return predict(image);
    }
    let mut aligned = Vec::with_capacity(4);
    for k in 0..4 {
        let rotated = rot90_image(image, k);
        let prob = predict(&rotated)?;
        if (prob.h, prob.w) != (rotated.h, rotated.w) {
            return Err(InferError::Config(format!(
                "predictor returned {}x{} for a {}x{} input",
                prob.h, prob.w, rotated.h, rotated.w
            )));
        }
        aligned.push(rot90_prob_cw(&prob, k));
    }
    let [a, b, c, d]: [ProbMap; 4] = aligned.try_into().unwrap();
    Ok(average4([a, b, c, d]))
}

/// TTA inference with the real model.
pub fn tta_predict(model: &Model, image: &ImageU8, config: &TtaConfig) -> Result<ProbMap, InferError> {
    tta_predict_with(|img| predict_full(model, img), image, config)
}

/// 1 where `prob >= threshold`, else 0.
pub fn binarize(prob: &ProbMap, threshold: f32) -> MaskU8 {
    MaskU8 {
        h: prob.h,
        w: prob.w,
        data: prob.data.iter().map(|&p| u8::from(p >= threshold)).collect(),
    }
}
