//! Training-time augmentation: paired spatial transforms (scale, rotate,
//! crop) applied identically to image and mask, plus photometric jitter on
//! the image only.
//!
//! The spatial pipeline is a single fused inverse-mapping pass: every output
//! pixel is pulled through crop -> inverse rotation about the scaled-image
//! center -> inverse scale, so each pixel is interpolated exactly once.
//! Images sample bilinearly with edge clamping; masks sample nearest-neighbor
//! so values stay binary.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ImageU8, MaskU8};

/// Ranges of the augmentation draws.
#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    pub rotation_deg_range: (f64, f64),
    pub crop_size: usize,
    pub brightness_delta: f64,
    pub contrast_range: (f64, f64),
    pub hue_delta_deg: f64,
    pub saturation_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_range: (0.6, 1.4),
            rotation_deg_range: (-30.0, 30.0),
            crop_size: 448,
            brightness_delta: 0.2,
            contrast_range: (0.8, 1.2),
            hue_delta_deg: 10.0,
            saturation_range: (0.8, 1.2),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.scale_range.0 <= 0.0 || self.scale_range.0 > self.scale_range.1 {
            return Err(AugmentError::Config(format!(
                "scale range must be positive and ordered, got {:?}",
                self.scale_range
            )));
        }
        if self.rotation_deg_range.0 > self.rotation_deg_range.1 {
            return Err(AugmentError::Config("rotation range is reversed".into()));
        }
        if self.crop_size == 0 {
            return Err(AugmentError::Config("crop_size must be positive".into()));
        }
        if self.brightness_delta < 0.0 || self.hue_delta_deg < 0.0 {
            return Err(AugmentError::Config("jitter deltas must be non-negative".into()));
        }
        if self.contrast_range.0 > self.contrast_range.1
            || self.saturation_range.0 > self.saturation_range.1
        {
            return Err(AugmentError::Config("jitter ranges are reversed".into()));
        }
        Ok(())
    }
}

/// One concrete draw from the configured ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub angle_deg: f64,
    pub crop_x: usize,
    pub crop_y: usize,
    pub brightness: f64,
    pub contrast: f64,
    pub hue_deg: f64,
    pub saturation: f64,
}

impl AugmentParams {
    /// No-op parameters: top-left crop, neutral photometrics.
    pub fn identity() -> Self {
        AugmentParams {
            scale: 1.0,
            angle_deg: 0.0,
            crop_x: 0,
            crop_y: 0,
            brightness: 0.0,
            contrast: 1.0,
            hue_deg: 0.0,
            saturation: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub enum AugmentError {
    Config(String),
    SourceTooSmall { h: usize, w: usize, crop: usize },
}

impl fmt::Display for AugmentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentError::Config(m) => write!(f, "augment config: {m}"),
            AugmentError::SourceTooSmall { h, w, crop } => write!(
                f,
                "source {h}x{w} cannot produce a {crop}x{crop} crop at any configured scale"
            ),
        }
    }
}

impl std::error::Error for AugmentError {}

fn scaled_dim(side: usize, scale: f64) -> usize {
    ((side as f64 * scale).round() as usize).max(1)
}

fn range_draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws augmentation parameters for a source of the given size. The scale is
/// resampled until the scaled image admits the crop; if even the maximum
/// scale cannot, this is a configuration error.
pub fn sample_params(
    rng: &mut ChaCha8Rng,
    config: &AugmentConfig,
    src_h: usize,
    src_w: usize,
) -> Result<AugmentParams, AugmentError> {
    config.validate()?;
    let crop = config.crop_size;
    let (smin, smax) = config.scale_range;
    if scaled_dim(src_h.min(src_w), smax) < crop {
        return Err(AugmentError::SourceTooSmall {
            h: src_h,
            w: src_w,
            crop,
        });
    }

    let (mut scale, mut sh, mut sw);
    loop {
        scale = range_draw(rng, smin, smax);
        sh = scaled_dim(src_h, scale);
        sw = scaled_dim(src_w, scale);
        if sh >= crop && sw >= crop {
            break;
        }
    }

    let angle_deg = range_draw(rng, config.rotation_deg_range.0, config.rotation_deg_range.1);
    let crop_y = rng.random_range(0..=sh - crop);
    let crop_x = rng.random_range(0..=sw - crop);
    let brightness = range_draw(rng, -config.brightness_delta, config.brightness_delta);
    let contrast = range_draw(rng, config.contrast_range.0, config.contrast_range.1);
    let hue_deg = range_draw(rng, -config.hue_delta_deg, config.hue_delta_deg);
    let saturation = range_draw(rng, config.saturation_range.0, config.saturation_range.1);

    Ok(AugmentParams {
        scale,
        angle_deg,
        crop_x,
        crop_y,
        brightness,
        contrast,
        hue_deg,
        saturation,
    })
}

/// Applies scale -> rotate -> crop with one inverse-mapping pass per output
/// pixel to both image (bilinear, edge clamp) and mask (nearest, edge clamp).
pub fn apply_paired(
    image: &ImageU8,
    mask: &MaskU8,
    params: &AugmentParams,
    crop_size: usize,
) -> (ImageU8, MaskU8) {
    assert_eq!((image.h, image.w), (mask.h, mask.w), "paired dims");
    let (h, w) = (image.h, image.w);
    let sh = scaled_dim(h, params.scale);
    let sw = scaled_dim(w, params.scale);
    let cy = (sh as f64 - 1.0) / 2.0;
    let cx = (sw as f64 - 1.0) / 2.0;
    let theta = params.angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let inv_scale = 1.0 / params.scale;

    let mut out_img = vec![0u8; crop_size * crop_size * 3];
    let mut out_mask = vec![0u8; crop_size * crop_size];

    for oy in 0..crop_size {
        let py = (params.crop_y + oy) as f64;
        let dy = py - cy;
        for ox in 0..crop_size {
            let px = (params.crop_x + ox) as f64;
            let dx = px - cx;
            // inverse rotation about the scaled-image center
            let qx = cx + cos * dx + sin * dy;
            let qy = cy - sin * dx + cos * dy;
            // inverse scale into source coordinates, edge-clamped
            let sx = (qx * inv_scale).clamp(0.0, (w - 1) as f64);
            let sy = (qy * inv_scale).clamp(0.0, (h - 1) as f64);

            // bilinear image sample
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = (sx - x0 as f64) as f32;
            let fy = (sy - y0 as f64) as f32;
            let oi = (oy * crop_size + ox) * 3;
            for ch in 0..3 {
                let v00 = image.data[(y0 * w + x0) * 3 + ch] as f32;
                let v01 = image.data[(y0 * w + x1) * 3 + ch] as f32;
                let v10 = image.data[(y1 * w + x0) * 3 + ch] as f32;
                let v11 = image.data[(y1 * w + x1) * 3 + ch] as f32;
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                let v = top * (1.0 - fy) + bot * fy;
                out_img[oi + ch] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }

            // nearest mask sample
            let nx = ((sx + 0.5).floor() as usize).min(w - 1);
            let ny = ((sy + 0.5).floor() as usize).min(h - 1);
            out_mask[oy * crop_size + ox] = mask.data[ny * w + nx];
        }
    }

    (
        ImageU8 {
            h: crop_size,
            w: crop_size,
            data: out_img,
        },
        MaskU8 {
            h: crop_size,
            w: crop_size,
            data: out_mask,
        },
    )
}

/// RGB in [0, 1] to (hue degrees, saturation, value).
pub(crate) fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let v = max;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / d).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    (h, s, v)
}

pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Photometric jitter, image only: brightness shift, contrast about mid-gray,
/// hue rotation and saturation scaling in HSV, with a final clamp to [0, 1]
/// and round-half-up quantization. Neutral parameters are a bit-exact no-op.
pub fn color_jitter(image: &ImageU8, params: &AugmentParams) -> ImageU8 {
    let do_bright = params.brightness != 0.0;
    let do_contrast = params.contrast != 1.0;
    let do_hsv = params.hue_deg != 0.0 || params.saturation != 1.0;
    if !do_bright && !do_contrast && !do_hsv {
        return image.clone();
    }

    let brightness = params.brightness as f32;
    let contrast = params.contrast as f32;
    let hue = params.hue_deg as f32;
    let sat = params.saturation as f32;

    let mut out = vec![0u8; image.data.len()];
    for (px_out, px_in) in out.chunks_exact_mut(3).zip(image.data.chunks_exact(3)) {
        let mut r = px_in[0] as f32 / 255.0;
        let mut g = px_in[1] as f32 / 255.0;
        let mut b = px_in[2] as f32 / 255.0;
        if do_bright {
            r += brightness;
            g += brightness;
            b += brightness;
        }
        if do_contrast {
            r = (r - 0.5) * contrast + 0.5;
            g = (g - 0.5) * contrast + 0.5;
            b = (b - 0.5) * contrast + 0.5;
        }
        if do_hsv {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (nr, ng, nb) = hsv_to_rgb(h + hue, s * sat, v);
            r = nr;
            g = ng;
            b = nb;
        }
        px_out[0] = (r.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8;
        px_out[1] = (g.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8;
        px_out[2] = (b.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8;
    }
    ImageU8 {
        h: image.h,
        w: image.w,
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn gradient_image(h: usize, w: usize) -> ImageU8 {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&[
                    ((x * 7 + y * 3) % 256) as u8,
                    ((x * 13 + y * 5) % 256) as u8,
                    ((x * 3 + y * 11) % 256) as u8,
                ]);
            }
        }
        ImageU8 { h, w, data }
    }

    fn stripe_mask(h: usize, w: usize) -> MaskU8 {
        let data = (0..h * w).map(|i| ((i / w) % 3 == 0) as u8).collect();
        MaskU8 { h, w, data }
    }

    #[test]
    fn identity_params_take_the_top_left_crop() {
        let img = gradient_image(32, 40);
        let mask = stripe_mask(32, 40);
        let (ci, cm) = apply_paired(&img, &mask, &AugmentParams::identity(), 16);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(ci.px(y, x), img.px(y, x), "image ({y},{x})");
                assert_eq!(cm.data[y * 16 + x], mask.data[y * 40 + x], "mask ({y},{x})");
            }
        }
    }

    #[test]
    fn mask_stays_binary_under_any_params() {
        let img = gradient_image(48, 48);
        let mask = stripe_mask(48, 48);
        let cfg = AugmentConfig {
            crop_size: 24,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let params = sample_params(&mut rng, &cfg, 48, 48).unwrap();
            let (_, m) = apply_paired(&img, &mask, &params, cfg.crop_size);
            assert_eq!(m.h, 24);
            assert_eq!(m.w, 24);
            assert!(m.data.iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn all_ones_mask_stays_all_ones() {
        // Edge clamping keeps every sample inside the constant field.
        let img = gradient_image(40, 40);
        let mask = MaskU8 {
            h: 40,
            w: 40,
            data: vec![1; 1600],
        };
        let cfg = AugmentConfig {
            crop_size: 20,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let params = sample_params(&mut rng, &cfg, 40, 40).unwrap();
            let (_, m) = apply_paired(&img, &mask, &params, cfg.crop_size);
            assert!(m.data.iter().all(|&v| v == 1));
        }
    }

    #[test]
    fn params_are_deterministic_per_seed() {
        let cfg = AugmentConfig::default();
        let a = sample_params(&mut ChaCha8Rng::seed_from_u64(42), &cfg, 1024, 1024).unwrap();
        let b = sample_params(&mut ChaCha8Rng::seed_from_u64(42), &cfg, 1024, 1024).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_origin_bounds_at_unit_scale() {
        let cfg = AugmentConfig {
            scale_range: (1.0, 1.0),
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = sample_params(&mut rng, &cfg, 1024, 1024).unwrap();
            assert!(p.crop_x <= 576 && p.crop_y <= 576, "origin ({}, {})", p.crop_x, p.crop_y);
        }
    }

    #[test]
    fn draw_ranges_cover_the_configured_intervals() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut smin = f64::INFINITY;
        let mut smax = f64::NEG_INFINITY;
        let mut amin = f64::INFINITY;
        let mut amax = f64::NEG_INFINITY;
        for _ in 0..10000 {
            let p = sample_params(&mut rng, &cfg, 1024, 1024).unwrap();
            smin = smin.min(p.scale);
            smax = smax.max(p.scale);
            amin = amin.min(p.angle_deg);
            amax = amax.max(p.angle_deg);
        }
        assert!(smin >= 0.6 && smin <= 0.61, "scale min {smin}");
        assert!(smax >= 1.39 && smax <= 1.4, "scale max {smax}");
        assert!(amin >= -30.0 && amin <= -29.4, "angle min {amin}");
        assert!(amax <= 30.0 && amax >= 29.4, "angle max {amax}");
    }

    #[test]
    fn source_too_small_is_an_error() {
        let cfg = AugmentConfig::default(); // crop 448
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            sample_params(&mut rng, &cfg, 64, 64),
            Err(AugmentError::SourceTooSmall { .. })
        ));
    }

    #[test]
    fn neutral_jitter_is_identity() {
        let img = gradient_image(8, 8);
        let out = color_jitter(&img, &AugmentParams::identity());
        assert_eq!(out, img);
    }

    #[test]
    fn brightness_shift_closed_form() {
        // mid-gray 128: 128/255 + 0.2 = 0.702.. -> round(0.702 * 255) = 179
        let img = ImageU8 {
            h: 1,
            w: 1,
            data: vec![128, 128, 128],
        };
        let params = AugmentParams {
            brightness: 0.2,
            ..AugmentParams::identity()
        };
        let out = color_jitter(&img, &params);
        assert_eq!(out.data, vec![179, 179, 179]);
    }

    #[test]
    fn hsv_roundtrip_within_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let r: f32 = rng.random();
            let g: f32 = rng.random();
            let b: f32 = rng.random();
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            for (a, c) in [(r, r2), (g, g2), (b, b2)] {
                let qa = (a * 255.0 + 0.5).floor();
                let qc = (c * 255.0 + 0.5).floor();
                assert!(
                    (qa - qc).abs() <= 1.0,
                    "rgb {r},{g},{b} -> hsv {h},{s},{v} -> {r2},{g2},{b2}"
                );
            }
        }
    }

    #[test]
    fn geometric_pairing_of_image_and_mask() {
        // A synthetic image whose red channel equals 255 * mask must stay
        // consistent: thresholding red at 128 after augmentation agrees with
        // the augmented mask away from interpolation boundaries.
        let (h, w) = (96, 96);
        let mask = MaskU8 {
            h,
            w,
            data: (0..h * w)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    (y / 8 % 2 == 0 && x / 8 % 2 == 0) as u8
                })
                .collect(),
        };
        let mut data = Vec::with_capacity(h * w * 3);
        for &m in &mask.data {
            data.extend_from_slice(&[m * 255, 0, 0]);
        }
        let img = ImageU8 { h, w, data };

        let cfg = AugmentConfig {
            crop_size: 48,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let params = sample_params(&mut rng, &cfg, h, w).unwrap();
            let (ci, cm) = apply_paired(&img, &mask, &params, cfg.crop_size);
            let agree = (0..48 * 48)
                .filter(|&i| (ci.data[i * 3] >= 128) == (cm.data[i] == 1))
                .count();
            let frac = agree as f64 / (48.0 * 48.0);
            assert!(frac >= 0.99, "agreement {frac}");
        }
    }
}
