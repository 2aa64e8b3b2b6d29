//! Synthetic line datasets for desk-scale training experiments: images with
//! a randomly placed bright 3-5 pixel wide line over textured background,
//! paired with the exact line mask.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{image_to_file, mask_to_file, DataError, ImageU8, MaskU8, SamplePair};

fn jitter(rng: &mut ChaCha8Rng, base: i32, spread: i32) -> u8 {
    (base + rng.random_range(-spread..=spread)).clamp(0, 255) as u8
}

/// One sample: a line of the given width between random points on opposite
/// edges, drawn bright over a dark textured background.
fn line_sample(id: String, side: usize, rng: &mut ChaCha8Rng) -> SamplePair {
    let width = rng.random_range(3..=5) as f64;
    let s = side as f64 - 1.0;
    // endpoints on opposite edges, random axis
    let (x0, y0, x1, y1) = if rng.random::<bool>() {
        (
            rng.random_range(0.0..=s),
            0.0,
            rng.random_range(0.0..=s),
            s,
        )
    } else {
        (
            0.0,
            rng.random_range(0.0..=s),
            s,
            rng.random_range(0.0..=s),
        )
    };
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len_sq = dx * dx + dy * dy;

    let mut mask = vec![0u8; side * side];
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 - x0, y as f64 - y0);
            let t = ((px * dx + py * dy) / len_sq).clamp(0.0, 1.0);
            let (cx, cy) = (px - t * dx, py - t * dy);
            let dist = (cx * cx + cy * cy).sqrt();
            if dist <= width / 2.0 {
                mask[y * side + x] = 1;
            }
        }
    }

    let mut img = Vec::with_capacity(side * side * 3);
    for &m in &mask {
        if m == 1 {
            // bright road-like gray
            let v = jitter(rng, 210, 18);
            img.extend_from_slice(&[v, v, jitter(rng, 205, 18)]);
        } else {
            // dark green-brown background
            img.extend_from_slice(&[
                jitter(rng, 55, 20),
                jitter(rng, 80, 20),
                jitter(rng, 45, 20),
            ]);
        }
    }

    SamplePair {
        id,
        image: ImageU8 {
            h: side,
            w: side,
            data: img,
        },
        mask: MaskU8 {
            h: side,
            w: side,
            data: mask,
        },
    }
}

/// Generates `count` line samples of size `side` x `side`.
pub fn line_dataset(count: usize, side: usize, seed: u64) -> Vec<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| line_sample(format!("line{i:03}"), side, &mut rng))
        .collect()
}

/// Writes a line dataset to `dir` as PPM images and PGM masks using the given
/// filename suffixes, returning the sample ids.
pub fn write_line_dataset(
    dir: &Path,
    count: usize,
    side: usize,
    seed: u64,
    image_suffix: &str,
    mask_suffix: &str,
) -> Result<Vec<String>, DataError> {
    let pairs = line_dataset(count, side, seed);
    let mut ids = Vec::with_capacity(count);
    for pair in &pairs {
        image_to_file(
            &pair.image,
            &dir.join(format!("{}{image_suffix}.ppm", pair.id)),
        )?;
        mask_to_file(&pair.mask, &dir.join(format!("{}{mask_suffix}.pgm", pair.id)))?;
        ids.push(pair.id.clone());
    }
    Ok(ids)
}
