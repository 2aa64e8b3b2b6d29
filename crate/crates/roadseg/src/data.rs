//! Dataset loading and encoding: paired RGB images and grayscale road masks,
//! label binarization, train/holdout splitting, batch assembly, and mask /
//! overlay emission.
//!
//! Supported formats: 8-bit PNG (RGB; RGBA with alpha dropped; grayscale
//! expanded) and binary PPM/PGM. The PNM codec is hand-rolled so tests can
//! fabricate images with no codec at all.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_paired, color_jitter, sample_params, AugmentConfig, AugmentError};
use crate::tensor::{Tensor, TensorError};

/// Gray level at and above which a label pixel counts as road.
pub const DEFAULT_MASK_THRESHOLD: u8 = 128;

/// An 8-bit RGB image in HWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageU8 {
    pub h: usize,
    pub w: usize,
    /// len = h * w * 3
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), h * w * 3);
        ImageU8 { h, w, data }
    }

    pub fn px(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// A binary mask in HW order with values in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskU8 {
    pub h: usize,
    pub w: usize,
    /// len = h * w
    pub data: Vec<u8>,
}

/// One dataset element: an RGB image with its binary road mask.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub id: String,
    pub image: ImageU8,
    pub mask: MaskU8,
}

/// A float probability map in HW order, values in [0, 1].
#[derive(Clone, Debug)]
pub struct ProbMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

#[derive(Debug)]
pub enum DataError {
    Decode { path: PathBuf, message: String },
    Pairing { image: Vec<usize>, mask: Vec<usize> },
    Batching(String),
    EmptyDataset(PathBuf),
    Config(String),
    Io { path: PathBuf, source: std::io::Error },
    Augment(AugmentError),
    Tensor(TensorError),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Decode { path, message } => {
                write!(f, "cannot decode {}: {message}", path.display())
            }
            DataError::Pairing { image, mask } => write!(
                f,
                "image {}x{} and mask {}x{} do not pair",
                image[0], image[1], mask[0], mask[1]
            ),
            DataError::Batching(m) => write!(f, "batching: {m}"),
            DataError::EmptyDataset(p) => write!(f, "no image pairs found in {}", p.display()),
            DataError::Config(m) => write!(f, "data config: {m}"),
            DataError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            DataError::Augment(e) => write!(f, "{e}"),
            DataError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<AugmentError> for DataError {
    fn from(e: AugmentError) -> Self {
        DataError::Augment(e)
    }
}

impl From<TensorError> for DataError {
    fn from(e: TensorError) -> Self {
        DataError::Tensor(e)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// decoding / encoding

enum Decoded {
    Gray(usize, usize, Vec<u8>),
    Rgb(usize, usize, Vec<u8>),
}

fn decode_pnm(path: &Path, bytes: &[u8]) -> Result<Decoded, DataError> {
    let bad = |m: &str| DataError::Decode {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if bytes.len() < 2 {
        return Err(bad("file too short"));
    }
    let rgb = match &bytes[..2] {
        b"P5" => false,
        b"P6" => true,
        _ => return Err(bad("expected binary PGM (P5) or PPM (P6)")),
    };
    // Header: magic, whitespace-separated width/height/maxval with '#' comments.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed PNM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("header value out of range"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PNM supported"));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero-sized image"));
    }
    pos += 1; // single whitespace after maxval
    let channels = if rgb { 3 } else { 1 };
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(bad("PNM payload truncated"));
    }
    let data = bytes[pos..pos + need].to_vec();
    Ok(if rgb {
        Decoded::Rgb(h, w, data)
    } else {
        Decoded::Gray(h, w, data)
    })
}

fn decode_file(path: &Path) -> Result<Decoded, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") | Some("pgm") | Some("pnm") => decode_pnm(path, &bytes),
        _ => {
            let img = image::load_from_memory(&bytes).map_err(|e| DataError::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            match img {
                image::DynamicImage::ImageLuma8(g) => Ok(Decoded::Gray(
                    g.height() as usize,
                    g.width() as usize,
                    g.into_raw(),
                )),
                other => {
                    let rgb = other.to_rgb8();
                    Ok(Decoded::Rgb(
                        rgb.height() as usize,
                        rgb.width() as usize,
                        rgb.into_raw(),
                    ))
                }
            }
        }
    }
}

/// Loads an RGB image; grayscale sources are expanded, alpha is dropped.
pub fn load_image(path: &Path) -> Result<ImageU8, DataError> {
    match decode_file(path)? {
        Decoded::Rgb(h, w, data) => Ok(ImageU8 { h, w, data }),
        Decoded::Gray(h, w, data) => {
            let mut rgb = Vec::with_capacity(data.len() * 3);
            for v in data {
                rgb.extend_from_slice(&[v, v, v]);
            }
            Ok(ImageU8 { h, w, data: rgb })
        }
    }
}

/// Loads a grayscale mask and binarizes it: gray >= threshold counts as road.
/// RGB sources are reduced by their red channel (road masks are gray anyway).
pub fn load_mask(path: &Path, threshold: u8) -> Result<MaskU8, DataError> {
    let (h, w, gray): (usize, usize, Vec<u8>) = match decode_file(path)? {
        Decoded::Gray(h, w, data) => (h, w, data),
        Decoded::Rgb(h, w, data) => (h, w, data.chunks_exact(3).map(|p| p[0]).collect()),
    };
    let data = gray.into_iter().map(|v| u8::from(v >= threshold)).collect();
    Ok(MaskU8 { h, w, data })
}

/// Loads an image/mask pair, enforcing equal spatial dimensions.
pub fn load_pair(
    image_path: &Path,
    mask_path: &Path,
    threshold: u8,
) -> Result<SamplePair, DataError> {
    let image = load_image(image_path)?;
    let mask = load_mask(mask_path, threshold)?;
    if image.h != mask.h || image.w != mask.w {
        return Err(DataError::Pairing {
            image: vec![image.h, image.w],
            mask: vec![mask.h, mask.w],
        });
    }
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SamplePair { id, image, mask })
}

fn write_pnm_gray(path: &Path, h: usize, w: usize, data: &[u8]) -> Result<(), DataError> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(data);
    fs::write(path, out).map_err(io_err(path))
}

fn write_pnm_rgb(path: &Path, h: usize, w: usize, data: &[u8]) -> Result<(), DataError> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(data);
    fs::write(path, out).map_err(io_err(path))
}

fn save_gray(path: &Path, h: usize, w: usize, data: &[u8]) -> Result<(), DataError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") | Some("pnm") => write_pnm_gray(path, h, w, data),
        _ => image::save_buffer(
            path,
            data,
            w as u32,
            h as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| DataError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        }),
    }
}

fn save_rgb(path: &Path, h: usize, w: usize, data: &[u8]) -> Result<(), DataError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") | Some("pnm") => write_pnm_rgb(path, h, w, data),
        _ => image::save_buffer(
            path,
            data,
            w as u32,
            h as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| DataError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        }),
    }
}

/// Writes a probability map as an 8-bit grayscale mask file: 255 where
/// `prob >= threshold`, 0 elsewhere.
pub fn write_mask(prob: &ProbMap, threshold: f32, path: &Path) -> Result<(), DataError> {
    let data: Vec<u8> = prob
        .data
        .iter()
        .map(|&p| if p >= threshold { 255 } else { 0 })
        .collect();
    save_gray(path, prob.h, prob.w, &data)
}

/// Writes the source image with road pixels blended 50% toward pure green.
pub fn write_overlay(image: &ImageU8, mask: &MaskU8, path: &Path) -> Result<(), DataError> {
    assert_eq!((image.h, image.w), (mask.h, mask.w), "overlay dims");
    let blend = |a: u8, b: u8| -> u8 { ((a as f32 + b as f32) * 0.5 + 0.5) as u8 };
    let mut out = image.data.clone();
    for (i, &m) in mask.data.iter().enumerate() {
        if m != 0 {
            out[i * 3] = blend(image.data[i * 3], 0);
            out[i * 3 + 1] = blend(image.data[i * 3 + 1], 255);
            out[i * 3 + 2] = blend(image.data[i * 3 + 2], 0);
        }
    }
    save_rgb(path, image.h, image.w, &out)
}

/// Exact PNG/PPM round trip helper for masks written by [`write_mask`].
pub fn mask_to_file(mask: &MaskU8, path: &Path) -> Result<(), DataError> {
    let data: Vec<u8> = mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    save_gray(path, mask.h, mask.w, &data)
}

pub fn image_to_file(image: &ImageU8, path: &Path) -> Result<(), DataError> {
    save_rgb(path, image.h, image.w, &image.data)
}

// ---------------------------------------------------------------------------
// dataset scanning and splitting

const IMAGE_EXTS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

/// One discovered image/mask file pair.
#[derive(Clone, Debug)]
pub struct DatasetEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// Scans a flat directory for images whose stem ends with `image_suffix` and
/// pairs each with the mask file obtained by substituting `mask_suffix`
/// (any supported extension). Entries are sorted by id.
pub fn scan_dataset(
    dir: &Path,
    image_suffix: &str,
    mask_suffix: &str,
) -> Result<Vec<DatasetEntry>, DataError> {
    if !dir.is_dir() {
        return Err(DataError::EmptyDataset(dir.to_path_buf()));
    }
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else {
            continue;
        };
        if !IMAGE_EXTS.contains(&ext) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let Some(id) = stem.strip_suffix(image_suffix) else {
            continue;
        };
        let mask_stem = format!("{id}{mask_suffix}");
        let mask_path = IMAGE_EXTS
            .iter()
            .map(|e| dir.join(format!("{mask_stem}.{e}")))
            .find(|p| p.is_file());
        if let Some(mask_path) = mask_path {
            entries.push(DatasetEntry {
                id: id.to_string(),
                image_path: path,
                mask_path,
            });
        }
    }
    if entries.is_empty() {
        return Err(DataError::EmptyDataset(dir.to_path_buf()));
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(entries)
}

/// A deterministic train/holdout partition of dataset ids.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub holdout_ids: Vec<String>,
    pub seed: u64,
    pub holdout_fraction: f64,
}

/// Shuffles ids with the seed and reserves `round(fraction * n)` of them
/// (round half up) as the holdout. Both sides are returned sorted.
pub fn split_dataset(ids: &[String], fraction: f64, seed: u64) -> Result<DatasetSplit, DataError> {
    if ids.is_empty() {
        return Err(DataError::Config("cannot split an empty id list".into()));
    }
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(DataError::Config(format!(
            "holdout fraction must be in (0, 1), got {fraction}"
        )));
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled: Vec<String> = ids.to_vec();
    for i in (1..shuffled.len()).rev() {
        let j = rng.random_range(0..=i);
        shuffled.swap(i, j);
    }
    let k = (fraction * ids.len() as f64).round() as usize;
    let mut holdout_ids: Vec<String> = shuffled[..k].to_vec();
    let mut train_ids: Vec<String> = shuffled[k..].to_vec();
    holdout_ids.sort_unstable();
    train_ids.sort_unstable();
    Ok(DatasetSplit {
        train_ids,
        holdout_ids,
        seed,
        holdout_fraction: fraction,
    })
}

/// Persists a split as line-oriented text: `train <id>` / `holdout <id>`.
pub fn write_split_manifest(split: &DatasetSplit, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for id in &split.train_ids {
        out.push_str("train ");
        out.push_str(id);
        out.push('\n');
    }
    for id in &split.holdout_ids {
        out.push_str("holdout ");
        out.push_str(id);
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_split_manifest(path: &Path) -> Result<DatasetSplit, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut split = DatasetSplit {
        train_ids: Vec::new(),
        holdout_ids: Vec::new(),
        seed: 0,
        holdout_fraction: 0.0,
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once(' ') {
            Some(("train", id)) => split.train_ids.push(id.to_string()),
            Some(("holdout", id)) => split.holdout_ids.push(id.to_string()),
            _ => {
                return Err(DataError::Config(format!(
                    "bad split manifest line {}: {line:?}",
                    lineno + 1
                )))
            }
        }
    }
    if split.train_ids.is_empty() && split.holdout_ids.is_empty() {
        return Err(DataError::Config("empty split manifest".into()));
    }
    Ok(split)
}

// ---------------------------------------------------------------------------
// batches

/// A training batch in channel-first layout: images N x 3 x S x S scaled to
/// [0, 1] by /255, masks N x 1 x S x S with values {0, 1}.
#[derive(Debug)]
pub struct Batch {
    pub images: Tensor,
    pub masks: Tensor,
}

fn image_to_chw(image: &ImageU8) -> Vec<f32> {
    let plane = image.h * image.w;
    let mut out = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        out[i] = image.data[i * 3] as f32 / 255.0;
        out[plane + i] = image.data[i * 3 + 1] as f32 / 255.0;
        out[2 * plane + i] = image.data[i * 3 + 2] as f32 / 255.0;
    }
    out
}

/// Converts one image to a (1, 3, H, W) float tensor.
pub fn image_to_tensor(image: &ImageU8) -> Tensor {
    Tensor::from_vec(image_to_chw(image), &[1, 3, image.h, image.w]).expect("image tensor")
}

/// Stacks sample pairs into a batch. With augmentation, every pair is
/// geometrically and photometrically transformed to `crop_size`; without it,
/// all pairs must share dimensions divisible by 32.
pub fn make_batch(
    pairs: &[SamplePair],
    augment: Option<(&AugmentConfig, &mut ChaCha8Rng)>,
) -> Result<Batch, DataError> {
    if pairs.is_empty() {
        return Err(DataError::Batching("empty batch".into()));
    }

    let processed: Vec<(ImageU8, MaskU8)> = match augment {
        Some((cfg, rng)) => {
            let mut out = Vec::with_capacity(pairs.len());
            for pair in pairs {
                let params = sample_params(rng, cfg, pair.image.h, pair.image.w)?;
                let (img, mask) = apply_paired(&pair.image, &pair.mask, &params, cfg.crop_size);
                let img = color_jitter(&img, &params);
                out.push((img, mask));
            }
            out
        }
        None => {
            let (h0, w0) = (pairs[0].image.h, pairs[0].image.w);
            for p in pairs {
                if p.image.h != h0 || p.image.w != w0 {
                    return Err(DataError::Batching(format!(
                        "heterogeneous sizes without augmentation: {}x{} vs {h0}x{w0}",
                        p.image.h, p.image.w
                    )));
                }
            }
            if h0 % 32 != 0 || w0 % 32 != 0 {
                return Err(DataError::Batching(format!(
                    "batch sides {h0}x{w0} must be divisible by 32 when not cropping"
                )));
            }
            pairs.iter().map(|p| (p.image.clone(), p.mask.clone())).collect()
        }
    };

    let (h, w) = (processed[0].0.h, processed[0].0.w);
    let n = processed.len();
    let mut images = Vec::with_capacity(n * 3 * h * w);
    let mut masks = Vec::with_capacity(n * h * w);
    for (img, mask) in &processed {
        images.extend_from_slice(&image_to_chw(img));
        masks.extend(mask.data.iter().map(|&v| v as f32));
    }
    Ok(Batch {
        images: Tensor::from_vec(images, &[n, 3, h, w])?,
        masks: Tensor::from_vec(masks, &[n, 1, h, w])?,
    })
}
