//! Checkpoint serialization.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic   b"RSEG"
//! version u32 (= 1)
//! config  stem_channels u32, stage_depths 4xu32, stage_channels 4xu32,
//!         decoder_reduction u32, input_channels u32, output_channels u32,
//!         dropout_p f64
//! meta    iteration u64, holdout_iou f32, seed u64
//! count   u32
//! tensor* name_len u16 + utf8 name, rank u8, dims rank x u32, data f32 x numel
//! crc32   u32 over every preceding byte
//! ```
//!
//! Round trips are bit-exact; loading validates magic, version, CRC and the
//! shape of every tensor against the embedded config before any model state
//! is touched.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::model::{param_layout, Model, ModelConfig};
use crate::tensor::{BnStats, TensorBase};

pub const MAGIC: [u8; 4] = *b"RSEG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub holdout_iou: f32,
    pub seed: u64,
}

/// Plain in-memory form of a checkpoint: config, metadata and named tensors
/// in layout order. `Send + Sync`, so parallel inference workers can share it
/// and instantiate their own models.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

#[derive(Debug)]
pub enum CheckpointError {
    BadMagic,
    Version { expected: u32, found: u32 },
    Truncated { at: &'static str },
    CrcMismatch { expected: u32, found: u32 },
    Integrity(String),
    Io(std::io::Error),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            CheckpointError::Version { expected, found } => {
                write!(f, "unsupported checkpoint version {found}, expected {expected}")
            }
            CheckpointError::Truncated { at } => write!(f, "checkpoint truncated while reading {at}"),
            CheckpointError::CrcMismatch { expected, found } => {
                write!(f, "checkpoint CRC mismatch: stored {expected:#010x}, computed {found:#010x}")
            }
            CheckpointError::Integrity(m) => write!(f, "checkpoint integrity: {m}"),
            CheckpointError::Io(e) => write!(f, "checkpoint i/o: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated { at: what });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32(&mut self, what: &'static str) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);

        let c = &self.config;
        put_u32(&mut buf, c.stem_channels as u32);
        for d in c.stage_depths {
            put_u32(&mut buf, d as u32);
        }
        for ch in c.stage_channels {
            put_u32(&mut buf, ch as u32);
        }
        put_u32(&mut buf, c.decoder_reduction as u32);
        put_u32(&mut buf, c.input_channels as u32);
        put_u32(&mut buf, c.output_channels as u32);
        buf.extend_from_slice(&c.dropout_p.to_le_bytes());

        buf.extend_from_slice(&self.meta.iteration.to_le_bytes());
        buf.extend_from_slice(&self.meta.holdout_iou.to_le_bytes());
        buf.extend_from_slice(&self.meta.seed.to_le_bytes());

        put_u32(&mut buf, self.tensors.len() as u32);
        for (name, shape, data) in &self.tensors {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(shape.len() as u8);
            for &d in shape {
                put_u32(&mut buf, d as u32);
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        let crc = crc32fast::hash(&buf);
        put_u32(&mut buf, crc);
        buf
    }

    pub fn decode(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                expected: FORMAT_VERSION,
                found: version,
            });
        }

        let stem_channels = r.u32("config")? as usize;
        let mut stage_depths = [0usize; 4];
        for d in &mut stage_depths {
            *d = r.u32("config")? as usize;
        }
        let mut stage_channels = [0usize; 4];
        for c in &mut stage_channels {
            *c = r.u32("config")? as usize;
        }
        let decoder_reduction = r.u32("config")? as usize;
        let input_channels = r.u32("config")? as usize;
        let output_channels = r.u32("config")? as usize;
        let dropout_p = r.f64("config")?;
        let config = ModelConfig {
            stage_depths,
            stage_channels,
            stem_channels,
            dropout_p,
            decoder_reduction,
            input_channels,
            output_channels,
        };

        let meta = CheckpointMeta {
            iteration: r.u64("metadata")?,
            holdout_iou: r.f32("metadata")?,
            seed: r.u64("metadata")?,
        };

        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16("tensor name")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| CheckpointError::Integrity("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor dims")? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4, "tensor data")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push((name, shape, data));
        }

        let body_end = r.pos;
        let stored = r.u32("crc")?;
        if r.pos != buf.len() {
            return Err(CheckpointError::Integrity("trailing bytes after CRC".into()));
        }
        let computed = crc32fast::hash(&buf[..body_end]);
        if stored != computed {
            return Err(CheckpointError::CrcMismatch {
                expected: stored,
                found: computed,
            });
        }
        Ok(Checkpoint {
            config,
            meta,
            tensors,
        })
    }
}

/// Extracts a plain checkpoint from a model: parameters in layout order, then
/// per-layer running statistics as `<layer>.running_mean` / `.running_var`.
pub fn snapshot(model: &Model, meta: CheckpointMeta) -> Checkpoint {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = model
        .params()
        .iter()
        .map(|(name, t)| (name.clone(), t.shape().to_vec(), t.to_vec()))
        .collect();
    for (name, stats) in model.bn_snapshot() {
        tensors.push((format!("{name}.running_mean"), vec![stats.mean.len()], stats.mean));
        tensors.push((format!("{name}.running_var"), vec![stats.var.len()], stats.var));
    }
    Checkpoint {
        config: model.config().clone(),
        meta,
        tensors,
    }
}

/// Rebuilds a model from checkpoint data, validating that exactly the
/// expected tensors are present with the expected shapes.
pub fn restore(ckpt: &Checkpoint) -> Result<Model, CheckpointError> {
    ckpt.config
        .validate()
        .map_err(|e| CheckpointError::Integrity(e.to_string()))?;
    let (layout, bns) = param_layout(&ckpt.config);
    let expected = layout.len() + 2 * bns.len();
    if ckpt.tensors.len() != expected {
        return Err(CheckpointError::Integrity(format!(
            "expected {expected} tensors for this config, found {}",
            ckpt.tensors.len()
        )));
    }

    let mut by_name: std::collections::HashMap<&str, (&Vec<usize>, &Vec<f32>)> = ckpt
        .tensors
        .iter()
        .map(|(n, s, d)| (n.as_str(), (s, d)))
        .collect();
    if by_name.len() != ckpt.tensors.len() {
        return Err(CheckpointError::Integrity("duplicate tensor names".into()));
    }

    let mut lookup = |name: &str, shape: &[usize]| -> Result<Vec<f32>, CheckpointError> {
        let (s, d) = by_name
            .remove(name)
            .ok_or_else(|| CheckpointError::Integrity(format!("missing tensor {name}")))?;
        if s.as_slice() != shape {
            return Err(CheckpointError::Integrity(format!(
                "tensor {name} has shape {s:?}, config expects {shape:?}"
            )));
        }
        Ok(d.clone())
    };

    // Validate everything before touching a model.
    let mut param_data = Vec::with_capacity(layout.len());
    for spec in &layout {
        param_data.push(lookup(&spec.name, &spec.shape)?);
    }
    let mut bn_data = Vec::with_capacity(bns.len());
    for (name, c) in &bns {
        let mean = lookup(&format!("{name}.running_mean"), &[*c])?;
        let var = lookup(&format!("{name}.running_var"), &[*c])?;
        bn_data.push((name.clone(), BnStats { mean, var }));
    }

    let model = Model::build(ckpt.config.clone(), 0)
        .map_err(|e| CheckpointError::Integrity(e.to_string()))?;
    for (spec, data) in layout.iter().zip(param_data) {
        let t: &TensorBase<f32> = &model.params()[&spec.name];
        t.apply_update(|d| d.copy_from_slice(&data));
    }
    for (name, stats) in bn_data {
        model
            .set_bn_stats(&name, stats)
            .map_err(|e| CheckpointError::Integrity(e.to_string()))?;
    }
    model.set_eval();
    Ok(model)
}

/// Writes a checkpoint atomically (temp file in the same directory, then
/// rename).
pub fn save(model: &Model, meta: CheckpointMeta, path: &Path) -> Result<(), CheckpointError> {
    let bytes = snapshot(model, meta).encode();
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    Checkpoint::decode(&bytes)
}

/// Convenience: load + restore.
pub fn load_model(path: &Path) -> Result<Model, CheckpointError> {
    restore(&load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::{no_grad, TensorBase};

    fn small_model() -> Model {
        let mut cfg = ModelConfig::reduced();
        cfg.stage_channels = [4, 8, 16, 32];
        cfg.stem_channels = 4;
        Model::build(cfg, 42).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let model = small_model();
        let meta = CheckpointMeta {
            iteration: 123,
            holdout_iou: 0.75,
            seed: 42,
        };
        let ckpt = snapshot(&model, meta);
        let decoded = Checkpoint::decode(&ckpt.encode()).unwrap();
        assert_eq!(decoded.meta, meta);
        assert_eq!(decoded.config, *model.config());
        for ((n1, s1, d1), (n2, s2, d2)) in ckpt.tensors.iter().zip(&decoded.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(s1, s2);
            assert_eq!(
                d1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                d2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "tensor {n1} not bit-exact"
            );
        }
    }

    #[test]
    fn restore_preserves_eval_outputs() {
        let model = small_model();
        model.set_eval();
        let x = TensorBase::<f32>::from_vec(
            (0..3 * 32 * 32).map(|i| (i % 97) as f32 / 97.0).collect(),
            &[1, 3, 32, 32],
        )
        .unwrap();
        let y_before = no_grad(|| model.forward(&x, None)).unwrap().to_vec();

        let ckpt = snapshot(&model, CheckpointMeta::default());
        let restored = restore(&Checkpoint::decode(&ckpt.encode()).unwrap()).unwrap();
        let y_after = no_grad(|| restored.forward(&x, None)).unwrap().to_vec();
        assert_eq!(
            y_before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y_after.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncation_is_rejected() {
        let model = small_model();
        let bytes = snapshot(&model, CheckpointMeta::default()).encode();
        for cut in [3, 10, 40, bytes.len() / 2, bytes.len() - 2] {
            let err = Checkpoint::decode(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, CheckpointError::Truncated { .. } | CheckpointError::CrcMismatch { .. }),
                "cut at {cut}: {err}"
            );
        }
    }

    #[test]
    fn version_mismatch_names_versions() {
        let model = small_model();
        let mut bytes = snapshot(&model, CheckpointMeta::default()).encode();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        match Checkpoint::decode(&bytes) {
            Err(CheckpointError::Version { expected: 1, found: 9 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = Checkpoint::decode(b"NOPE12345678").unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic));
    }

    #[test]
    fn corrupted_payload_fails_crc() {
        let model = small_model();
        let mut bytes = snapshot(&model, CheckpointMeta::default()).encode();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(CheckpointError::CrcMismatch { .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_an_integrity_error() {
        let model = small_model();
        let mut ckpt = snapshot(&model, CheckpointMeta::default());
        // Lie about the config: channel widths that do not match the tensors.
        ckpt.config.stem_channels = 6;
        ckpt.config.stage_channels = [6, 8, 16, 32];
        match restore(&ckpt) {
            Err(CheckpointError::Integrity(_)) => {}
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn save_and_load_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rseg");
        let model = small_model();
        let meta = CheckpointMeta {
            iteration: 5,
            holdout_iou: 0.5,
            seed: 1,
        };
        save(&model, meta, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        for (name, t) in model.params() {
            assert_eq!(t.to_vec(), loaded.params()[name].to_vec(), "param {name}");
        }
        assert_eq!(load(&path).unwrap().meta, meta);
    }
}
