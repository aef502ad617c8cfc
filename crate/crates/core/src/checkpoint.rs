//! The NAPC binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NAPC" | u32 version | u32 len, architecture text | u32 len, config text
//! u32 parameterized layer count
//!   per layer: u32 n, n x f64 weights | u32 n, ceil(n/8) mask bytes (LSB first)
//! u8 stats flag   [per layer: u8 flag [u64 steps, f64 decay, u32 side, f64s, u32 side, f64s]]
//! u8 velocity flag [per layer: u32 n, n x f64]
//! u64 train steps | u64 iteration | u64 step at which pruning began
//! u32 n, n x f64 lambda history | u32 n, n x u64 flops history | u32 n, n x u64 remaining history
//! u32 count [u32 len, name | u32 side, side^2 x f64]   named dense matrices
//! u32 CRC32 of every preceding byte
//! ```

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::kfac::{LayerStats, ModelStats};
use crate::nn::{Architecture, Model};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"NAPC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic {found:?} at byte offset 0, expected \"NAPC\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found} at byte offset 4, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: stored 0x{stored:08x}, computed 0x{computed:08x} at byte offset {offset}")]
    Checksum { stored: u32, computed: u32, offset: usize },
    #[error("truncated at byte offset {offset} ({needed} more bytes needed)")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed checkpoint at byte offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
}

/// Training and pruning bookkeeping carried between runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMeta {
    pub train_steps: u64,
    /// Completed pruning iterations; also keys the per-iteration RNG.
    pub iteration: u64,
    /// Value of `train_steps` when the first pruning iteration began.
    pub prune_start: u64,
    pub lambda_history: Vec<f64>,
    pub flops_history: Vec<u64>,
    pub remaining_history: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// The run configuration in `key=value` form.
    pub config: String,
    pub stats: Option<ModelStats>,
    pub velocity: Option<Vec<Vec<f64>>>,
    pub meta: RunMeta,
    /// Named square matrices, e.g. dumped curvature.
    pub matrices: Vec<(String, usize, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            config: String::new(),
            stats: None,
            velocity: None,
            meta: RunMeta::default(),
            matrices: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend(MAGIC);
        put_u32(&mut w, VERSION);
        put_str(&mut w, &self.model.arch().to_string());
        put_str(&mut w, &self.config);

        let params = self.model.param_layers();
        put_u32(&mut w, params.len() as u32);
        for &l in &params {
            let layer = self.model.layer(l);
            put_f64s(&mut w, layer.weights.data());
            let mask = layer.mask.data();
            put_u32(&mut w, mask.len() as u32);
            let mut packed = vec![0u8; mask.len().div_ceil(8)];
            for (k, &m) in mask.iter().enumerate() {
                if m != 0.0 {
                    packed[k / 8] |= 1 << (k % 8);
                }
            }
            w.extend(packed);
        }

        match &self.stats {
            None => w.push(0),
            Some(stats) => {
                w.push(1);
                for &l in &params {
                    match stats.layers.get(l).and_then(Option::as_ref) {
                        None => w.push(0),
                        Some(s) => {
                            w.push(1);
                            w.extend(s.steps_seen().to_le_bytes());
                            w.extend(s.decay().to_le_bytes());
                            put_f64s(&mut w, s.a());
                            put_f64s(&mut w, s.ds());
                        }
                    }
                }
            }
        }

        match &self.velocity {
            None => w.push(0),
            Some(v) => {
                w.push(1);
                put_u32(&mut w, v.len() as u32);
                for layer in v {
                    put_f64s(&mut w, layer);
                }
            }
        }

        w.extend(self.meta.train_steps.to_le_bytes());
        w.extend(self.meta.iteration.to_le_bytes());
        w.extend(self.meta.prune_start.to_le_bytes());
        put_f64s(&mut w, &self.meta.lambda_history);
        put_u64s(&mut w, &self.meta.flops_history);
        put_u64s(&mut w, &self.meta.remaining_history);

        put_u32(&mut w, self.matrices.len() as u32);
        for (name, side, data) in &self.matrices {
            put_str(&mut w, name);
            put_u32(&mut w, *side as u32);
            put_f64s(&mut w, data);
        }

        let crc = crc32fast::hash(&w);
        put_u32(&mut w, crc);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Self::parse(bytes)?)
    }

    fn parse(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic.to_vec() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::Truncated {
                offset: bytes.len(),
                needed: 12 - bytes.len(),
            });
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body]);
        if stored != computed {
            return Err(CheckpointError::Checksum {
                stored,
                computed,
                offset: body,
            });
        }
        r.bytes = &bytes[..body];

        let arch_at = r.pos;
        let arch_text = r.string()?;
        let arch = Architecture::parse(&arch_text).map_err(|e| r.malformed_at(arch_at, e.to_string()))?;
        let config = r.string()?;

        let param_idx: Vec<usize> = arch
            .layers
            .iter()
            .enumerate()
            .filter(|(_, k)| k.is_parameterized())
            .map(|(i, _)| i)
            .collect();
        let count_at = r.pos;
        if r.u32()? as usize != param_idx.len() {
            return Err(r.malformed_at(count_at, "parameterized layer count disagrees with architecture".into()));
        }
        let mut parts = Vec::with_capacity(param_idx.len());
        for &l in &param_idx {
            let (rows, cols) = arch.layers[l].weight_dims().expect("parameterized");
            let at = r.pos;
            let weights = r.f64s()?;
            if weights.len() != rows * cols {
                return Err(r.malformed_at(
                    at,
                    format!("layer {l}: {} weights, expected {}", weights.len(), rows * cols),
                ));
            }
            let at = r.pos;
            let bits = r.u32()? as usize;
            if bits != rows * cols {
                return Err(r.malformed_at(at, format!("layer {l}: {bits} mask bits, expected {}", rows * cols)));
            }
            let packed = r.take(bits.div_ceil(8))?;
            let mask = (0..bits).map(|k| ((packed[k / 8] >> (k % 8)) & 1) as f64).collect();
            let w = Tensor::matrix(rows, cols, weights).map_err(|e| r.malformed_at(at, e.to_string()))?;
            let m = Tensor::matrix(rows, cols, mask).map_err(|e| r.malformed_at(at, e.to_string()))?;
            parts.push((w, m));
        }
        let model = Model::from_parts(arch, parts).map_err(|e| r.malformed_at(count_at, e.to_string()))?;

        let stats = if r.flag()? {
            let mut layers = vec![None; model.layers().len()];
            for &l in &param_idx {
                if !r.flag()? {
                    continue;
                }
                let layer = model.layer(l);
                let steps = r.u64()?;
                let decay = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                let at = r.pos;
                let a = r.f64s()?;
                let ds = r.f64s()?;
                if a.len() != layer.cols() * layer.cols() || ds.len() != layer.rows() * layer.rows() {
                    return Err(r.malformed_at(at, format!("layer {l}: statistics sides disagree with weights")));
                }
                layers[l] = Some(
                    LayerStats::from_parts(a, layer.cols(), ds, layer.rows(), decay, steps)
                        .map_err(|e| r.malformed_at(at, e.to_string()))?,
                );
            }
            Some(ModelStats { layers })
        } else {
            None
        };

        let velocity = if r.flag()? {
            let n = r.u32()? as usize;
            let mut v = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                v.push(r.f64s()?);
            }
            Some(v)
        } else {
            None
        };

        let meta = RunMeta {
            train_steps: r.u64()?,
            iteration: r.u64()?,
            prune_start: r.u64()?,
            lambda_history: r.f64s()?,
            flops_history: r.u64s()?,
            remaining_history: r.u64s()?,
        };

        let n = r.u32()? as usize;
        let mut matrices = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.string()?;
            let at = r.pos;
            let side = r.u32()? as usize;
            let data = r.f64s()?;
            if data.len() != side * side {
                return Err(r.malformed_at(at, format!("matrix {name}: {} values for side {side}", data.len())));
            }
            matrices.push((name, side, data));
        }
        if r.pos != body {
            return Err(r.malformed_at(r.pos, format!("{} unread bytes before checksum", body - r.pos)));
        }
        Ok(Self {
            model,
            config,
            stats,
            velocity,
            meta,
            matrices,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend(v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend(s.as_bytes());
}

fn put_f64s(w: &mut Vec<u8>, v: &[f64]) {
    put_u32(w, v.len() as u32);
    for x in v {
        w.extend(x.to_le_bytes());
    }
}

fn put_u64s(w: &mut Vec<u8>, v: &[u64]) {
    put_u32(w, v.len() as u32);
    for x in v {
        w.extend(x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
                needed: n - available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool, CheckpointError> {
        let at = self.pos;
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(self.malformed_at(at, format!("presence flag {other}"))),
        }
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.malformed_at(at, "text is not UTF-8".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated {
            offset: self.bytes.len(),
            needed: usize::MAX,
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u64s(&mut self) -> Result<Vec<u64>, CheckpointError> {
        let n = self.u32()? as usize;
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn malformed_at(&self, offset: usize, reason: String) -> CheckpointError {
        CheckpointError::Malformed { offset, reason }
    }
}
