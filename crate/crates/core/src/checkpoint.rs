//! Binary checkpoint container.
//!
//! Little-endian layout: magic `RCLB`, `u32` version, then length-prefixed
//! config and skeleton JSON, step counters, RNG state, frozen groups,
//! pose-residual frame ids, and tensor records (name, group, shape, values,
//! Adam clock and moments). A CRC32 of everything before it closes the file.

use std::path::Path;

use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RCLB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("tensor {name}: checkpoint shape {found:?}, model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {name} missing from checkpoint")]
    MissingTensor { name: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub adam_t: u64,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub skeleton_json: String,
    pub step: u64,
    pub model_step: u64,
    pub rng: RngState,
    pub frozen: Vec<String>,
    pub residual_frames: Vec<i64>,
    pub tensors: Vec<TensorRecord>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.0.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("invalid utf-8".into()))
    }
    fn f32s(&mut self) -> Result<Vec<f32>, CheckpointError> {
        let n = self.u64()? as usize;
        let bytes = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.config_json);
        w.str(&self.skeleton_json);
        w.u64(self.step);
        w.u64(self.model_step);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u32(self.frozen.len() as u32);
        for g in &self.frozen {
            w.str(g);
        }
        w.u32(self.residual_frames.len() as u32);
        for f in &self.residual_frames {
            w.u64(*f as u64);
        }
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.str(&t.name);
            w.str(&t.group);
            w.u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u64(d as u64);
            }
            w.f32s(&t.data);
            w.u64(t.adam_t);
            w.f32s(&t.adam_m);
            w.f32s(&t.adam_v);
        }
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    /// Parses and verifies a checkpoint. Nothing is returned unless the
    /// magic, checksum and version all match.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::Truncated);
        }
        let (body, footer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(footer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader(&body[4..]);
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config_json = r.str()?;
        let skeleton_json = r.str()?;
        let step = r.u64()?;
        let model_step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let frozen = (0..r.u32()?).map(|_| r.str()).collect::<Result<_, _>>()?;
        let residual_frames = (0..r.u32()?).map(|_| r.u64().map(|v| v as i64)).collect::<Result<_, _>>()?;
        let n = r.u32()?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = r.str()?;
            let group = r.str()?;
            let shape = (0..r.u32()?)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let data = r.f32s()?;
            if shape.iter().product::<usize>() != data.len() {
                return Err(CheckpointError::Malformed(format!("tensor {name}: shape and data disagree")));
            }
            let adam_t = r.u64()?;
            let adam_m = r.f32s()?;
            let adam_v = r.f32s()?;
            if adam_m.len() != data.len() || adam_v.len() != data.len() {
                return Err(CheckpointError::Malformed(format!("tensor {name}: optimizer state size")));
            }
            tensors.push(TensorRecord {
                name,
                group,
                shape,
                data,
                adam_t,
                adam_m,
                adam_v,
            });
        }
        if !r.0.is_empty() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            config_json,
            skeleton_json,
            step,
            model_step,
            rng: RngState { seed, stream, word_pos },
            frozen,
            residual_frames,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }
}
