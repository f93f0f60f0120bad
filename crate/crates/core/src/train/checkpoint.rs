//! Binary checkpoint layout, all integers little-endian `u32`:
//!
//! ```text
//! "VSEG" version count
//! count × { name_len name rank extent* payload(f32 × product(extents)) }
//! echo_len echo
//! ```
//!
//! The echo is UTF-8 `key = value` text: the run config followed by
//! `metric.<name>` lines.

use std::path::Path;

use thiserror::Error;

use crate::arch::{self, Model};
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::{Result, TrainError};

pub const MAGIC: &[u8; 4] = b"VSEG";
pub const FORMAT_VERSION: u32 = 1;
const METRIC_PREFIX: &str = "metric.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {what} at byte {offset}")]
    Truncated { what: &'static str, offset: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: Vec<(String, Tensor)>,
    /// Run config echo, without metric lines.
    pub config: String,
    /// Final metrics as `(name, value)` in insertion order.
    pub metrics: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, Tensor)>, config: String, metrics: Vec<(String, String)>) -> Self {
        Self { version: FORMAT_VERSION, tensors, config, metrics }
    }

    pub fn from_model(model: &Model, cfg: &RunConfig, metrics: Vec<(String, String)>) -> Self {
        let tensors = model.parameters().into_iter().map(|(n, t)| (n, t.detached())).collect();
        Self::new(tensors, cfg.echo(), metrics)
    }

    pub fn echo(&self) -> String {
        let mut s = self.config.clone();
        if !s.is_empty() && !s.ends_with('\n') {
            s.push('\n');
        }
        for (k, v) in &self.metrics {
            s.push_str(&format!("{METRIC_PREFIX}{k} = {v}\n"));
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        u32le(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            u32le(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            u32le(&mut out, t.rank());
            for &e in t.shape() {
                u32le(&mut out, e);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let echo = self.echo();
        u32le(&mut out, echo.len());
        out.extend_from_slice(echo.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            let mut m = [0u8; 4];
            m.copy_from_slice(magic);
            return Err(CheckpointError::BadMagic(m));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|&n| n.checked_mul(4).is_some())
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
            let payload = r.take(numel * 4, "tensor payload")?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        let len = r.u32("config echo length")? as usize;
        let echo = std::str::from_utf8(r.take(len, "config echo")?)
            .map_err(|_| CheckpointError::Malformed("config echo is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut config = String::new();
        let mut metrics = Vec::new();
        for line in echo.lines() {
            match line.strip_prefix(METRIC_PREFIX).and_then(|l| l.split_once('=')) {
                Some((k, v)) => metrics.push((k.trim().to_string(), v.trim().to_string())),
                None => {
                    config.push_str(line);
                    config.push('\n');
                }
            }
        }
        Ok(Self { version, tensors, config, metrics })
    }

    pub fn metric(&self, name: &str) -> Option<&str> {
        self.metrics.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    /// The echoed run config.
    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config, ".")
    }

    /// Rebuilds the network and installs the stored parameters. Every model
    /// parameter must appear exactly once with a matching shape.
    pub fn to_model(&self) -> Result<(Model, RunConfig)> {
        let cfg = self.run_config()?;
        let mut model = arch::build(cfg.arch, &cfg.model_spec(), 0)?;
        let expected = model.parameters().len();
        if self.tensors.len() != expected {
            return Err(TrainError::Checkpoint(CheckpointError::Malformed(format!(
                "{} tensors stored, model has {expected} parameters",
                self.tensors.len()
            ))));
        }
        for (name, p) in model.parameters_mut() {
            let mut hits = self.tensors.iter().filter(|(n, _)| *n == name);
            let (Some((_, t)), None) = (hits.next(), hits.next()) else {
                return Err(TrainError::Checkpoint(CheckpointError::Malformed(format!(
                    "parameter {name} must appear exactly once"
                ))));
            };
            if t.shape() != p.shape() {
                return Err(TrainError::Checkpoint(CheckpointError::Malformed(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.shape()
                ))));
            }
            p.data_mut().copy_from_slice(t.data());
        }
        Ok((model, cfg))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated { what, offset: self.pos })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
