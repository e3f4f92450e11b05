//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "ADISCKPT"
//! version u32      1
//! config  u32 length + UTF-8 TOML of the full experiment config
//! count   u32      number of tensors
//! tensor  u32 name length + UTF-8 name
//!         u32 ndim, ndim × u64 dims
//!         numel × f64 values, row-major
//! ```
//!
//! Trailing bytes are rejected.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ADISCKPT";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 1024;
const MAX_DIMS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(config: &ExperimentConfig, model: &Model) -> Self {
        Checkpoint {
            config: config.clone(),
            tensors: model
                .params
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone().with_requires_grad(false)))
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_parameters(self.config.model, self.tensors)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_toml();
        put_len(&mut out, cfg.len());
        out.extend_from_slice(cfg.as_bytes());
        put_len(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_len(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.shape().len());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::parse("not a checkpoint file (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::parse(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32("config length")? as usize;
        let cfg = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| Error::parse("checkpoint config is not UTF-8"))?;
        let config = ExperimentConfig::from_toml(cfg)
            .map_err(|e| Error::parse(format!("checkpoint config: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            if len == 0 || len > MAX_NAME {
                return Err(Error::parse(format!("tensor {i}: name length {len} out of range")));
            }
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::parse(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            let ndim = r.u32("ndim")? as usize;
            if ndim == 0 || ndim > MAX_DIMS {
                return Err(Error::parse(format!("tensor {name:?}: {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64("dim")?)
                    .map_err(|_| Error::parse(format!("tensor {name:?}: dimension overflows")))?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::parse(format!("tensor {name:?}: size overflows")))?;
                shape.push(d);
            }
            let byte_len = numel
                .checked_mul(8)
                .ok_or_else(|| Error::parse(format!("tensor {name:?}: size overflows")))?;
            let raw = r.take(byte_len, "tensor data")?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::parse(format!("tensor {name:?}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::parse(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Parse(msg) => Error::parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) {
    let n = u32::try_from(n).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&n.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::parse(format!("checkpoint truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
