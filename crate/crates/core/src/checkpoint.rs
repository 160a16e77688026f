//! Binary checkpoints.
//!
//! ```text
//! MEEDCKPT v1\n
//! <config as one line of JSON>\n
//! u32 tensor count
//! per tensor, in registration order:
//!   u32 name length, name bytes (UTF-8)
//!   u8 dtype (1 = f32, 2 = f64)
//!   u32 rank, rank × u64 dims
//!   values, little-endian
//! ```
//!
//! All integers are little-endian. Writing the same model twice yields the
//! same bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::models::{Model, ModelConfig};
use crate::tensor::{DType, Real};

pub const MAGIC: &str = "MEEDCKPT v1";

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 1,
        DType::F64 => 2,
    }
}

fn dtype_from_code(c: u8) -> Option<DType> {
    match c {
        1 => Some(DType::F32),
        2 => Some(DType::F64),
        _ => None,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()).into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn line(&mut self, what: &str) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| CheckpointError::Config(format!("{what} is not UTF-8")).into())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let found = match r.line("header") {
        Ok(l) => l.to_string(),
        Err(_) => String::from_utf8_lossy(&r.bytes[..r.bytes.len().min(16)]).into_owned(),
    };
    if found != MAGIC {
        return Err(CheckpointError::Version {
            found,
            expected: MAGIC,
        }
        .into());
    }
    let line = r.line("config")?;
    let cfg: ModelConfig =
        serde_json::from_str(line).map_err(|e| CheckpointError::Config(e.to_string()))?;
    cfg.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Reads only the config stored in a checkpoint.
pub fn peek_config(bytes: &[u8]) -> Result<ModelConfig> {
    read_header(&mut Reader { bytes, pos: 0 })
}

impl<T: Real> Model<T> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend(serde_json::to_vec(&self.config).expect("config serializes"));
        out.push(b'\n');
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype_code(T::DTYPE));
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Restores a model using the config stored in the checkpoint.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let cfg = peek_config(bytes)?;
        Self::from_checkpoint_bytes_with(bytes, cfg)
    }

    /// Restores parameters into a model built from `config`, checking every
    /// stored tensor against it.
    pub fn from_checkpoint_bytes_with(bytes: &[u8], config: ModelConfig) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        read_header(&mut r)?;
        let mut model = Model::<T>::with_init_scale(config, 0, 0.0)?;
        let count = r.u32("tensor count")? as usize;
        let ids: Vec<_> = model.params.ids().collect();
        for (i, &id) in ids.iter().enumerate() {
            let expected_name = model.params.name(id).to_string();
            if i >= count {
                return Err(CheckpointError::Name {
                    expected: expected_name,
                    found: "<end of tensors>".into(),
                }
                .into());
            }
            let len = r.u32(&expected_name)? as usize;
            let name = String::from_utf8_lossy(r.take(len, &expected_name)?).into_owned();
            if name != expected_name {
                return Err(CheckpointError::Name {
                    expected: expected_name,
                    found: name,
                }
                .into());
            }
            let code = r.u8(&name)?;
            let dtype = dtype_from_code(code);
            if dtype != Some(T::DTYPE) {
                return Err(CheckpointError::DType {
                    name,
                    expected: T::DTYPE.name(),
                    found: dtype.map_or_else(|| format!("code {code}"), |d| d.name().to_string()),
                }
                .into());
            }
            let rank = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64(&name)? as usize);
            }
            let expected = model.params.get(id).shape().to_vec();
            if shape != expected {
                return Err(CheckpointError::Shape {
                    name,
                    expected,
                    found: shape,
                }
                .into());
            }
            let n: usize = shape.iter().product();
            let w = T::DTYPE.width();
            let raw = r.take(n * w, &name)?;
            let values = raw.chunks_exact(w).map(T::read_le).collect();
            model.params.set_values(id, values)?;
        }
        if count > ids.len() {
            return Err(CheckpointError::Config(format!(
                "checkpoint holds {count} tensors, model has {}",
                ids.len()
            ))
            .into());
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Config("trailing bytes after last tensor".into()).into());
        }
        Ok(model)
    }

    /// Writes atomically: a sibling temp file is written, synced and renamed.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_checkpoint_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} has no file name", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
