use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HINGERL\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter arrays plus a free-form descriptor naming the model kind
/// and architecture.
///
/// Layout: magic, `u32` version, `u32`-prefixed descriptor, `u32` array
/// count, then for each array a `u32`-prefixed name, a `u64` length and the
/// values as little-endian `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: String,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(descriptor: impl Into<String>) -> Self {
        Self { descriptor: descriptor.into(), arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, values: &[f64]) {
        self.arrays.push((name.into(), values.to_vec()));
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("array {name:?} not present")))
    }

    pub fn expect_descriptor(&self, descriptor: &str) -> Result<()> {
        if self.descriptor != descriptor {
            return Err(Error::Checkpoint(format!(
                "expected descriptor {descriptor:?}, found {:?}",
                self.descriptor
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_str(&mut out, &self.descriptor);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, values) in &self.arrays {
            write_str(&mut out, name);
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let descriptor = read_str(&mut r)?;
        let count = read_u32(&mut r)?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let len = read_u64(&mut r)? as usize;
            if len.checked_mul(8).is_none_or(|n| n > r.len()) {
                return Err(Error::Checkpoint(format!("array {name:?} truncated")));
            }
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                values.push(f64::from_le_bytes(b));
            }
            arrays.push((name, values));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { descriptor, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path.as_ref())?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.display().to_string()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut &[u8]) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > r.len() {
        return Err(Error::Checkpoint("string truncated".into()));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not utf-8".into()))
}
