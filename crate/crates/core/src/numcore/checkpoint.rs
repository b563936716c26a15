//! Flat binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "PDPARAMS"
//! version  u32      1
//! count    u32      number of tensors
//! repeated count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (ndim × u64)
//!   values   (product of dims) × f64
//! ```
//!
//! A tab-separated manifest (`name`, `shape`, `values`) is written next to
//! the binary file with the `.manifest.tsv` suffix.

use std::fs;
use std::path::{Path, PathBuf};

use super::params::Parameters;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PDPARAMS";
pub const VERSION: u32 = 1;

pub fn encode(params: &Parameters) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Parameters> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut params = Parameters::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.checked_mul(8).map_or(true, |b| b > bytes.len()) {
            return Err(Error::Checkpoint(format!("implausible shape {shape:?}")));
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(params)
}

pub fn manifest(params: &Parameters) -> String {
    let mut s = String::from("name\tshape\tvalues\n");
    for (_, name, t) in params.iter() {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        s.push_str(&format!("{name}\t{}\t{}\n", shape.join("x"), t.len()));
    }
    s
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.tsv");
    PathBuf::from(s)
}

pub fn save(path: &Path, params: &Parameters) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest(params)).map_err(|e| Error::io(mpath, e))
}

pub fn load(path: &Path) -> Result<Parameters> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Overwrite `target` with values from `source`; names and shapes must agree.
pub fn restore_into(target: &mut Parameters, source: &Parameters) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, checkpoint has {}",
            target.len(),
            source.len()
        )));
    }
    for id in target.ids().collect::<Vec<_>>() {
        let name = target.name(id).to_string();
        let src = source
            .by_name(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{name}`")))?;
        if src.shape() != target.get(id).shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for `{name}`")));
        }
        target.get_mut(id).data_mut().copy_from_slice(src.data());
    }
    Ok(())
}
