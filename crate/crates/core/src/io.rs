//! Named-tensor container used for checkpoints and prepared features.
//!
//! Layout (little endian): magic `RDMT`, `u32` version, `u32` count, then per
//! tensor `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f64` values.
//! Values are stored bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RDMT";
const VERSION: u32 = 1;

pub type TensorMap = BTreeMap<String, Tensor>;

pub fn write_tensors<W: Write>(mut w: W, tensors: &TensorMap) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Data(format!("tensor file: {}", msg.into()))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<TensorMap> {
    let io = |e: std::io::Error| bad(e.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r).map_err(io)?;
    let mut out = TensorMap::new();
    for _ in 0..count {
        let len = read_u32(&mut r).map_err(io)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let ndim = read_u32(&mut r).map_err(io)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("shape overflows"))?;
        let mut raw = vec![0u8; numel.checked_mul(8).ok_or_else(|| bad("shape overflows"))?];
        r.read_exact(&mut raw).map_err(io)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(bad(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &TensorMap) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensors(BufWriter::new(f), tensors).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<TensorMap> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors(BufReader::new(f))
}

pub fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
