//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    b"PCKP"
//! version  u32
//! hash     32 bytes (config digest)
//! count    u32
//! count x { name_len u32, name utf-8, ndim u32, dims u32 x ndim, data f32 x prod(dims) }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        write_checkpoint(&mut w, &self.config_hash, &self.params)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        read_checkpoint(BufReader::new(f))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.config_hash, &self.params).expect("write to Vec");
        buf
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn to_u32(n: usize, what: &'static str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format("checkpoint", format!("{what} {n} too large")))
}

pub fn write_checkpoint<W: Write>(w: &mut W, config_hash: &[u8; 32], params: &ParamStore<f32>) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    w.write_all(config_hash)?;
    put_u32(w, to_u32(params.len(), "parameter count")?)?;
    for p in params.iter() {
        put_u32(w, to_u32(p.name.len(), "name length")?)?;
        w.write_all(p.name.as_bytes())?;
        put_u32(w, to_u32(p.value.shape().len(), "rank")?)?;
        for &d in p.value.shape() {
            put_u32(w, to_u32(d, "dimension")?)?;
        }
        let mut bytes = Vec::with_capacity(p.value.len() * 4);
        for x in p.value.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("checkpoint", format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("checkpoint", "missing header"))?;
    if &magic != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = get_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let mut config_hash = [0u8; 32];
    r.read_exact(&mut config_hash)
        .map_err(|_| Error::format("checkpoint", "truncated hash"))?;
    let count = get_u32(&mut r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::format("checkpoint", "truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| Error::format("checkpoint", "name is not utf-8"))?;
        let rank = get_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| get_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::format("checkpoint", format!("truncated data for {name}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.add(name, Tensor::new(shape, data)?)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(Checkpoint { config_hash, params })
}
