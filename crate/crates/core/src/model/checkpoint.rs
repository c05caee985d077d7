//! Binary checkpoint container.
//!
//! Layout (little endian): magic `HPMX`, `u32` version, `u32` header length,
//! header (canonical JSON model config), `u32` parameter count, then per
//! parameter in declaration order: `u32` name length, UTF-8 name, `u32` rank,
//! `u32` dims, `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{HpMixer, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HPMX";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    Ok(buf)
}

pub fn write_checkpoint<T: Real, W: Write>(w: &mut W, model: &HpMixer, store: &ParamStore<T>) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION as usize)?;
    let header = model.config.to_canonical_json();
    put_u32(w, header.len())?;
    w.write_all(header.as_bytes())?;
    put_u32(w, store.len())?;
    for (_, p) in store.iter() {
        put_u32(w, p.name.len())?;
        w.write_all(p.name.as_bytes())?;
        put_u32(w, p.value.ndim())?;
        for &d in p.value.shape() {
            put_u32(w, d)?;
        }
        for v in p.value.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &HpMixer, store: &ParamStore<T>) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, model, store)?;
    w.flush()?;
    Ok(())
}

/// Rebuilds the model from the stored config and fills in every parameter,
/// checking names and shapes against the declaration order.
pub fn read_checkpoint<T: Real, R: Read>(r: &mut R) -> Result<(HpMixer, ParamStore<T>)> {
    if get_bytes(r, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = get_u32(r)?;
    let config: ModelConfig = serde_json::from_slice(&get_bytes(r, len)?)?;
    let (model, mut store) = HpMixer::init::<T>(config, 0)?;
    let count = get_u32(r)?;
    if count != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} parameters, model declares {}",
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name_len = get_u32(r)?;
        let name = String::from_utf8(get_bytes(r, name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = get_u32(r)?;
        let dims = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let p = store.get_mut(id);
        if name != p.name || dims != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: found {name} {dims:?}, expected {} {:?}",
                p.name,
                p.value.shape()
            )));
        }
        let raw = get_bytes(r, 4 * p.value.numel())?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        p.value = Tensor::new(&dims, data)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok((model, store))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(HpMixer, ParamStore<T>)> {
    let file = File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("cannot open checkpoint {}: {e}", path.display())))?;
    read_checkpoint(&mut BufReader::new(file))
}
