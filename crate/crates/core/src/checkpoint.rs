//! Parameter container: `"PDTR"`, version, count, then per parameter its name,
//! rank, extents and little-endian `f32` values. Integers are little-endian `u32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: [u8; 4] = *b"PDTR";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated(what.into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Named tensors stored in a checkpoint, in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    read_entries(bytes, |_, _| Ok(()))
}

/// Parses entries, calling `check` with each name and shape before its values are read.
fn read_entries(
    bytes: &[u8],
    mut check: impl FnMut(&str, &[usize]) -> Result<()>,
) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::CheckpointMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let count = r.u32("parameter count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8_lossy(r.take(len, "name")?).into_owned();
        let rank = r.u32(&format!("rank of {name}"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("extent of {name}"))? as usize);
        }
        check(&name, &shape)?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::CheckpointTruncated(name.clone()))?,
            &format!("values of {name}"),
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Overwrites every parameter of `store` from checkpoint bytes.
pub fn restore<T: Real>(store: &mut ParamStore<T>, bytes: &[u8]) -> Result<()> {
    let entries = read_entries(bytes, |name, shape| {
        let id = store
            .find(name)
            .ok_or_else(|| Error::CheckpointUnknownParam(name.into()))?;
        let expected = store.get(id).value.shape();
        if expected != shape {
            return Err(Error::CheckpointShape {
                name: name.into(),
                expected: expected.to_vec(),
                found: shape.to_vec(),
            });
        }
        Ok(())
    })?;
    let mut seen = vec![false; store.len()];
    for (name, t) in entries {
        let id = store.find(&name).expect("checked while reading");
        store.get_mut(id).value = t.cast();
        seen[id] = true;
    }
    if let Some(id) = seen.iter().position(|s| !s) {
        return Err(Error::CheckpointMissingParam(store.get(id).name.clone()));
    }
    Ok(())
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    restore(store, &fs::read(path)?)
}
