//! Parameter checkpoints.
//!
//! ```text
//! "MDMC"  u8 version=1  u32 blocks
//! per block: u32 name_len  name  u32 rank=2  u32 rows  u32 cols  rows·cols × f32
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nnprims::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDMC";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn checkpoint_bytes(params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        if !t.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        if end > self.bytes.len() {
            return Err(Error::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::NotACheckpoint);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let blocks = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..blocks {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Invalid("checkpoint block name is not utf-8".into()))?
            .to_string();
        let rank = r.u32()?;
        if rank != 2 {
            return Err(Error::Invalid(format!("block {name} has rank {rank}")));
        }
        let (rows, cols) = (r.u32()?, r.u32()?);
        let count = rows.checked_mul(cols).ok_or(Error::Truncated)?;
        let raw = r.take(count.checked_mul(4).ok_or(Error::Truncated)?)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        store.insert(name, Tensor::from_vec(rows, cols, data)?);
    }
    Ok(store)
}

pub fn write_checkpoint(params: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(params)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    checkpoint_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Errors unless `loaded` has exactly the blocks and shapes of `expected`.
pub fn check_compatible(loaded: &ParamStore, expected: &ParamStore) -> Result<()> {
    for (name, t) in expected.iter() {
        match loaded.get(name) {
            Some(l) if l.shape() == t.shape() => {}
            Some(l) => {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{name} is {:?}, config needs {:?}", l.shape(), t.shape()),
                ))
            }
            None => return Err(Error::Invalid(format!("checkpoint lacks block {name}"))),
        }
    }
    if let Some(extra) = loaded.names().find(|n| !expected.contains(n)) {
        return Err(Error::Invalid(format!("checkpoint has unexpected block {extra}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::from_rows(&[&[0.5, -1.25], &[3.0, 0.0]]));
        s.insert("b", Tensor::row_vector(&[0.1]));
        s
    }

    #[test]
    fn round_trip_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&sample(), &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.get("a.w"), sample().get("a.w"));
        assert_eq!(back.get("b").unwrap().data()[0], 0.1f32 as f64);
        check_compatible(&back, &sample()).unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        let bytes = checkpoint_bytes(&sample()).unwrap();
        assert!(matches!(checkpoint_from_bytes(b"MILB\x01"), Err(Error::NotACheckpoint)));
        assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated)));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(checkpoint_from_bytes(&v), Err(Error::UnsupportedVersion(9))));
        let mut other = sample();
        other.insert("b", Tensor::row_vector(&[0.1, 0.2]));
        assert!(check_compatible(&sample(), &other).is_err());
    }
}
