//! Binary bag files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MILB"  u8 version=1  u8 label  u32 n  u32 d  n·d × f32 (row-major)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nnprims::Tensor;

pub const BAG_MAGIC: &[u8; 4] = b"MILB";
pub const BAG_VERSION: u8 = 1;
pub const BAG_HEADER_LEN: usize = 4 + 1 + 1 + 4 + 4;

/// One bag of instance features sharing a single label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    pub id: String,
    pub label: usize,
    n: usize,
    d: usize,
    features: Vec<f32>,
}

impl FeatureBag {
    pub fn new(id: impl Into<String>, label: usize, n: usize, d: usize, features: Vec<f32>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Invalid(format!("bag must have n >= 1 and d >= 1, got {n}x{d}")));
        }
        if features.len() != n * d {
            return Err(Error::shape(
                "FeatureBag::new",
                format!("{n}x{d} needs {} values, got {}", n * d, features.len()),
            ));
        }
        if label > u8::MAX as usize {
            return Err(Error::Invalid(format!("label {label} does not fit the bag format")));
        }
        Ok(FeatureBag {
            id: id.into(),
            label,
            n,
            d,
            features,
        })
    }

    pub fn num_instances(&self) -> usize {
        self.n
    }

    pub fn feature_dim(&self) -> usize {
        self.d
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn instance(&self, i: usize) -> &[f32] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(self.n, self.d, |r, c| self.features[r * self.d + c] as f64)
    }

    /// Keeps the listed instances, in the given order.
    pub fn select_instances(&self, idx: &[usize]) -> Result<FeatureBag> {
        let mut features = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            if i >= self.n {
                return Err(Error::Invalid(format!("instance {i} out of {}", self.n)));
            }
            features.extend_from_slice(self.instance(i));
        }
        FeatureBag::new(self.id.clone(), self.label, idx.len(), self.d, features)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let mut out = Vec::with_capacity(BAG_HEADER_LEN + 4 * self.features.len());
        out.extend_from_slice(BAG_MAGIC);
        out.push(BAG_VERSION);
        out.push(self.label as u8);
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let (label, n, d) = parse_header(bytes)?;
        let body = &bytes[BAG_HEADER_LEN..];
        let needed = n.checked_mul(d).and_then(|v| v.checked_mul(4)).ok_or(Error::Truncated)?;
        if body.len() < needed {
            return Err(Error::Truncated);
        }
        let features: Vec<f32> = body[..needed]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        FeatureBag::new(id, label, n, d, features)
    }
}

/// Returns `(label, n, d)` from a bag header.
pub fn parse_header(bytes: &[u8]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 4 || &bytes[..4] != BAG_MAGIC {
        return Err(Error::NotABagFile);
    }
    if bytes.len() < 5 {
        return Err(Error::Truncated);
    }
    if bytes[4] != BAG_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    if bytes.len() < BAG_HEADER_LEN {
        return Err(Error::Truncated);
    }
    let label = bytes[5] as usize;
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    Ok((label, n, d))
}

pub fn write_bag(bag: &FeatureBag, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = bag.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a bag; its id is the file stem.
pub fn read_bag(path: impl AsRef<Path>) -> Result<FeatureBag> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureBag::from_bytes(id, &bytes)
}

/// Reads only the header of a bag file.
pub fn read_bag_header(path: impl AsRef<Path>) -> Result<(usize, usize, usize)> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; BAG_HEADER_LEN];
    let mut got = 0;
    while got < BAG_HEADER_LEN {
        let k = f.read(&mut buf[got..]).map_err(|e| Error::io(path, e))?;
        if k == 0 {
            break;
        }
        got += k;
    }
    parse_header(&buf[..got])
}
