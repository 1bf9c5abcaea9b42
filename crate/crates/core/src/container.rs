//! Binary container for named tensors plus a text config blob.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MMWFM" | version u32 | blob_len u64 | blob (utf-8 key = value lines)
//! n_tensors u32 | per tensor: name_len u32, name, dtype u8, ndim u8,
//!                 dims u64 * ndim, offset u64
//! payload_len u64 | payload
//! ```
//!
//! Offsets are relative to the payload start. Tensors are stored as f64.

use std::fs;
use std::path::Path;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::nn::Mat;

pub const MAGIC: &[u8; 5] = b"MMWFM";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub config: KvConfig,
    pub tensors: Vec<(String, Mat)>,
}

impl TensorFile {
    pub fn new(config: KvConfig) -> Self {
        Self { config, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let blob = self.config.to_string();
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(2);
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * m.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, m) in &self.tensors {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let blob_len = r.u64("config length")? as usize;
        let blob = std::str::from_utf8(r.take(blob_len, "config")?)
            .map_err(|_| Error::CorruptCheckpoint("config blob is not utf-8".into()))?;
        let config = KvConfig::parse(blob, None)?;
        let n = r.u32("tensor count")? as usize;
        let mut manifest = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not utf-8".into()))?
                .to_string();
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::CorruptCheckpoint(format!("tensor {name}: unknown dtype tag {dtype}")));
            }
            let ndim = r.take(1, "ndim")?[0];
            if ndim != 2 {
                return Err(Error::CorruptCheckpoint(format!("tensor {name}: expected 2 dims, found {ndim}")));
            }
            let rows = r.u64("dims")? as usize;
            let cols = r.u64("dims")? as usize;
            let offset = r.u64("offset")? as usize;
            manifest.push((name, rows, cols, offset));
        }
        let payload_len = r.u64("payload length")? as usize;
        let payload = r.take(payload_len, "payload")?;
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, rows, cols, offset) in manifest {
            let size = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor {name}: absurd shape")))?;
            let end = offset
                .checked_add(size)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor {name}: data beyond payload")))?;
            let data: Vec<f64> = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Mat::from_shape_vec((rows, cols), data).expect("length checked");
            tensors.push((name, m));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
                Error::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos))
            })?;
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

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> TensorFile {
        let mut kv = KvConfig::new();
        kv.set("model.enc_dim", 8);
        let mut f = TensorFile::new(kv);
        f.push("a", array![[1.0, -0.0], [f64::MIN_POSITIVE, 1e300]]);
        f.push("b.c", array![[std::f64::consts::PI]]);
        f.push("empty", Mat::zeros((0, 3)));
        f
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let f = sample();
        let bytes = f.to_bytes();
        let g = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(g.to_bytes(), bytes);
        for ((na, a), (nb, b)) in f.tensors.iter().zip(&g.tensors) {
            assert_eq!(na, nb);
            assert_eq!(a.dim(), b.dim());
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(g.config, f.config);
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            match TensorFile::from_bytes(&bytes[..cut]) {
                Err(Error::CorruptCheckpoint(_)) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[5..9].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(Error::Version { found: 7, expected: 1 })));
        bytes[0] = b'X';
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(Error::CorruptCheckpoint(_))));
    }
}
