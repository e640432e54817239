//! Shared framing for the dataset and checkpoint files: 8-byte magic,
//! little-endian u32 version, u64 header length, UTF-8 JSON header, then a
//! little-endian payload.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn encode_header<H: Serialize>(magic: &[u8; 8], version: u32, header: &H) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut buf = Vec::with_capacity(20 + json.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&version.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf
}

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    path: PathBuf,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    /// Validates the framing and returns the parsed header plus a reader
    /// positioned at the payload.
    pub(crate) fn open<H: DeserializeOwned>(
        path: &Path,
        bytes: &'a [u8],
        magic: &[u8; 8],
        version: u32,
    ) -> Result<(H, Self)> {
        let mut r = Reader {
            path: path.to_path_buf(),
            bytes,
            at: 0,
        };
        let corrupt = |message: String| Error::CorruptHeader {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 8 || &bytes[..8] != magic {
            return Err(corrupt("bad magic".into()));
        }
        r.at = 8;
        let found = r.u32("version")?;
        if found != version {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found,
                expected: version,
            });
        }
        let len = r.u64("header length")?;
        let len = usize::try_from(len).map_err(|_| corrupt("header length overflow".into()))?;
        let json = r.take(len, "header")?;
        let header = serde_json::from_slice(json).map_err(|e| corrupt(format!("header JSON: {e}")))?;
        Ok((header, r))
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                path: self.path.clone(),
                message: format!("{what} needs {n} bytes at offset {}, file has {}", self.at, self.bytes.len()),
            });
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).unwrap_or(usize::MAX), what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::CorruptHeader {
                path: self.path.clone(),
                message: format!("{} trailing bytes", self.bytes.len() - self.at),
            });
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
