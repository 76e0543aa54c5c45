//! On-disk artifact helpers: atomic writes and little-endian binary sidecars.
//!
//! Every sidecar starts with an 8-byte magic, one endianness byte (`b'L'`),
//! one format-version byte and two reserved bytes, followed by `u64` shape
//! fields and `f64` payload, all little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Write `bytes` to a sibling temp file, then rename it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    pub fn new(magic: &[u8; 8], version: u8) -> Self {
        let mut buf = Vec::with_capacity(1 << 16);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&[b'L', version, 0, 0]);
        Self { buf }
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) -> &mut Self {
        for v in vs {
            self.f64(*v);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct BinReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    pub fn new(data: &'a [u8], magic: &[u8; 8], version: u8) -> Result<Self> {
        if data.len() < 12 || &data[..8] != magic {
            return Err(Error::Format(format!(
                "missing {} magic",
                String::from_utf8_lossy(magic)
            )));
        }
        if data[8] != b'L' {
            return Err(Error::Format(format!("unsupported endianness marker {:#x}", data[8])));
        }
        if data[9] != version {
            return Err(Error::Format(format!("unsupported format version {}", data[9])));
        }
        Ok(Self { data, pos: 12 })
    }

    fn take8(&mut self) -> Result<[u8; 8]> {
        let end = self.pos + 8;
        let bytes = self
            .data
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("file truncated".into()))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice of length 8"))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take8()?))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size field overflows usize".into()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take8()?))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.data.len().saturating_sub(self.pos) < n.saturating_mul(8) {
            return Err(Error::Format("file truncated".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_checks() {
        let mut w = BinWriter::new(b"TESTMAGC", 1);
        w.u64(3).f64(1.5);
        let bytes = w.finish();
        let mut r = BinReader::new(&bytes, b"TESTMAGC", 1).unwrap();
        assert_eq!(r.u64().unwrap(), 3);
        assert_eq!(r.f64().unwrap(), 1.5);
        r.expect_end().unwrap();
        assert!(BinReader::new(&bytes, b"OTHERMAG", 1).is_err());
        assert!(BinReader::new(&bytes, b"TESTMAGC", 2).is_err());
        let mut big = bytes.clone();
        big[8] = b'B';
        assert!(BinReader::new(&big, b"TESTMAGC", 1).is_err());
        let mut r = BinReader::new(&bytes[..16], b"TESTMAGC", 1).unwrap();
        assert!(r.u64().is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
