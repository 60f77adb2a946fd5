//! Little-endian primitives shared by every binary file format in the crate.
//!
//! All formats start with a 4-byte magic followed by a `u32` version.
//! Strings are `u32` length-prefixed UTF-8, sequences are `u64` length-prefixed.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub struct Encoder<W: Write> {
    inner: W,
}

impl<W: Write> Encoder<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> io::Result<()> {
        self.inner.write_all(magic)?;
        self.u32(version)
    }

    pub fn u8(&mut self, v: u8) -> io::Result<()> {
        self.inner.write_all(&[v])
    }

    pub fn u32(&mut self, v: u32) -> io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    pub fn u128(&mut self, v: u128) -> io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> io::Result<()> {
        self.inner.write_all(&v.to_bits().to_le_bytes())
    }

    pub fn str(&mut self, s: &str) -> io::Result<()> {
        let len = u32::try_from(s.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "string too long"))?;
        self.u32(len)?;
        self.inner.write_all(s.as_bytes())
    }

    pub fn len(&mut self, n: usize) -> io::Result<()> {
        self.u64(n as u64)
    }

    pub fn f64_slice(&mut self, xs: &[f64]) -> io::Result<()> {
        self.len(xs.len())?;
        for &x in xs {
            self.f64(x)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct Decoder<R: Read> {
    inner: R,
    path: String,
}

impl<R: Read> Decoder<R> {
    pub fn new(inner: R, path: impl Into<String>) -> Self {
        Self {
            inner,
            path: path.into(),
        }
    }

    pub fn err(&self, reason: impl Into<String>) -> Error {
        Error::format(self.path.clone(), reason)
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                self.err("unexpected end of file")
            } else {
                Error::Io(e)
            }
        })
    }

    /// Checks magic and returns the stored version, rejecting anything newer than `max_version`.
    pub fn header(&mut self, magic: &[u8; 4], max_version: u32) -> Result<u32> {
        let mut m = [0u8; 4];
        self.fill(&mut m)?;
        if &m != magic {
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version == 0 || version > max_version {
            return Err(self.err(format!("unsupported version {version}")));
        }
        Ok(version)
    }

    pub fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn u128(&mut self) -> Result<u128> {
        let mut b = [0u8; 16];
        self.fill(&mut b)?;
        Ok(u128::from_le_bytes(b))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.fill(&mut buf)?;
        String::from_utf8(buf).map_err(|_| self.err("invalid utf-8 string"))
    }

    /// Reads a sequence length, refusing values above `limit` so corrupt files fail fast.
    pub fn len(&mut self, limit: usize) -> Result<usize> {
        let n = self.u64()?;
        if n > limit as u64 {
            return Err(self.err(format!("length {n} exceeds limit {limit}")));
        }
        Ok(n as usize)
    }

    pub fn f64_vec(&mut self, limit: usize) -> Result<Vec<f64>> {
        let n = self.len(limit)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(self.err("trailing bytes after payload")),
        }
    }
}

pub(crate) const MAX_LEN: usize = 1 << 40;
