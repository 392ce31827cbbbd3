//! Little-endian primitives shared by the checkpoint formats.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        self.inner.write_all(magic)?;
        self.u32(version)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.inner.write_u32::<LittleEndian>(v)?)
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.inner.write_u64::<LittleEndian>(v)?)
    }

    pub fn usize(&mut self, v: usize) -> Result<()> {
        self.u64(v as u64)
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.inner.write_f64::<LittleEndian>(v)?)
    }

    pub fn floats(&mut self, xs: &[f64]) -> Result<()> {
        self.usize(xs.len())?;
        for &x in xs {
            self.f64(x)?;
        }
        Ok(())
    }

    pub fn string(&mut self, s: &str) -> Result<()> {
        self.usize(s.len())?;
        Ok(self.inner.write_all(s.as_bytes())?)
    }

    pub fn strings(&mut self, xs: &[String]) -> Result<()> {
        self.usize(xs.len())?;
        for s in xs {
            self.string(s)?;
        }
        Ok(())
    }

    pub fn tag(&mut self, tag: &[u8; 4]) -> Result<()> {
        Ok(self.inner.write_all(tag)?)
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub(crate) struct Reader<R: Read> {
    inner: R,
}

// Guards length prefixes against corrupt files before allocating.
const MAX_LEN: u64 = 1 << 34;

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn header(&mut self, magic: &[u8; 4], supported: u32) -> Result<u32> {
        let mut got = [0u8; 4];
        self.inner.read_exact(&mut got)?;
        if &got != magic {
            return Err(Error::BadCheckpoint(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&got)
            )));
        }
        let version = self.u32()?;
        if version != supported {
            return Err(Error::BadCheckpoint(format!(
                "unsupported version {version} (expected {supported})"
            )));
        }
        Ok(version)
    }

    pub fn expect_tag(&mut self, tag: &[u8; 4]) -> Result<()> {
        let mut got = [0u8; 4];
        self.inner.read_exact(&mut got)?;
        if &got != tag {
            return Err(Error::BadCheckpoint(format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(&got)
            )));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(self.inner.read_u32::<LittleEndian>()?)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(self.inner.read_u64::<LittleEndian>()?)
    }

    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(Error::BadCheckpoint(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(self.inner.read_f64::<LittleEndian>()?)
    }

    pub fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        (0..n).map(|_| self.f64()).collect()
    }

    /// Reads a float array and checks it has the expected length.
    pub fn floats_exact(&mut self, expected: usize, what: &str) -> Result<Vec<f64>> {
        let xs = self.floats()?;
        if xs.len() != expected {
            return Err(Error::BadCheckpoint(format!(
                "{what}: expected {expected} values, found {}",
                xs.len()
            )));
        }
        Ok(xs)
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.usize()?;
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::BadCheckpoint(e.to_string()))
    }

    pub fn strings(&mut self) -> Result<Vec<String>> {
        let n = self.usize()?;
        (0..n).map(|_| self.string()).collect()
    }

    pub fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::BadCheckpoint("trailing bytes".into())),
        }
    }
}
