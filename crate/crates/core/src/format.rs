//! Little-endian primitives shared by the bank, model and spatial-map files.
//!
//! Every file starts with an 8-byte magic and a u32 version, and ends with a
//! u32-length-prefixed UTF-8 metadata block.

use std::io::{Read, Write};

use crate::error::{CapError, Result};

pub(crate) const DTYPE_F32: u8 = 0;

pub(crate) fn write_header<W: Write>(w: &mut W, magic: &[u8; 8], version: u32) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f32s<W: Write, I: IntoIterator<Item = f32>>(w: &mut W, values: I) -> Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn write_metadata<W: Write>(w: &mut W, text: &str) -> Result<()> {
    let len = u32::try_from(text.len())
        .map_err(|_| CapError::Malformed("metadata larger than 4 GiB".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

/// Cursor over a fully buffered file.
pub(crate) struct ByteReader {
    buf: Vec<u8>,
    pos: usize,
}

impl ByteReader {
    pub(crate) fn from_reader<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Ok(Self { buf, pos: 0 })
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, section: &'static str) -> Result<&[u8]> {
        if self.remaining() < n {
            return Err(CapError::Truncated {
                section,
                expected: n as u64,
                actual: self.remaining() as u64,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    /// Reads the magic and version; any short or mismatched magic is "bad magic".
    pub(crate) fn expect_header(&mut self, magic: &'static [u8; 8], supported: u32) -> Result<()> {
        let expected = std::str::from_utf8(magic).unwrap_or("?");
        if self.remaining() < magic.len() || &self.buf[..magic.len()] != magic {
            return Err(CapError::BadMagic { expected });
        }
        self.pos = magic.len();
        let found = self.read_u32("header")?;
        if found != supported {
            return Err(CapError::VersionMismatch { found, supported });
        }
        Ok(())
    }

    pub(crate) fn read_u8(&mut self, section: &'static str) -> Result<u8> {
        Ok(self.take(1, section)?[0])
    }

    pub(crate) fn read_u32(&mut self, section: &'static str) -> Result<u32> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn read_u64(&mut self, section: &'static str) -> Result<u64> {
        let b = self.take(8, section)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub(crate) fn read_usize(&mut self, section: &'static str) -> Result<usize> {
        let v = self.read_u64(section)?;
        usize::try_from(v).map_err(|_| CapError::Malformed(format!("{section} value {v} overflows")))
    }

    /// Reads `count` f32 values, reporting the byte shortfall on truncation.
    pub(crate) fn read_f32s(&mut self, count: usize, section: &'static str) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| CapError::Malformed(format!("{section} size overflows")))?;
        let raw = self.take(bytes, section)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn read_metadata(&mut self) -> Result<String> {
        let len = self.read_u32("metadata length")? as usize;
        let raw = self.take(len, "metadata")?;
        let text = std::str::from_utf8(raw)
            .map_err(|e| CapError::Malformed(format!("metadata is not UTF-8: {e}")))?
            .to_owned();
        if self.remaining() != 0 {
            return Err(CapError::Malformed(format!(
                "{} trailing bytes after metadata",
                self.remaining()
            )));
        }
        Ok(text)
    }
}

pub(crate) fn checked_product(dims: &[usize], section: &'static str) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| CapError::Malformed(format!("{section} dimensions overflow")))
    })
}
