//! Little-endian primitives shared by the NACT and NEMB readers/writers.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Truncated {
    pub what: &'static str,
    pub offset: usize,
}

impl fmt::Display for Truncated {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "truncated while reading {} at byte {}",
            self.what, self.offset
        )
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], Truncated> {
        if self.remaining() < n {
            return Err(Truncated {
                what,
                offset: self.pos,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, Truncated> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64, Truncated> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    /// u32 length prefix followed by that many bytes; UTF-8 is checked by the caller.
    pub fn prefixed(&mut self, what: &'static str) -> Result<&'a [u8], Truncated> {
        let len = self.u32(what)? as usize;
        self.take(len, what)
    }

    /// `count` little-endian f32 values. The byte length is checked before
    /// allocating so a corrupt count cannot trigger a huge allocation.
    pub fn f32s(&mut self, count: usize, what: &'static str) -> Result<Vec<f32>, Truncated> {
        let bytes = count
            .checked_mul(4)
            .filter(|&b| b <= self.remaining())
            .ok_or(Truncated {
                what,
                offset: self.pos,
            })?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}
