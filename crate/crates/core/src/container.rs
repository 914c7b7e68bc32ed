//! Shared layout of the binary file formats: 4 magic bytes, a `u32` LE
//! format version, a `u32` LE header length, a UTF-8 JSON header, then the
//! little-endian payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) fn write<W: Write>(
    mut w: W,
    magic: &[u8; 4],
    version: u32,
    header: &serde_json::Value,
    payload: &[u8],
) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    let len = u32::try_from(header.len())
        .map_err(|_| Error::Malformed("header exceeds 4 GiB".into()))?;
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Returns the parsed header and the raw payload.
pub(crate) fn read<R: Read>(
    mut r: R,
    magic: &[u8; 4],
    version: u32,
) -> Result<(serde_json::Value, Vec<u8>)> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::FormatMismatch("file too short".into()),
        _ => Error::Io(e),
    })?;
    if &head[..4] != magic {
        return Err(Error::FormatMismatch(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&head[..4])
        )));
    }
    let found = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if found != version {
        return Err(Error::FormatMismatch(format!(
            "unsupported format version {found}, expected {version}"
        )));
    }
    let len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)
        .map_err(|_| Error::Malformed("truncated header".into()))?;
    let header = serde_json::from_slice(&header)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    Ok((header, payload))
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn put_u32s(out: &mut Vec<u8>, values: &[u32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Sequential reader over a payload.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn at(buf: &'a [u8], pos: usize) -> Self {
        Self { buf, pos }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Malformed("payload truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}
