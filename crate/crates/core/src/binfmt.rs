//! Little-endian helpers for the binary containers (checkpoints, point clouds,
//! trainer state). Every container starts with a 4-byte magic and a u32
//! version.

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated or malformed file: {0}")]
    Truncated(String),
}

pub fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], version: u32) -> io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())
}

pub fn read_header<R: Read>(r: &mut R, magic: &[u8; 4], version: u32) -> Result<(), FormatError> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found).map_err(truncated)?;
    if &found != magic {
        return Err(FormatError::BadMagic { expected: *magic, found });
    }
    let v = read_u32(r)?;
    if v != version {
        return Err(FormatError::VersionMismatch { expected: version, found: v });
    }
    Ok(())
}

fn truncated(e: io::Error) -> FormatError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        FormatError::Truncated(e.to_string())
    } else {
        FormatError::Io(e)
    }
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64, FormatError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_f32s<W: Write>(w: &mut W, xs: impl IntoIterator<Item = f32>) -> io::Result<()> {
    let mut buf = Vec::new();
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>, FormatError> {
    let buf = read_bytes(r, n, 4)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, FormatError> {
    let buf = read_bytes(r, n, 8)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect())
}

// Reads without trusting `n` for the allocation size, so a corrupt count
// cannot trigger a huge up-front allocation.
fn read_bytes<R: Read>(r: &mut R, n: usize, width: usize) -> Result<Vec<u8>, FormatError> {
    let want = n
        .checked_mul(width)
        .ok_or_else(|| FormatError::Truncated("length overflow".into()))?;
    let mut buf = Vec::new();
    r.by_ref().take(want as u64).read_to_end(&mut buf)?;
    if buf.len() != want {
        return Err(FormatError::Truncated(format!("expected {want} bytes, found {}", buf.len())));
    }
    Ok(buf)
}

/// Fails unless the reader is exhausted.
pub fn expect_eof<R: Read>(r: &mut R) -> Result<(), FormatError> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(FormatError::Truncated("trailing bytes after payload".into())),
    }
}
