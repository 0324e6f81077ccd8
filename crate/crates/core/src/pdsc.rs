//! `PDSC` binary matrix container.
//!
//! Layout of one block: the magic bytes `PDSC`, then little-endian `u32`
//! version (always 1), `u32` rows, `u32` cols, followed by `rows * cols`
//! little-endian `f32` values in row-major order. Checkpoints store several
//! blocks back to back.

use std::io::{self, Read, Write};

pub const MAGIC: &[u8; 4] = b"PDSC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

pub fn write_block<W: Write>(w: &mut W, rows: usize, cols: usize, values: &[f64]) -> io::Result<()> {
    if values.len() != rows * cols {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("block has {} values, expected {rows}x{cols}", values.len()),
        ));
    }
    let dim =
        |n: usize| u32::try_from(n).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "dimension exceeds u32"));
    let mut buf = Vec::with_capacity(16 + values.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&dim(rows)?.to_le_bytes());
    buf.extend_from_slice(&dim(cols)?.to_le_bytes());
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one block. Returns `Ok(None)` on a clean end of stream.
pub fn read_block<R: Read>(r: &mut R) -> io::Result<Option<Block>> {
    let mut magic = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut magic[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        filled += n;
    }
    if &magic != MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad magic, expected PDSC"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unsupported PDSC version {version}"),
        ));
    }
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut raw = vec![0u8; rows * cols * 4];
    r.read_exact(&mut raw)?;
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Some(Block { rows, cols, values }))
}

pub fn read_all_blocks<R: Read>(r: &mut R) -> io::Result<Vec<Block>> {
    let mut out = Vec::new();
    while let Some(block) = read_block(r)? {
        out.push(block);
    }
    Ok(out)
}
