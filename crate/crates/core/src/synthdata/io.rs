//! `SDF1` feature files and `SDL1` label files.
//!
//! Both start with a 4-byte magic and two little-endian `u32` dimensions.
//! Features follow as row-major little-endian `f32`; labels as one byte per
//! entry, each 0 or 1.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sequence::{FeatureSequence, LabelSequence};

pub const FEATURE_MAGIC: &[u8; 4] = b"SDF1";
pub const LABEL_MAGIC: &[u8; 4] = b"SDL1";
pub const HEADER_LEN: usize = 12;

fn header(bytes: &[u8], magic: &[u8; 4]) -> Result<(usize, usize)> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::format(0, format!("missing {} magic", String::from_utf8_lossy(magic))));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    Ok((rows, cols))
}

fn dims(rows: usize, cols: usize) -> Result<[u8; 8]> {
    let r = u32::try_from(rows).map_err(|_| Error::Contract(format!("{rows} rows exceed u32")))?;
    let c = u32::try_from(cols).map_err(|_| Error::Contract(format!("{cols} columns exceed u32")))?;
    let mut out = [0u8; 8];
    out[..4].copy_from_slice(&r.to_le_bytes());
    out[4..].copy_from_slice(&c.to_le_bytes());
    Ok(out)
}

fn expect_payload(bytes: &[u8], needed: usize) -> Result<()> {
    let have = bytes.len() - HEADER_LEN;
    if have < needed {
        return Err(Error::format(bytes.len() as u64, format!("payload truncated: {have} of {needed} bytes")));
    }
    if have > needed {
        return Err(Error::format((HEADER_LEN + needed) as u64, "trailing bytes after payload"));
    }
    Ok(())
}

pub fn encode_features(x: &FeatureSequence) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * x.tensor().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&dims(x.len(), x.width())?);
    for &v in x.tensor().data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence> {
    let (rows, cols) = header(bytes, FEATURE_MAGIC)?;
    let n = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(4, "dimensions overflow"))?;
    expect_payload(bytes, n)?;
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    FeatureSequence::new(rows, cols, data)
}

pub fn encode_labels(y: &LabelSequence) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + y.tensor().len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&dims(y.len(), y.classes())?);
    for &v in y.tensor().data() {
        out.push(match v {
            0.0 => 0,
            1.0 => 1,
            other => return Err(Error::Contract(format!("label value {other} is not 0 or 1"))),
        });
    }
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelSequence> {
    let (rows, cols) = header(bytes, LABEL_MAGIC)?;
    let n = rows.checked_mul(cols).ok_or_else(|| Error::format(4, "dimensions overflow"))?;
    expect_payload(bytes, n)?;
    let mut data = Vec::with_capacity(n);
    for (i, &b) in bytes[HEADER_LEN..].iter().enumerate() {
        match b {
            0 | 1 => data.push(f64::from(b)),
            other => return Err(Error::format((HEADER_LEN + i) as u64, format!("label byte {other} is not 0 or 1"))),
        }
    }
    LabelSequence::new(rows, cols, data)
}

pub fn write_features(path: &Path, x: &FeatureSequence) -> Result<()> {
    fs::write(path, encode_features(x)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    decode_features(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_labels(path: &Path, y: &LabelSequence) -> Result<()> {
    fs::write(path, encode_labels(y)?).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<LabelSequence> {
    decode_labels(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
