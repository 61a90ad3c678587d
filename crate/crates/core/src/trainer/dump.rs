use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::audit::{IoAudit, WriteKind};

pub const DUMP_MAGIC: &[u8; 8] = b"FTPARAM1";

/// `FTPARAM1`, u64 LE count, then the values as f64 LE.
pub fn write_param_dump(audit: &IoAudit, path: impl AsRef<Path>, params: &[f64]) -> io::Result<()> {
    let mut f = audit.create(path, WriteKind::Parameters)?;
    f.write_all(DUMP_MAGIC)?;
    f.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()
}

pub fn read_param_dump(path: impl AsRef<Path>) -> io::Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    if bytes.len() < 16 || &bytes[..8] != DUMP_MAGIC {
        return Err(bad("not a parameter dump"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != count.checked_mul(8).ok_or_else(|| bad("count overflows"))? {
        return Err(bad("parameter dump length does not match its count"));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}
