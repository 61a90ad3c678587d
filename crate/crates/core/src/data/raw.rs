//! Raw shard files, all integers little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 8 | magic `FTSHARD1` |
//! | 8 | 8 | u64 record count |
//! | 16 | 4 | u32 ndim (per-record extents) |
//! | 20 | 4 | u32 dtype: 1 = u8, 2 = f64 |
//! | 24 | 4·ndim | u32 per-record extents |
//!
//! followed by the row-major payload. Label files use ndim = 0 and u8.

use std::io::{Read, Write};

use crate::data::{DataError, Dtype};

pub const MAGIC: &[u8; 8] = b"FTSHARD1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawHeader {
    pub count: usize,
    pub dtype: Dtype,
    pub record_dims: Vec<usize>,
}

impl RawHeader {
    pub fn byte_len(&self) -> usize {
        24 + 4 * self.record_dims.len()
    }
}

pub fn read_header(r: &mut impl Read) -> Result<RawHeader, DataError> {
    let mut fixed = [0u8; 24];
    r.read_exact(&mut fixed)?;
    if &fixed[..8] != MAGIC {
        return Err(DataError::Corrupt("bad raw shard magic".into()));
    }
    let count = u64::from_le_bytes(fixed[8..16].try_into().expect("8 bytes")) as usize;
    let ndim = u32::from_le_bytes(fixed[16..20].try_into().expect("4 bytes")) as usize;
    let dtype = match u32::from_le_bytes(fixed[20..24].try_into().expect("4 bytes")) {
        1 => Dtype::U8,
        2 => Dtype::F64,
        other => return Err(DataError::Corrupt(format!("unknown raw dtype {other}"))),
    };
    if ndim > 8 {
        return Err(DataError::Corrupt(format!("implausible ndim {ndim}")));
    }
    let mut record_dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        record_dims.push(u32::from_le_bytes(b) as usize);
    }
    Ok(RawHeader {
        count,
        dtype,
        record_dims,
    })
}

pub fn write_header(w: &mut impl Write, h: &RawHeader) -> Result<(), DataError> {
    w.write_all(MAGIC)?;
    w.write_all(&(h.count as u64).to_le_bytes())?;
    w.write_all(&(h.record_dims.len() as u32).to_le_bytes())?;
    let code: u32 = match h.dtype {
        Dtype::U8 => 1,
        Dtype::F64 => 2,
    };
    w.write_all(&code.to_le_bytes())?;
    for &d in &h.record_dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip_and_offsets() {
        let h = RawHeader {
            count: 60000,
            dtype: Dtype::U8,
            record_dims: vec![28, 28, 1],
        };
        let mut buf = Vec::new();
        write_header(&mut buf, &h).unwrap();
        assert_eq!(buf.len(), h.byte_len());
        assert_eq!(&buf[..8], b"FTSHARD1");
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 60000);
        assert_eq!(read_header(&mut buf.as_slice()).unwrap(), h);
        buf[20] = 9;
        assert!(read_header(&mut buf.as_slice()).is_err());
    }
}
