//! IDX files: big-endian `[0, 0, dtype, ndim]` magic, `ndim` big-endian u32
//! extents, then the row-major payload.

use std::io::{Read, Write};

use crate::data::{DataError, Dtype};

pub const UBYTE: u8 = 0x08;
pub const DOUBLE: u8 = 0x0E;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub dtype: Dtype,
    pub dims: Vec<usize>,
}

impl IdxHeader {
    pub fn byte_len(&self) -> usize {
        4 + 4 * self.dims.len()
    }

    /// Magic number as conventionally written, e.g. `0x00000803`.
    pub fn magic(&self) -> u32 {
        let code = match self.dtype {
            Dtype::U8 => UBYTE,
            Dtype::F64 => DOUBLE,
        };
        (u32::from(code) << 8) | self.dims.len() as u32
    }
}

pub fn read_header(r: &mut impl Read) -> Result<IdxHeader, DataError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(DataError::Corrupt(format!("bad IDX magic {magic:02x?}")));
    }
    let dtype = match magic[2] {
        UBYTE => Dtype::U8,
        DOUBLE => Dtype::F64,
        other => return Err(DataError::Corrupt(format!("unsupported IDX dtype 0x{other:02x}"))),
    };
    let ndim = magic[3] as usize;
    if ndim == 0 {
        return Err(DataError::Corrupt("IDX file with zero dimensions".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        dims.push(u32::from_be_bytes(b) as usize);
    }
    Ok(IdxHeader { dtype, dims })
}

pub fn write_header(w: &mut impl Write, h: &IdxHeader) -> Result<(), DataError> {
    w.write_all(&h.magic().to_be_bytes())?;
    for &d in &h.dims {
        let d = u32::try_from(d).map_err(|_| DataError::Corrupt(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_be_bytes())?;
    }
    Ok(())
}

/// Writes a u8 tensor whose leading extent is the sample count.
pub fn write_u8(w: &mut impl Write, dims: &[usize], data: &[u8]) -> Result<(), DataError> {
    write_header(
        w,
        &IdxHeader {
            dtype: Dtype::U8,
            dims: dims.to_vec(),
        },
    )?;
    w.write_all(data)?;
    Ok(())
}
