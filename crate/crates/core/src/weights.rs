//! Binary weight format.
//!
//! ```text
//! magic    "PMED"            4 bytes
//! version  u16 LE            currently 1
//! count    u16 LE            number of matrices
//! repeated count times:
//!   rows   u32 LE
//!   cols   u32 LE
//!   data   rows*cols f64 LE, row-major
//! ```

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PMED";
pub const VERSION: u16 = 1;

pub fn encode(matrices: &[DMatrix<f64>]) -> Result<Vec<u8>> {
    let count =
        u16::try_from(matrices.len()).map_err(|_| Error::Format(format!("too many matrices: {}", matrices.len())))?;
    let payload: usize = matrices.iter().map(|m| 8 + 8 * m.len()).sum();
    let mut out = Vec::with_capacity(8 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for m in matrices {
        let rows = u32::try_from(m.nrows()).map_err(|_| Error::Format("row count overflows u32".into()))?;
        let cols = u32::try_from(m.ncols()).map_err(|_| Error::Format("column count overflows u32".into()))?;
        out.extend_from_slice(&rows.to_le_bytes());
        out.extend_from_slice(&cols.to_le_bytes());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format(format!("truncated while reading {what} at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<DMatrix<f64>>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take("magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(cur.take("version")?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u16::from_le_bytes(cur.take("count")?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = u32::from_le_bytes(cur.take("rows")?) as usize;
        let cols = u32::from_le_bytes(cur.take("cols")?) as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Format(format!("implausible matrix shape {rows}x{cols}")))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(cur.take("matrix data")?));
        }
        out.push(DMatrix::from_row_slice(rows, cols, &data));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(out)
}

pub fn write_file(path: impl AsRef<Path>, matrices: &[DMatrix<f64>]) -> Result<()> {
    std::fs::write(path, encode(matrices)?)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<DMatrix<f64>>> {
    decode(&std::fs::read(path)?)
}
