//! Portable binary form of an [`LccDecomposition`].
//!
//! All integers are little-endian. Layout (version 1):
//!
//! ```text
//! header
//!   [u8; 4]  magic "LCCD"
//!   u32      version = 1
//!   u64      rows, cols, slice_width
//!   u8       algorithm: 0 = FP, 1 = FS
//!   u32      FP terms per row (0 for FS)
//!   f64      achieved SQNR in dB (IEEE-754 bits, +inf when exact)
//!   u8       converged flag
//!   u64      clamped exponent count
//!   u64      FS steps
//!   u64      slice count
//! per slice
//!   u64      first column, u64 column count
//!   u32      factor count
//!   per factor
//!     u32    in_dim
//!     u8     carry flag
//!     u32    row count
//!     per row
//!       u32  term count
//!       per term: u32 source, i32 exponent, i8 sign
//! ```
//!
//! Decoding then re-encoding reproduces the input bytes exactly.

use std::path::Path;

use super::{Algorithm, Diagnostics, FactorMatrix, LccDecomposition, PowTerm, SliceDecomposition};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LCCD";
pub const VERSION: u32 = 1;

pub fn encode(d: &LccDecomposition) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    for v in [d.rows, d.cols, d.slice_width] {
        b.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let (tag, terms) = match d.algorithm {
        Algorithm::Fp { terms } => (0u8, terms as u32),
        Algorithm::Fs => (1u8, 0),
    };
    b.push(tag);
    b.extend_from_slice(&terms.to_le_bytes());
    b.extend_from_slice(&d.achieved_sqnr.to_bits().to_le_bytes());
    b.push(d.diagnostics.converged as u8);
    b.extend_from_slice(&d.diagnostics.clamped_exponents.to_le_bytes());
    b.extend_from_slice(&d.diagnostics.steps.to_le_bytes());
    b.extend_from_slice(&(d.slices.len() as u64).to_le_bytes());
    for s in &d.slices {
        b.extend_from_slice(&(s.col_start as u64).to_le_bytes());
        b.extend_from_slice(&(s.col_len as u64).to_le_bytes());
        b.extend_from_slice(&(s.factors.len() as u32).to_le_bytes());
        for f in &s.factors {
            b.extend_from_slice(&(f.in_dim as u32).to_le_bytes());
            b.push(f.carry as u8);
            b.extend_from_slice(&(f.rows.len() as u32).to_le_bytes());
            for row in &f.rows {
                b.extend_from_slice(&(row.len() as u32).to_le_bytes());
                for t in row {
                    b.extend_from_slice(&t.source.to_le_bytes());
                    b.extend_from_slice(&t.exponent.to_le_bytes());
                    b.push(t.sign as u8);
                }
            }
        }
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> std::result::Result<i32, String> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn flag(&mut self) -> std::result::Result<bool, String> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(format!("bad flag byte {v}")),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<LccDecomposition> {
    decode_inner(bytes).map_err(|e| match e {
        DecodeError::Version(found) => Error::Version {
            found,
            expected: VERSION,
        },
        DecodeError::Msg(m) => Error::format("<decomposition>", m),
    })
}

enum DecodeError {
    Version(u32),
    Msg(String),
}

impl From<String> for DecodeError {
    fn from(s: String) -> Self {
        DecodeError::Msg(s)
    }
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<LccDecomposition, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".to_string().into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DecodeError::Version(version));
    }
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let slice_width = r.u64()? as usize;
    let tag = r.u8()?;
    let terms = r.u32()? as usize;
    let algorithm = match tag {
        0 => Algorithm::Fp { terms },
        1 => Algorithm::Fs,
        t => return Err(format!("unknown algorithm tag {t}").into()),
    };
    let achieved_sqnr = f64::from_bits(r.u64()?);
    let converged = r.flag()?;
    let clamped_exponents = r.u64()?;
    let steps = r.u64()?;
    let n_slices = r.u64()?;
    let mut slices = Vec::new();
    for _ in 0..n_slices {
        let col_start = r.u64()? as usize;
        let col_len = r.u64()? as usize;
        let n_f = r.u32()?;
        let mut factors = Vec::new();
        for _ in 0..n_f {
            let in_dim = r.u32()? as usize;
            let carry = r.flag()?;
            let n_rows = r.u32()?;
            let mut rows_v = Vec::new();
            for _ in 0..n_rows {
                let n_t = r.u32()?;
                let mut row = Vec::new();
                for _ in 0..n_t {
                    let source = r.u32()?;
                    let exponent = r.i32()?;
                    let sign = r.u8()? as i8;
                    row.push(PowTerm {
                        source,
                        exponent,
                        sign,
                    });
                }
                rows_v.push(row);
            }
            factors.push(FactorMatrix {
                in_dim,
                carry,
                rows: rows_v,
            });
        }
        slices.push(SliceDecomposition {
            col_start,
            col_len,
            factors,
        });
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos).into());
    }
    let d = LccDecomposition {
        rows,
        cols,
        slice_width,
        algorithm,
        slices,
        achieved_sqnr,
        diagnostics: Diagnostics {
            clamped_exponents,
            converged,
            steps,
        },
    };
    d.validate().map_err(|e| DecodeError::Msg(e.to_string()))?;
    Ok(d)
}

pub fn save(d: &LccDecomposition, path: &Path) -> Result<()> {
    std::fs::write(path, encode(d))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LccDecomposition> {
    let bytes = std::fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { msg, .. } => Error::format(path, msg),
        other => other,
    })
}
