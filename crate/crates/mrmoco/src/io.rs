//! File formats for fields and their 8-bit visual exports.
//!
//! Numeric truth lives in binary files: a header of two little-endian
//! `u32` dimensions (width, height) followed by row-major little-endian
//! `f64` payloads — one plane for a scalar field, interleaved real/imag
//! pairs for a frequency-domain field, and two consecutive planes (x then
//! y) for a displacement field. Visual exports are 8-bit binary PGM with
//! the normalization stated per writer; they are for inspection only and
//! are never read back.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::{ComplexField, DisplacementField, ScalarField};

fn io_err(path: &Path, what: &str, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{what} {}: {e}", path.display()))
}

fn encode_header(width: usize, height: usize) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(8);
    bytes.extend_from_slice(&(width as u32).to_le_bytes());
    bytes.extend_from_slice(&(height as u32).to_le_bytes());
    bytes
}

fn append_f64s(bytes: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| io_err(path, "cannot read", e))?;
        Ok(Self {
            path,
            bytes,
            pos: 0,
        })
    }

    fn header(&mut self) -> Result<(usize, usize)> {
        if self.bytes.len() < 8 {
            return Err(io_err(self.path, "truncated header in", "expected 8 bytes"));
        }
        let w = u32::from_le_bytes(self.bytes[0..4].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(self.bytes[4..8].try_into().unwrap()) as usize;
        self.pos = 8;
        Ok((w, h))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let need = count * 8;
        if self.bytes.len() < self.pos + need {
            return Err(io_err(
                self.path,
                "truncated payload in",
                format!(
                    "expected {} bytes after header, found {}",
                    need,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = self.bytes[self.pos..self.pos + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += need;
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(io_err(
                self.path,
                "trailing bytes in",
                format!("{} unread", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Writes a scalar field (header + one plane).
pub fn write_scalar(path: &Path, f: &ScalarField) -> Result<()> {
    let mut bytes = encode_header(f.width(), f.height());
    append_f64s(&mut bytes, f.as_slice().iter().copied());
    fs::write(path, bytes).map_err(|e| io_err(path, "cannot write", e))
}

/// Reads a scalar field, validating dimensions and finiteness.
pub fn read_scalar(path: &Path) -> Result<ScalarField> {
    let mut r = Reader::open(path)?;
    let (w, h) = r.header()?;
    let data = r.f64s(w.saturating_mul(h))?;
    r.finish()?;
    ScalarField::from_vec(w, h, data)
}

/// Writes a frequency-domain field (header + interleaved re/im pairs).
pub fn write_complex(path: &Path, f: &ComplexField) -> Result<()> {
    let mut bytes = encode_header(f.width(), f.height());
    append_f64s(
        &mut bytes,
        f.as_slice().iter().flat_map(|c| [c.re, c.im]),
    );
    fs::write(path, bytes).map_err(|e| io_err(path, "cannot write", e))
}

/// Reads a frequency-domain field.
pub fn read_complex(path: &Path) -> Result<ComplexField> {
    let mut r = Reader::open(path)?;
    let (w, h) = r.header()?;
    let raw = r.f64s(w.saturating_mul(h).saturating_mul(2))?;
    r.finish()?;
    let data = raw
        .chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect();
    ComplexField::from_vec(w, h, data)
}

/// Writes a displacement field (header + x plane + y plane).
pub fn write_displacement(path: &Path, z: &DisplacementField) -> Result<()> {
    let mut bytes = encode_header(z.width(), z.height());
    append_f64s(&mut bytes, z.x.as_slice().iter().copied());
    append_f64s(&mut bytes, z.y.as_slice().iter().copied());
    fs::write(path, bytes).map_err(|e| io_err(path, "cannot write", e))
}

/// Reads a displacement field.
pub fn read_displacement(path: &Path) -> Result<DisplacementField> {
    let mut r = Reader::open(path)?;
    let (w, h) = r.header()?;
    let n = w.saturating_mul(h);
    let x = r.f64s(n)?;
    let y = r.f64s(n)?;
    r.finish()?;
    DisplacementField::new(ScalarField::from_vec(w, h, x)?, ScalarField::from_vec(w, h, y)?)
}

fn write_pgm_bytes(path: &Path, f: &ScalarField, to_byte: impl Fn(f64) -> u8) -> Result<()> {
    let mut out = Vec::with_capacity(f.len() + 32);
    write!(out, "P5\n{} {}\n255\n", f.width(), f.height())
        .expect("in-memory write cannot fail");
    out.extend(f.as_slice().iter().map(|&v| to_byte(v)));
    fs::write(path, out).map_err(|e| io_err(path, "cannot write", e))
}

/// 8-bit PGM export, min-max normalized (min -> 0, max -> 255). A constant
/// image exports as all zeros.
pub fn write_pgm(path: &Path, f: &ScalarField) -> Result<()> {
    let min = f.min();
    let range = f.max() - min;
    if range == 0.0 {
        return write_pgm_bytes(path, f, |_| 0);
    }
    write_pgm_bytes(path, f, |v| ((v - min) / range * 255.0).round() as u8)
}

/// 8-bit PGM export normalized symmetrically around zero (-max|f| -> 0,
/// 0 -> mid-gray, +max|f| -> 255). Intended for signed difference maps.
pub fn write_pgm_symmetric(path: &Path, f: &ScalarField) -> Result<()> {
    let m = f.max_abs();
    if m == 0.0 {
        return write_pgm_bytes(path, f, |_| 128);
    }
    write_pgm_bytes(path, f, |v| ((v / m + 1.0) * 127.5).round() as u8)
}
