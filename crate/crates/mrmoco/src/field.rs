//! Dense 2-D field containers.
//!
//! All solver state lives on a common rectangular pixel grid with unit
//! spacing. Fields are stored row-major (`index = y * width + x`) as `f64`
//! (or `Complex64` for frequency-domain data). Constructors validate that
//! both dimensions are at least [`MIN_DIM`] and that every entry is finite,
//! so downstream operators never have to re-check.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Smallest admissible grid extent along either axis. The finite-difference
/// stencils need at least this many samples to be meaningful.
pub const MIN_DIM: usize = 4;

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width < MIN_DIM {
        return Err(Error::param("width", "must be at least 4", width as f64));
    }
    if height < MIN_DIM {
        return Err(Error::param("height", "must be at least 4", height as f64));
    }
    Ok(())
}

/// Real scalar field on a 2-D grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarField {
    /// All-zero field. Errors if either dimension is below [`MIN_DIM`].
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![0.0; width * height],
        })
    }

    /// Builds a field from row-major data, validating length and finiteness.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(Error::param(
                "data",
                "length must equal width * height",
                data.len() as f64,
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds a field by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::from_vec(width, height, data)
    }

    /// Internal constructor for operator outputs whose dims are inherited
    /// from already-validated inputs.
    pub(crate) fn raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert!(width >= MIN_DIM && height >= MIN_DIM);
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub(crate) fn zeros_like(other: &Self) -> Self {
        Self::raw(other.width, other.height, vec![0.0; other.data.len()])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(width, height)` pair.
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Sum of squared entries.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Pixel-wise map into a new field.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self::raw(
            self.width,
            self.height,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Errors unless `other` lives on the same grid.
    pub fn check_same_dims(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::GridMismatch {
                context,
                expected: self.dims(),
                got: other.dims(),
            });
        }
        Ok(())
    }
}

/// Complex field on a 2-D grid, row-major. Used for frequency-domain data.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    width: usize,
    height: usize,
    data: Vec<Complex64>,
}

impl ComplexField {
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![Complex64::new(0.0, 0.0); width * height],
        })
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<Complex64>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(Error::param(
                "data",
                "length must equal width * height",
                data.len() as f64,
            ));
        }
        if let Some(index) = data
            .iter()
            .position(|v| !v.re.is_finite() || !v.im.is_finite())
        {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub(crate) fn raw(width: usize, height: usize, data: Vec<Complex64>) -> Self {
        debug_assert!(width >= MIN_DIM && height >= MIN_DIM);
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Complex64 {
        self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Sum of squared magnitudes.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn check_same_dims(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::GridMismatch {
                context,
                expected: self.dims(),
                got: other.dims(),
            });
        }
        Ok(())
    }
}

/// Two-component vector field: per-pixel `(x, y)` vectors stored as two
/// scalar planes. Used both for displacement fields and for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    /// x-component (first component, along image columns).
    pub x: ScalarField,
    /// y-component (second component, along image rows).
    pub y: ScalarField,
}

/// A displacement field `z`, mapping a pixel `p` to `p + z(p)`.
pub type DisplacementField = VectorField;

impl VectorField {
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Ok(Self {
            x: ScalarField::zeros(width, height)?,
            y: ScalarField::zeros(width, height)?,
        })
    }

    /// Builds a vector field from component planes on a common grid.
    pub fn new(x: ScalarField, y: ScalarField) -> Result<Self> {
        x.check_same_dims(&y, "vector field components")?;
        Ok(Self { x, y })
    }

    pub(crate) fn zeros_like(other: &ScalarField) -> Self {
        Self {
            x: ScalarField::zeros_like(other),
            y: ScalarField::zeros_like(other),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.x.dims()
    }

    pub fn width(&self) -> usize {
        self.x.width()
    }

    pub fn height(&self) -> usize {
        self.x.height()
    }

    /// Largest per-pixel Euclidean magnitude.
    pub fn max_norm(&self) -> f64 {
        self.x
            .as_slice()
            .iter()
            .zip(self.y.as_slice())
            .fold(0.0f64, |m, (&a, &b)| m.max(a.hypot(b)))
    }

    pub fn check_same_dims(&self, other: &Self, context: &'static str) -> Result<()> {
        self.x.check_same_dims(&other.x, context)
    }
}

/// Four-component 2x2 tensor field (per-pixel matrices), stored as planes.
///
/// Component `xy` is the x-row/y-column entry of the per-pixel matrix, i.e.
/// for a displacement gradient it holds d(z_x)/dy.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub xx: ScalarField,
    pub xy: ScalarField,
    pub yx: ScalarField,
    pub yy: ScalarField,
}

impl TensorField {
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Ok(Self {
            xx: ScalarField::zeros(width, height)?,
            xy: ScalarField::zeros(width, height)?,
            yx: ScalarField::zeros(width, height)?,
            yy: ScalarField::zeros(width, height)?,
        })
    }

    pub(crate) fn zeros_like(other: &ScalarField) -> Self {
        Self {
            xx: ScalarField::zeros_like(other),
            xy: ScalarField::zeros_like(other),
            yx: ScalarField::zeros_like(other),
            yy: ScalarField::zeros_like(other),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.xx.dims()
    }

    /// Per-pixel matrix at `(x, y)` as `[xx, xy, yx, yy]`.
    pub fn at(&self, x: usize, y: usize) -> [f64; 4] {
        [
            self.xx.get(x, y),
            self.xy.get(x, y),
            self.yx.get(x, y),
            self.yy.get(x, y),
        ]
    }

    pub fn check_same_dims(&self, other: &Self, context: &'static str) -> Result<()> {
        self.xx.check_same_dims(&other.xx, context)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_dims() {
        assert!(ScalarField::zeros(3, 8).is_err());
        assert!(ScalarField::zeros(8, 3).is_err());
        assert!(ScalarField::zeros(4, 4).is_ok());
        assert!(ComplexField::zeros(2, 16).is_err());
        assert!(VectorField::zeros(16, 3).is_err());
        assert!(TensorField::zeros(1, 1).is_err());
    }

    #[test]
    fn rejects_non_finite_entries() {
        let mut data = vec![0.0; 16];
        data[5] = f64::NAN;
        match ScalarField::from_vec(4, 4, data) {
            Err(Error::NonFinite { index }) => assert_eq!(index, 5),
            other => panic!("expected NonFinite error, got {other:?}"),
        }
        let mut data = vec![0.0; 16];
        data[3] = f64::INFINITY;
        assert!(ScalarField::from_vec(4, 4, data).is_err());
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(ScalarField::from_vec(4, 4, vec![0.0; 15]).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let f = ScalarField::from_fn(5, 4, |x, y| (y * 5 + x) as f64).unwrap();
        assert_eq!(f.get(0, 0), 0.0);
        assert_eq!(f.get(4, 0), 4.0);
        assert_eq!(f.get(0, 1), 5.0);
        assert_eq!(f.get(4, 3), 19.0);
        assert_eq!(f.as_slice()[7], f.get(2, 1));
    }

    #[test]
    fn vector_field_requires_matching_planes() {
        let a = ScalarField::zeros(4, 4).unwrap();
        let b = ScalarField::zeros(5, 4).unwrap();
        assert!(VectorField::new(a, b).is_err());
    }
}
