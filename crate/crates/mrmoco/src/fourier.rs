//! Unitary 2-D Fourier sampling operator.
//!
//! The forward operator maps a real image to fully sampled Cartesian
//! k-space; the adjoint maps k-space back to the real image part. Both
//! directions carry a `1/sqrt(width * height)` factor, so the transform is
//! unitary: Plancherel holds exactly and `adjoint(forward(u)) == u` up to
//! rounding. FFT plans are cached per operator instance.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::Result;
use crate::field::{ComplexField, ScalarField};

/// Cached unitary FFT pair for one grid size.
pub struct FourierOp {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl FourierOp {
    /// Plans transforms for a `width x height` grid.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        // Validate dims through the field constructor rules.
        ScalarField::zeros(width, height)?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn transform(&self, mut data: Vec<Complex64>, forward: bool) -> Vec<Complex64> {
        let (w, h) = (self.width, self.height);
        let row_plan = if forward { &self.row_fwd } else { &self.row_inv };
        let col_plan = if forward { &self.col_fwd } else { &self.col_inv };
        for row in data.chunks_exact_mut(w) {
            row_plan.process(row);
        }
        let mut cols = vec![Complex64::new(0.0, 0.0); w * h];
        for y in 0..h {
            for x in 0..w {
                cols[x * h + y] = data[y * w + x];
            }
        }
        for col in cols.chunks_exact_mut(h) {
            col_plan.process(col);
        }
        let scale = 1.0 / ((w * h) as f64).sqrt();
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = cols[x * h + y] * scale;
            }
        }
        data
    }

    /// Image to k-space: unitary 2-D DFT of the (real) image.
    pub fn forward(&self, u: &ScalarField) -> Result<ComplexField> {
        self.check(u.dims())?;
        let data: Vec<Complex64> = u
            .as_slice()
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        Ok(ComplexField::raw(
            self.width,
            self.height,
            self.transform(data, true),
        ))
    }

    /// k-space to image: real part of the unitary inverse DFT.
    pub fn adjoint(&self, x: &ComplexField) -> Result<ScalarField> {
        Ok(self.inverse(x)?.0)
    }

    /// Unitary inverse DFT split into real and imaginary parts.
    pub fn inverse(&self, x: &ComplexField) -> Result<(ScalarField, ScalarField)> {
        self.check(x.dims())?;
        let out = self.transform(x.as_slice().to_vec(), false);
        let re = out.iter().map(|v| v.re).collect();
        let im = out.iter().map(|v| v.im).collect();
        Ok((
            ScalarField::raw(self.width, self.height, re),
            ScalarField::raw(self.width, self.height, im),
        ))
    }

    fn check(&self, dims: (usize, usize)) -> Result<()> {
        if dims != (self.width, self.height) {
            return Err(crate::error::Error::GridMismatch {
                context: "fourier operator",
                expected: (self.width, self.height),
                got: dims,
            });
        }
        Ok(())
    }
}

/// A series of k-space acquisitions on one common grid.
#[derive(Debug, Clone)]
pub struct KSpaceStack {
    frames: Vec<ComplexField>,
}

impl KSpaceStack {
    /// Validates that at least one frame is present and all share a grid.
    pub fn new(frames: Vec<ComplexField>) -> Result<Self> {
        let first = frames.first().ok_or(crate::error::Error::DegenerateInput(
            "k-space stack needs at least one acquisition",
        ))?;
        for f in &frames {
            first.check_same_dims(f, "k-space stack")?;
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[ComplexField] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn into_frames(self) -> Vec<ComplexField> {
        self.frames
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(w: usize, h: usize, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarField::from_fn(w, h, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn zero_maps_to_zero() {
        let op = FourierOp::new(8, 8).unwrap();
        let z = ScalarField::zeros(8, 8).unwrap();
        let k = op.forward(&z).unwrap();
        assert_eq!(k.norm_sq(), 0.0);
        assert_eq!(op.adjoint(&k).unwrap().norm_sq(), 0.0);
    }

    #[test]
    fn plancherel_on_random_input() {
        let op = FourierOp::new(16, 16).unwrap();
        let u = random_field(16, 16, 7);
        let k = op.forward(&u).unwrap();
        let rel = (u.norm_sq() - k.norm_sq()).abs() / u.norm_sq();
        assert!(rel <= 1e-12, "Plancherel violated: rel err {rel}");
    }

    #[test]
    fn constant_image_concentrates_at_dc() {
        let (w, h, c) = (8, 16, 0.73);
        let op = FourierOp::new(w, h).unwrap();
        let u = ScalarField::from_fn(w, h, |_, _| c).unwrap();
        let k = op.forward(&u).unwrap();
        let expected_dc = c * ((w * h) as f64).sqrt();
        assert!((k.get(0, 0).re - expected_dc).abs() < 1e-12);
        assert!(k.get(0, 0).im.abs() < 1e-12);
        let off_dc: f64 = k
            .as_slice()
            .iter()
            .skip(1)
            .map(|v| v.norm_sqr())
            .sum::<f64>();
        assert!(off_dc < 1e-20);
    }

    #[test]
    fn roundtrip_is_identity() {
        for (w, h) in [(8, 8), (12, 20), (64, 64)] {
            let op = FourierOp::new(w, h).unwrap();
            let u = random_field(w, h, w as u64 * 31 + h as u64);
            let back = op.adjoint(&op.forward(&u).unwrap()).unwrap();
            let num = back
                .as_slice()
                .iter()
                .zip(u.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            assert!(num / u.norm_sq() <= 1e-24, "roundtrip err at {w}x{h}");
        }
    }

    #[test]
    fn forward_and_adjoint_are_adjoint() {
        let op = FourierOp::new(12, 8).unwrap();
        let u = random_field(12, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = ComplexField::from_vec(
            12,
            8,
            (0..96)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap();
        // Re<A u, x> == <u, A* x> for the real-restricted adjoint.
        let au = op.forward(&u).unwrap();
        let lhs: f64 = au
            .as_slice()
            .iter()
            .zip(x.as_slice())
            .map(|(a, b)| (a * b.conj()).re)
            .sum();
        let ax = op.adjoint(&x).unwrap();
        let rhs: f64 = u
            .as_slice()
            .iter()
            .zip(ax.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        assert!(
            (lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()),
            "adjoint identity violated: {lhs} vs {rhs}"
        );
    }

    #[test]
    fn forward_is_linear() {
        let op = FourierOp::new(8, 8).unwrap();
        let a = random_field(8, 8, 1);
        let b = random_field(8, 8, 2);
        let sum = ScalarField::from_fn(8, 8, |x, y| 2.0 * a.get(x, y) - 0.5 * b.get(x, y)).unwrap();
        let ka = op.forward(&a).unwrap();
        let kb = op.forward(&b).unwrap();
        let ks = op.forward(&sum).unwrap();
        for i in 0..64 {
            let expect = 2.0 * ka.as_slice()[i] - 0.5 * kb.as_slice()[i];
            assert!((ks.as_slice()[i] - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn stack_rejects_mixed_grids() {
        let a = ComplexField::zeros(8, 8).unwrap();
        let b = ComplexField::zeros(8, 16).unwrap();
        assert!(KSpaceStack::new(vec![a.clone(), b]).is_err());
        assert!(KSpaceStack::new(vec![]).is_err());
        assert!(KSpaceStack::new(vec![a.clone(), a]).is_ok());
    }
}
