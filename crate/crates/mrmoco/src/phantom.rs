//! Synthetic ground truth: an ellipse phantom, breathing-like motion, and
//! simulated noisy frequency-domain acquisitions.
//!
//! Each acquisition observes the truth image warped by a known displacement
//! `z_i` and sampled in the frequency domain:
//!
//! ```text
//! x_i = forward(truth . (Id + z_i)) + complex Gaussian noise
//! ```
//!
//! Motion follows a sinusoidal schedule `amplitude * sin(2 pi i / period)`,
//! spatially tapered to zero at the boundary by a smoothstep window so the
//! displacement matches the solver's fixed-boundary assumption. The taper
//! margin widens with the amplitude to keep `det(I + grad z_i)` above 0.2;
//! the generator verifies that floor on every frame and rejects motion
//! violating it.
//!
//! Intensities are deliberately small (peak about 0.2) and edges are
//! smoothed during rendering: the registration force scales with the
//! squared image gradient, and this scale keeps the default explicit time
//! steps of the joint solver stable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::calculus::{gaussian_blur, warp};
use crate::error::{Error, Result};
use crate::field::{DisplacementField, ScalarField, VectorField};
use crate::fourier::{FourierOp, KSpaceStack};

/// One ellipse of the phantom, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    /// Center x, pixels.
    pub cx: f64,
    /// Center y, pixels.
    pub cy: f64,
    /// Semi-axis along the (rotated) x direction, pixels.
    pub rx: f64,
    /// Semi-axis along the (rotated) y direction, pixels.
    pub ry: f64,
    /// Rotation angle, radians.
    pub angle: f64,
    /// Additive intensity contribution.
    pub intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Spatial pattern of the synthetic motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionKind {
    /// Rigid shift of the interior along a fixed direction, tapered to zero
    /// at the boundary.
    Translation,
    /// Vertical squash toward the horizontal midline (divergence-bearing),
    /// tapered likewise.
    Compression,
}

/// Full description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    /// Number of acquisitions T.
    pub frames: usize,
    /// Peak displacement magnitude, pixels.
    pub amplitude: f64,
    /// Frames per motion cycle.
    pub period: usize,
    pub kind: MotionKind,
    /// Standard deviation of the complex Gaussian noise added per
    /// frequency-domain sample (applied to real and imaginary parts).
    pub noise_sigma: f64,
    /// Seed for the noise generator; identical specs produce bit-identical
    /// output.
    pub seed: u64,
    pub ellipses: Vec<Ellipse>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 6,
            amplitude: 2.0,
            period: 6,
            kind: MotionKind::Translation,
            noise_sigma: 0.0,
            seed: 7,
            ellipses: default_ellipses(64, 64),
        }
    }
}

/// Standard ellipse layout scaled to the grid: a large body carrying a
/// scatter of internal blobs and holes. The internal features are spread so
/// that edges occur throughout the interior in many orientations; the
/// registration force is proportional to the image gradient, so texture-free
/// spans would otherwise have to be filled in purely by the elastic
/// regularizer.
pub fn default_ellipses(width: usize, height: usize) -> Vec<Ellipse> {
    let w = width as f64;
    let h = height as f64;
    let s = w.min(h);
    let e = |cx: f64, cy: f64, rx: f64, ry: f64, angle: f64, intensity: f64| Ellipse {
        cx: cx * w,
        cy: cy * h,
        rx: rx * s,
        ry: ry * s,
        angle,
        intensity,
    };
    vec![
        // body
        e(0.50, 0.50, 0.34, 0.41, 0.0, 0.12),
        // upper interior
        e(0.38, 0.34, 0.09, 0.06, 0.6, 0.06),
        e(0.64, 0.33, 0.07, 0.09, -0.4, 0.05),
        e(0.51, 0.24, 0.05, 0.04, 0.0, 0.05),
        // mid interior
        e(0.29, 0.52, 0.05, 0.07, 0.25, 0.05),
        e(0.71, 0.52, 0.045, 0.06, -0.2, -0.05),
        e(0.50, 0.45, 0.05, 0.045, 0.0, -0.05),
        e(0.50, 0.62, 0.04, 0.04, 0.0, 0.05),
        // lower interior
        e(0.37, 0.68, 0.075, 0.055, 1.0, 0.055),
        e(0.63, 0.70, 0.06, 0.08, -0.6, 0.05),
        e(0.50, 0.80, 0.045, 0.035, 0.0, -0.045),
    ]
}

/// Unit direction of the translation motion (both components exercised).
const TRANSLATION_DIR: (f64, f64) = (0.8944271909999159, 0.4472135954999579);

/// Generated dataset: the truth image, the per-frame displacements that
/// warped it, and the simulated acquisitions.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub truth: ScalarField,
    pub z_true: Vec<DisplacementField>,
    pub acquisitions: KSpaceStack,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 1 {
            return Err(Error::param("frames", "must be at least 1", self.frames as f64));
        }
        if self.period < 1 {
            return Err(Error::param("period", "must be at least 1", self.period as f64));
        }
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::param(
                "amplitude",
                "must be non-negative and finite",
                self.amplitude,
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::param(
                "noise_sigma",
                "must be non-negative and finite",
                self.noise_sigma,
            ));
        }
        if self.ellipses.is_empty() {
            return Err(Error::DegenerateInput("phantom has no ellipses"));
        }
        for e in &self.ellipses {
            if !(e.rx > 0.0 && e.ry > 0.0) || !e.intensity.is_finite() {
                return Err(Error::DegenerateInput("ellipse with non-positive axes"));
            }
        }
        Ok(())
    }

    /// Width of the boundary taper. At least 10% of the short grid side,
    /// widened for large amplitudes so the windowed displacement keeps
    /// `det(I + grad z) > 0.2` (the window slope contributes
    /// `amplitude * (|dx|+|dy|) * 1.5 / margin` to the gradient).
    fn taper_margin(&self) -> f64 {
        let s = self.width.min(self.height) as f64;
        let dir_sum = match self.kind {
            MotionKind::Translation => TRANSLATION_DIR.0.abs() + TRANSLATION_DIR.1.abs(),
            MotionKind::Compression => 1.0,
        };
        (0.1 * s).max(2.0 * self.amplitude * dir_sum).min(0.45 * s)
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Separable boundary taper: 1 in the interior, 0 on the boundary, with a
/// smoothstep transition of width `margin`.
fn taper_window(width: usize, height: usize, margin: f64) -> ScalarField {
    let edge = |i: usize, n: usize| -> f64 {
        let d_low = i as f64 / margin;
        let d_high = (n - 1 - i) as f64 / margin;
        smoothstep(d_low) * smoothstep(d_high)
    };
    ScalarField::from_fn(width, height, |x, y| edge(x, width) * edge(y, height)).unwrap()
}

/// Renders the superposed ellipses with 4x4 supersampling, then smooths
/// edges with a small Gaussian so image gradients stay moderate.
fn render_truth(spec: &PhantomSpec) -> Result<ScalarField> {
    const SS: usize = 4;
    let raw = ScalarField::from_fn(spec.width, spec.height, |x, y| {
        let mut acc = 0.0;
        for sy in 0..SS {
            for sx in 0..SS {
                let px = x as f64 + (sx as f64 + 0.5) / SS as f64 - 0.5;
                let py = y as f64 + (sy as f64 + 0.5) / SS as f64 - 0.5;
                for e in &spec.ellipses {
                    if e.contains(px, py) {
                        acc += e.intensity;
                    }
                }
            }
        }
        acc / (SS * SS) as f64
    })?;
    gaussian_blur(&raw, 1.0)
}

/// Displacement of frame `i` under the spec's motion schedule.
fn frame_displacement(spec: &PhantomSpec, window: &ScalarField, i: usize) -> DisplacementField {
    let phase = 2.0 * std::f64::consts::PI * i as f64 / spec.period as f64;
    let a = spec.amplitude * phase.sin();
    match spec.kind {
        MotionKind::Translation => VectorField {
            x: window.map(|w| a * TRANSLATION_DIR.0 * w),
            y: window.map(|w| a * TRANSLATION_DIR.1 * w),
        },
        MotionKind::Compression => {
            let cy = (spec.height - 1) as f64 / 2.0;
            let r_half = (spec.height - 1) as f64 / 2.0;
            let mut zy = ScalarField::zeros_like(window);
            for y in 0..spec.height {
                let squash = -a * (y as f64 - cy) / r_half;
                for x in 0..spec.width {
                    zy.set(x, y, squash * window.get(x, y));
                }
            }
            VectorField {
                x: ScalarField::zeros_like(window),
                y: zy,
            }
        }
    }
}

/// Builds the truth image, per-frame displacements, and noisy acquisitions.
/// Deterministic for a fixed spec (including the seed).
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let truth = render_truth(spec)?;
    let window = taper_window(spec.width, spec.height, spec.taper_margin());
    let op = FourierOp::new(spec.width, spec.height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).expect("validated sigma"))
    } else {
        None
    };

    let mut z_true = Vec::with_capacity(spec.frames);
    let mut frames = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let z = frame_displacement(spec, &window, i);
        let min_det = crate::deformation::jacobian_determinant(&z).min();
        if min_det <= 0.2 {
            return Err(Error::param(
                "amplitude",
                "frame deformation violates the determinant floor det(I + grad z) > 0.2",
                min_det,
            ));
        }
        let warped = warp(&truth, &z)?;
        let mut k = op.forward(&warped)?;
        if let Some(normal) = &noise {
            for v in k.as_mut_slice() {
                v.re += normal.sample(&mut rng);
                v.im += normal.sample(&mut rng);
            }
        }
        z_true.push(z);
        frames.push(k);
    }
    Ok(Phantom {
        truth,
        z_true,
        acquisitions: KSpaceStack::new(frames)?,
    })
}
