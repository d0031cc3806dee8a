//! Polyconvex stored-energy density for the deformation gradient and its
//! pointwise semi-implicit relaxation.
//!
//! For a per-pixel matrix `F = I + v` (identity plus displacement gradient)
//! the density is
//!
//! ```text
//! W(F) = a1 * ||F||_F^4 + a2 * (det F - 1/det F)^4   if det F > 0,
//!        +infinity                                    otherwise,
//! ```
//!
//! which penalizes both shear (Frobenius growth) and volume change while
//! blowing up as the map loses injectivity (`det F -> 0+`). [`update_v`]
//! performs one semi-implicit gradient step of the relaxed functional
//! `sum W(I + v) + gamma1/2 * ||v - grad z||^2`, treating the quadratic
//! coupling implicitly: the explicit part uses the analytic gradient of `W`
//! and the step is divided by `1 + dt * gamma1`.

use crate::calculus::gradient;
use crate::error::{Error, Result};
use crate::field::{ScalarField, TensorField, VectorField};

/// Material weights of the stored-energy density.
#[derive(Debug, Clone, Copy)]
pub struct OgdenParams {
    /// Weight of the Frobenius (shear) term.
    pub a1: f64,
    /// Weight of the volume-change term.
    pub a2: f64,
}

impl Default for OgdenParams {
    fn default() -> Self {
        Self { a1: 1.0, a2: 50.0 }
    }
}

/// Per-pixel 2x2 matrix; `xy` is the x-row/y-column entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2 {
    pub xx: f64,
    pub xy: f64,
    pub yx: f64,
    pub yy: f64,
}

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2 {
        xx: 1.0,
        xy: 0.0,
        yx: 0.0,
        yy: 1.0,
    };

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.yx
    }

    /// Squared Frobenius norm.
    pub fn frob_sq(&self) -> f64 {
        self.xx * self.xx + self.xy * self.xy + self.yx * self.yx + self.yy * self.yy
    }
}

/// Stored energy of one deformation-gradient matrix; infinite when the
/// orientation is lost (`det F <= 0`).
pub fn w_op(f: &Mat2, p: &OgdenParams) -> f64 {
    let det = f.det();
    if det <= 0.0 {
        return f64::INFINITY;
    }
    let frob = f.frob_sq();
    let vol = det - 1.0 / det;
    p.a1 * frob * frob + p.a2 * vol * vol * vol * vol
}

/// Derivative of the volume penalty `(d - 1/d)^4` with respect to `d`:
/// `4 (d - 1/d)^3 (1 + 1/d^2)`.
pub fn gamma_prime(delta: f64) -> f64 {
    let c0 = delta - 1.0 / delta;
    let c1 = 1.0 + 1.0 / (delta * delta);
    4.0 * c0 * c0 * c0 * c1
}

/// Analytic gradient of [`w_op`] with respect to the matrix entries.
/// Meaningful for `det F > 0`, where the density is differentiable.
pub fn w_op_grad(f: &Mat2, p: &OgdenParams) -> Mat2 {
    let det = f.det();
    let frob = f.frob_sq();
    let shear = 4.0 * p.a1 * frob;
    let vol = p.a2 * gamma_prime(det);
    // d(det)/dF is the cofactor matrix [[yy, -yx], [-xy, xx]].
    Mat2 {
        xx: shear * f.xx + vol * f.yy,
        xy: shear * f.xy - vol * f.yx,
        yx: shear * f.yx - vol * f.xy,
        yy: shear * f.yy + vol * f.xx,
    }
}

/// One semi-implicit relaxation step for the displacement-gradient field.
///
/// Per pixel, with `F = I + v` and `G = grad z`:
///
/// ```text
/// v_new = (v + dt * (-dW(F) + gamma1 * G)) / (1 + dt * gamma1)
/// ```
///
/// Errors with [`Error::StepDiverged`] if any pixel produces a non-finite
/// value (e.g. because `det F` crossed zero); callers retry with a halved
/// `dt`.
pub fn update_v(
    v: &TensorField,
    z: &VectorField,
    p: &OgdenParams,
    gamma1: f64,
    dt: f64,
) -> Result<TensorField> {
    v.xx.check_same_dims(&z.x, "update_v: v vs z")?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::param("dt", "must be positive", dt));
    }
    let gz1 = gradient(&z.x);
    let gz2 = gradient(&z.y);
    let (w, h) = v.dims();
    let n = w * h;
    let denom = 1.0 + dt * gamma1;
    let mut xx = vec![0.0; n];
    let mut xy = vec![0.0; n];
    let mut yx = vec![0.0; n];
    let mut yy = vec![0.0; n];
    for i in 0..n {
        let f = Mat2 {
            xx: 1.0 + v.xx.as_slice()[i],
            xy: v.xy.as_slice()[i],
            yx: v.yx.as_slice()[i],
            yy: 1.0 + v.yy.as_slice()[i],
        };
        let grad_w = w_op_grad(&f, p);
        xx[i] = (v.xx.as_slice()[i] + dt * (-grad_w.xx + gamma1 * gz1.x.as_slice()[i])) / denom;
        xy[i] = (v.xy.as_slice()[i] + dt * (-grad_w.xy + gamma1 * gz1.y.as_slice()[i])) / denom;
        yx[i] = (v.yx.as_slice()[i] + dt * (-grad_w.yx + gamma1 * gz2.x.as_slice()[i])) / denom;
        yy[i] = (v.yy.as_slice()[i] + dt * (-grad_w.yy + gamma1 * gz2.y.as_slice()[i])) / denom;
        if !(xx[i].is_finite() && xy[i].is_finite() && yx[i].is_finite() && yy[i].is_finite()) {
            return Err(Error::StepDiverged { pixel: i, dt });
        }
    }
    Ok(TensorField {
        xx: ScalarField::raw(w, h, xx),
        xy: ScalarField::raw(w, h, xy),
        yx: ScalarField::raw(w, h, yx),
        yy: ScalarField::raw(w, h, yy),
    })
}

/// Total stored energy plus quadratic coupling of a tensor field to the
/// gradient of `z`: `sum_p W(I + v(p)) + gamma1/2 * ||v - grad z||_F^2`.
/// Used by the solver's energy log and by the relaxation tests.
pub fn relaxation_energy(v: &TensorField, z: &VectorField, p: &OgdenParams, gamma1: f64) -> f64 {
    let gz1 = gradient(&z.x);
    let gz2 = gradient(&z.y);
    let n = v.xx.len();
    let mut total = 0.0;
    for i in 0..n {
        let f = Mat2 {
            xx: 1.0 + v.xx.as_slice()[i],
            xy: v.xy.as_slice()[i],
            yx: v.yx.as_slice()[i],
            yy: 1.0 + v.yy.as_slice()[i],
        };
        let dx = [
            v.xx.as_slice()[i] - gz1.x.as_slice()[i],
            v.xy.as_slice()[i] - gz1.y.as_slice()[i],
            v.yx.as_slice()[i] - gz2.x.as_slice()[i],
            v.yy.as_slice()[i] - gz2.y.as_slice()[i],
        ];
        total += w_op(&f, p) + 0.5 * gamma1 * dx.iter().map(|d| d * d).sum::<f64>();
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const P: OgdenParams = OgdenParams { a1: 1.0, a2: 50.0 };

    #[test]
    fn identity_energy_is_four_a1() {
        for a1 in [1.0, 2.5] {
            let p = OgdenParams { a1, a2: 50.0 };
            assert_eq!(w_op(&Mat2::IDENTITY, &p), 4.0 * a1);
        }
    }

    #[test]
    fn orientation_loss_is_infinite() {
        let f = Mat2 {
            xx: 1.0,
            xy: 0.0,
            yx: 0.0,
            yy: -1.0,
        };
        assert_eq!(w_op(&f, &P), f64::INFINITY);
        let g = Mat2 {
            xx: 0.0,
            xy: 0.0,
            yx: 0.0,
            yy: 1.0,
        };
        assert_eq!(w_op(&g, &P), f64::INFINITY);
    }

    #[test]
    fn unit_determinant_stretch_matches_closed_form() {
        // diag(2, 1/2): Frobenius^2 = 4.25, det = 1, so W = 18.0625 * a1.
        let f = Mat2 {
            xx: 2.0,
            xy: 0.0,
            yx: 0.0,
            yy: 0.5,
        };
        assert!((w_op(&f, &P) - 18.0625 * P.a1).abs() < 1e-12);
    }

    #[test]
    fn volume_penalty_derivative_values() {
        assert_eq!(gamma_prime(1.0), 0.0);
        assert!((gamma_prime(2.0) - 16.875).abs() < 1e-12);
    }

    #[test]
    fn volume_penalty_derivative_matches_finite_differences() {
        let quartic = |d: f64| {
            let c = d - 1.0 / d;
            c * c * c * c
        };
        let mut d = 0.2;
        while d <= 5.0 {
            let h = 1e-6 * d;
            let fd = (quartic(d + h) - quartic(d - h)) / (2.0 * h);
            let an = gamma_prime(d);
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                "mismatch at {d}: fd {fd} vs analytic {an}"
            );
            d += 0.05;
        }
    }

    #[test]
    fn energy_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let f = random_positive_matrix(&mut rng);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (s, c) = theta.sin_cos();
            let rf = Mat2 {
                xx: c * f.xx - s * f.yx,
                xy: c * f.xy - s * f.yy,
                yx: s * f.xx + c * f.yx,
                yy: s * f.xy + c * f.yy,
            };
            let a = w_op(&f, &P);
            let b = w_op(&rf, &P);
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }

    fn random_positive_matrix(rng: &mut ChaCha8Rng) -> Mat2 {
        loop {
            let f = Mat2 {
                xx: rng.gen_range(0.3..1.8),
                xy: rng.gen_range(-0.5..0.5),
                yx: rng.gen_range(-0.5..0.5),
                yy: rng.gen_range(0.3..1.8),
            };
            if (0.5..=2.0).contains(&f.det()) {
                return f;
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = 1e-6;
        for _ in 0..20 {
            let f = random_positive_matrix(&mut rng);
            let grad = w_op_grad(&f, &P);
            let eval = |m: Mat2| w_op(&m, &P);
            let fd = |sel: fn(&mut Mat2) -> &mut f64| {
                let mut fp = f;
                *sel(&mut fp) += h;
                let mut fm = f;
                *sel(&mut fm) -= h;
                (eval(fp) - eval(fm)) / (2.0 * h)
            };
            let pairs = [
                (grad.xx, fd(|m| &mut m.xx)),
                (grad.xy, fd(|m| &mut m.xy)),
                (grad.yx, fd(|m| &mut m.yx)),
                (grad.yy, fd(|m| &mut m.yy)),
            ];
            for (an, num) in pairs {
                let rel = (an - num).abs() / (1.0 + an.abs());
                assert!(rel < 1e-5, "gradient mismatch: {an} vs {num} on {f:?}");
            }
        }
    }

    /// Brute-force minimum of the per-pixel relaxed energy over diagonal
    /// matrices `v = diag(d1, d2)` on a 0.01-step grid.
    fn brute_force_diagonal(g: (f64, f64), gamma1: f64) -> (f64, f64, f64) {
        let mut best = (0.0, 0.0, f64::INFINITY);
        let mut d1 = -0.5;
        while d1 <= 0.5 {
            let mut d2 = -0.5;
            while d2 <= 0.5 {
                let f = Mat2 {
                    xx: 1.0 + d1,
                    xy: 0.0,
                    yx: 0.0,
                    yy: 1.0 + d2,
                };
                let e = w_op(&f, &P)
                    + 0.5 * gamma1 * ((d1 - g.0) * (d1 - g.0) + (d2 - g.1) * (d2 - g.1));
                if e < best.2 {
                    best = (d1, d2, e);
                }
                d2 += 0.01;
            }
            d1 += 0.01;
        }
        best
    }

    #[test]
    fn relaxation_converges_to_pointwise_minimizer() {
        // z = 0: every pixel relaxes to the same diagonal stationary point.
        let gamma1 = 5.0;
        let z = VectorField::zeros(6, 6).unwrap();
        let mut v = TensorField::zeros(6, 6).unwrap();
        for _ in 0..20_000 {
            v = update_v(&v, &z, &P, gamma1, 1e-3).unwrap();
        }
        let (d1, d2, e_star) = brute_force_diagonal((0.0, 0.0), gamma1);
        let got = v.at(3, 3);
        assert!(got[1].abs() < 1e-12 && got[2].abs() < 1e-12);
        assert!(
            (got[0] - d1).abs() < 0.011 && (got[3] - d2).abs() < 0.011,
            "converged to {got:?}, brute force ({d1}, {d2})"
        );
        let f = Mat2 {
            xx: 1.0 + got[0],
            xy: got[1],
            yx: got[2],
            yy: 1.0 + got[3],
        };
        let e = w_op(&f, &P);
        assert!(e <= e_star + 1e-4, "iterate energy {e} vs brute {e_star}");
    }

    #[test]
    fn relaxation_tracks_gradient_coupling() {
        // A linear ramp displacement: interior pixels see a constant
        // diagonal gradient (0.2, -0.1); compare against brute force there.
        let gamma1 = 5.0;
        let zx = ScalarField::from_fn(8, 8, |x, _| 0.2 * x as f64).unwrap();
        let zy = ScalarField::from_fn(8, 8, |_, y| -0.1 * y as f64).unwrap();
        let z = VectorField::new(zx, zy).unwrap();
        let mut v = TensorField::zeros(8, 8).unwrap();
        for _ in 0..20_000 {
            v = update_v(&v, &z, &P, gamma1, 1e-3).unwrap();
        }
        let (d1, d2, _) = brute_force_diagonal((0.2, -0.1), gamma1);
        let got = v.at(4, 4);
        assert!(
            (got[0] - d1).abs() < 0.011 && (got[3] - d2).abs() < 0.011,
            "converged to {got:?}, brute force ({d1}, {d2})"
        );
    }

    #[test]
    fn relaxation_energy_is_monotone() {
        let zx = ScalarField::from_fn(8, 8, |x, y| 0.05 * (x as f64 * 0.9).sin() * y as f64).unwrap();
        let zy = ScalarField::from_fn(8, 8, |x, _| 0.03 * x as f64).unwrap();
        let z = VectorField::new(zx, zy).unwrap();
        let mut v = TensorField::zeros(8, 8).unwrap();
        let mut prev = relaxation_energy(&v, &z, &P, 5.0);
        for _ in 0..200 {
            v = update_v(&v, &z, &P, 5.0, 1e-3).unwrap();
            let e = relaxation_energy(&v, &z, &P, 5.0);
            assert!(e <= prev + 1e-10 * (1.0 + prev.abs()), "{e} > {prev}");
            prev = e;
        }
    }

    #[test]
    fn degenerate_determinant_reports_diverged_step() {
        let z = VectorField::zeros(4, 4).unwrap();
        let mut v = TensorField::zeros(4, 4).unwrap();
        // Make det(I + v) = 0 at pixel (1, 1).
        v.xx.set(1, 1, -1.0);
        match update_v(&v, &z, &P, 5.0, 1e-3) {
            Err(Error::StepDiverged { pixel, .. }) => assert_eq!(pixel, 5),
            other => panic!("expected StepDiverged, got {other:?}"),
        }
    }
}
