//! Deformation machinery: Jacobians, the semi-implicit smoothing flow for
//! the displacement, fixed-point inversion, composition, and regridding.
//!
//! Deformations are represented by displacement fields `z`, mapping a pixel
//! `p` to `phi(p) = p + z(p)`. The flow step for one acquisition descends
//! the coupling energy `gamma1/2 ||v - grad z||^2` plus the matching energy
//! `gamma2/2 ||w(phi) - u||^2`, treating the Laplacian implicitly
//! (the first variations are `gamma1 (div v - Lap z)` and
//! `gamma2 (w(phi) - u) grad w(phi)`):
//!
//! ```text
//! (Id - dt * gamma1 * Lap) z_new = z - dt * [ gamma1 * (div v_1; div v_2)
//!                                  + gamma2 * (w(phi) - u) * grad w(phi) ]
//! ```
//!
//! with homogeneous Dirichlet boundary values. The linear
//! system is symmetric positive definite and extremely well conditioned
//! (`dt * gamma1` is small), so a few conjugate-gradient sweeps reach the
//! 1e-8 relative residual required here.
//!
//! When a proposed step would push `det(I + grad z)` below a floor, the
//! solver re-grids: the last accepted displacement is pushed onto a history
//! stack, the working displacement restarts from identity, and the moving
//! image is resampled through the saved map. The physical deformation is
//! always the composition of the saved maps with the working one.

use crate::calculus::{
    divergence, gradient, gradient_centered, sample_bilinear_clamped, warp, warp_vector,
};
use crate::error::{Error, Result};
use crate::field::{DisplacementField, ScalarField, TensorField, VectorField};

/// Pointwise determinant of `I + grad z`.
pub fn jacobian_determinant(z: &DisplacementField) -> ScalarField {
    let g1 = gradient(&z.x);
    let g2 = gradient(&z.y);
    let n = z.x.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let a = 1.0 + g1.x.as_slice()[i];
        let b = g1.y.as_slice()[i];
        let c = g2.x.as_slice()[i];
        let d = 1.0 + g2.y.as_slice()[i];
        out[i] = a * d - b * c;
    }
    let (w, h) = z.dims();
    ScalarField::raw(w, h, out)
}

/// Conjugate gradients for `(Id - c * Lap) x = b` with homogeneous
/// Dirichlet boundary values; `x` and `b` live on the full grid but only
/// interior entries are unknowns. Returns the solution and the relative
/// residual reached.
fn solve_screened_poisson(b: &ScalarField, c: f64, tol: f64) -> Result<ScalarField> {
    let (w, h) = b.dims();
    let n = w * h;
    let interior = |x: usize, y: usize| x > 0 && x + 1 < w && y > 0 && y + 1 < h;
    let apply = |src: &[f64], dst: &mut [f64]| {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if interior(x, y) {
                    let lap =
                        src[i - 1] + src[i + 1] + src[i - w] + src[i + w] - 4.0 * src[i];
                    dst[i] = src[i] - c * lap;
                } else {
                    dst[i] = 0.0;
                }
            }
        }
    };
    let mut rhs = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            if interior(x, y) {
                rhs[y * w + x] = b.as_slice()[y * w + x];
            }
        }
    }
    let b_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if b_norm == 0.0 {
        return Ok(ScalarField::raw(w, h, rhs));
    }
    // Start from the right-hand side: the operator is a small perturbation
    // of the identity, so this is already close.
    let mut x = rhs.clone();
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rs: f64 = r.iter().map(|v| v * v).sum();
    let max_iter = 500;
    for _ in 0..max_iter {
        if rs.sqrt() <= tol * b_norm {
            return Ok(ScalarField::raw(w, h, x));
        }
        let mut ap = vec![0.0; n];
        apply(&p, &mut ap);
        let denom: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rs / denom;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    let residual = rs.sqrt() / b_norm;
    if residual <= tol {
        Ok(ScalarField::raw(w, h, x))
    } else {
        Err(Error::LinearSolveFailed {
            iterations: max_iter,
            residual,
        })
    }
}

/// One semi-implicit flow step for the displacement of one acquisition,
/// with the gradient of `w` supplied by the caller (it is constant across
/// the inner loop, so computing it once per outer iteration saves work).
pub fn update_phi_with_gradient(
    z: &DisplacementField,
    v: &TensorField,
    w: &ScalarField,
    grad_w: &VectorField,
    u: &ScalarField,
    gamma1: f64,
    gamma2: f64,
    dt: f64,
) -> Result<DisplacementField> {
    w.check_same_dims(u, "update_phi: w vs u")?;
    w.check_same_dims(&z.x, "update_phi: w vs z")?;
    v.xx.check_same_dims(w, "update_phi: v vs w")?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::param("dt", "must be positive", dt));
    }
    let div_v1 = divergence(&VectorField {
        x: v.xx.clone(),
        y: v.xy.clone(),
    });
    let div_v2 = divergence(&VectorField {
        x: v.yx.clone(),
        y: v.yy.clone(),
    });
    let w_warped = warp(w, z)?;
    let gw_warped = warp_vector(grad_w, z)?;
    let (width, height) = w.dims();
    let n = width * height;
    let mut rhs_x = vec![0.0; n];
    let mut rhs_y = vec![0.0; n];
    for i in 0..n {
        let residual = w_warped.as_slice()[i] - u.as_slice()[i];
        rhs_x[i] = z.x.as_slice()[i]
            - dt * (gamma1 * div_v1.as_slice()[i] + gamma2 * residual * gw_warped.x.as_slice()[i]);
        rhs_y[i] = z.y.as_slice()[i]
            - dt * (gamma1 * div_v2.as_slice()[i] + gamma2 * residual * gw_warped.y.as_slice()[i]);
    }
    let c = dt * gamma1;
    let zx = solve_screened_poisson(&ScalarField::raw(width, height, rhs_x), c, 1e-8)?;
    let zy = solve_screened_poisson(&ScalarField::raw(width, height, rhs_y), c, 1e-8)?;
    Ok(DisplacementField { x: zx, y: zy })
}

/// One semi-implicit flow step for the displacement (see
/// [`update_phi_with_gradient`]). The matching force uses the
/// centre-placed image gradient: forward differences live on half-integer
/// positions and would displace the force field by half a pixel, which
/// biases the registration along one diagonal.
pub fn update_phi(
    z: &DisplacementField,
    v: &TensorField,
    w: &ScalarField,
    u: &ScalarField,
    gamma1: f64,
    gamma2: f64,
    dt: f64,
) -> Result<DisplacementField> {
    let grad_w = gradient_centered(w);
    update_phi_with_gradient(z, v, w, &grad_w, u, gamma1, gamma2, dt)
}

/// Parameters of the fixed-point inversion.
#[derive(Debug, Clone, Copy)]
pub struct InversionParams {
    /// Convergence threshold on the max displacement update, in pixels.
    pub tolerance: f64,
    /// Iteration cap; the best iterate found so far is returned when hit.
    pub max_iterations: usize,
    /// Under-relaxation factor in `(0, 1]`. `1` is the plain fixed point,
    /// which requires a contractive displacement (`‖∇z‖ < 1`); `0.5`
    /// converges for any displacement whose deformation stays orientation
    /// preserving (`det(I+∇z) > 0` keeps the eigenvalues of `∇z` above
    /// `−1`, so the averaged iteration matrix `(1−α)I − α∇z` has spectral
    /// radius below one for `α ≤ 1/2`), at roughly half the speed.
    pub damping: f64,
}

impl Default for InversionParams {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            max_iterations: 50,
            damping: 1.0,
        }
    }
}

/// Result of a deformation inversion.
#[derive(Debug, Clone)]
pub struct Inversion {
    /// Displacement of the inverse map.
    pub displacement: DisplacementField,
    /// `max_p |phi(phi_inv(p)) - p|`, the forward-composition error.
    pub residual: f64,
    /// Fixed-point iterations performed.
    pub iterations: usize,
}

/// Inverts `phi = Id + z` by the (optionally under-relaxed) fixed-point
/// iteration `z_inv <- (1−α) z_inv − α z(p + z_inv(p))`. Errors if the
/// updates grow for ten consecutive iterations (the map is not a
/// contraction). Because samples outside the grid read as zero, iterates
/// stay bounded by `max |z|`, so a non-contractive map more often surfaces
/// as a large `residual` on an `Ok` result than as the growth error;
/// callers must check the residual.
pub fn invert(z: &DisplacementField, params: &InversionParams) -> Result<Inversion> {
    if !(params.damping > 0.0 && params.damping <= 1.0) {
        return Err(Error::param(
            "damping",
            "must lie in (0, 1]",
            params.damping,
        ));
    }
    let (w, h) = z.dims();
    let n = w * h;
    let alpha = params.damping;
    let mut inv = DisplacementField::zeros(w, h)?;
    let mut prev_update = f64::INFINITY;
    let mut growth_streak = 0usize;
    let mut iterations = 0usize;
    for it in 0..params.max_iterations {
        iterations = it + 1;
        let mut update = 0.0f64;
        let mut next_x = vec![0.0; n];
        let mut next_y = vec![0.0; n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let sx = x as f64 + inv.x.as_slice()[i];
                let sy = y as f64 + inv.y.as_slice()[i];
                // Clamped sampling extends the displacement continuously
                // past the grid edge; with the zero extension, border
                // pixels whose preimage falls outside the grid would have
                // no fixed point at all.
                let nx = (1.0 - alpha) * inv.x.as_slice()[i]
                    - alpha * sample_bilinear_clamped(&z.x, sx, sy);
                let ny = (1.0 - alpha) * inv.y.as_slice()[i]
                    - alpha * sample_bilinear_clamped(&z.y, sx, sy);
                update = update
                    .max((nx - inv.x.as_slice()[i]).hypot(ny - inv.y.as_slice()[i]));
                next_x[i] = nx;
                next_y[i] = ny;
            }
        }
        inv = DisplacementField {
            x: ScalarField::raw(w, h, next_x),
            y: ScalarField::raw(w, h, next_y),
        };
        if update > prev_update {
            growth_streak += 1;
            if growth_streak >= 10 {
                return Err(Error::InversionFailed {
                    iterations,
                    residual: update,
                });
            }
        } else {
            growth_streak = 0;
        }
        prev_update = update;
        if update < params.tolerance {
            break;
        }
    }
    // Forward-composition error of the returned iterate.
    let mut residual = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + inv.x.as_slice()[i];
            let sy = y as f64 + inv.y.as_slice()[i];
            let ex = inv.x.as_slice()[i] + sample_bilinear_clamped(&z.x, sx, sy);
            let ey = inv.y.as_slice()[i] + sample_bilinear_clamped(&z.y, sx, sy);
            residual = residual.max(ex.hypot(ey));
        }
    }
    Ok(Inversion {
        displacement: inv,
        residual,
        iterations,
    })
}

/// Displacement of `phi_outer . phi_inner` (apply `inner` first):
/// `z(p) = z_inner(p) + z_outer(p + z_inner(p))`, so that warping an image
/// by the composition equals warping by `outer` then by `inner`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    outer.check_same_dims(inner, "compose")?;
    let shifted = warp_vector(outer, inner)?;
    Ok(DisplacementField {
        x: ScalarField::raw(
            inner.width(),
            inner.height(),
            inner
                .x
                .as_slice()
                .iter()
                .zip(shifted.x.as_slice())
                .map(|(a, b)| a + b)
                .collect(),
        ),
        y: ScalarField::raw(
            inner.width(),
            inner.height(),
            inner
                .y
                .as_slice()
                .iter()
                .zip(shifted.y.as_slice())
                .map(|(a, b)| a + b)
                .collect(),
        ),
    })
}

/// Working displacement of one acquisition plus its regrid history.
#[derive(Debug, Clone)]
pub struct DeformationState {
    /// Displacement accumulated since the last regrid.
    pub current: DisplacementField,
    saved: Vec<DisplacementField>,
    regrid_count: usize,
}

impl DeformationState {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        Ok(Self {
            current: DisplacementField::zeros(width, height)?,
            saved: Vec::new(),
            regrid_count: 0,
        })
    }

    pub fn regrid_count(&self) -> usize {
        self.regrid_count
    }

    pub fn saved(&self) -> &[DisplacementField] {
        &self.saved
    }

    /// Smallest `det(I + grad z)` of the working displacement.
    pub fn min_current_det(&self) -> f64 {
        jacobian_determinant(&self.current).min()
    }

    /// Unconditional regrid: saves the working displacement, resamples `w`
    /// through it, and restarts the working displacement (and `v`) from
    /// identity. Used when a proposed flow step fails the determinant
    /// floor; the saved map is the last accepted, still-valid one.
    pub fn force_regrid(&mut self, v: &mut TensorField, w: &mut ScalarField) -> Result<()> {
        *w = warp(w, &self.current)?;
        *v = TensorField::zeros_like(w);
        self.saved.push(std::mem::replace(
            &mut self.current,
            DisplacementField::zeros(w.width(), w.height())?,
        ));
        self.regrid_count += 1;
        Ok(())
    }

    /// Regrids when the working displacement's determinant drops below
    /// `det_floor`; returns whether a regrid happened. The physical total
    /// deformation is unchanged by this representation switch.
    pub fn regrid_if_needed(
        &mut self,
        v: &mut TensorField,
        w: &mut ScalarField,
        det_floor: f64,
    ) -> Result<bool> {
        if self.min_current_det() < det_floor {
            self.force_regrid(v, w)?;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Composition of all saved maps with the working displacement:
    /// the full deformation for this acquisition.
    pub fn total_displacement(&self) -> Result<DisplacementField> {
        let mut acc: Option<DisplacementField> = None;
        for s in &self.saved {
            acc = Some(match acc {
                None => s.clone(),
                Some(a) => compose(&a, s)?,
            });
        }
        match acc {
            None => Ok(self.current.clone()),
            Some(a) => compose(&a, &self.current),
        }
    }

    /// Collapses the history into a single working displacement. Used at
    /// pyramid level transitions; if the collapsed map violates the
    /// determinant floor the next regrid check will split it again.
    pub fn fold_total(&mut self) -> Result<()> {
        self.current = self.total_displacement()?;
        self.saved.clear();
        Ok(())
    }

    /// Replaces the working displacement (e.g. with a prolongated one).
    pub fn set_current(&mut self, z: DisplacementField) -> Result<()> {
        self.current.check_same_dims(&z, "set_current")?;
        self.current = z;
        Ok(())
    }
}
