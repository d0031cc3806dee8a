//! Discrete vector calculus on the pixel grid.
//!
//! Grid spacing is 1 in both directions. The gradient uses forward
//! differences in the interior and the one-sided (backward) difference on
//! the far boundary row/column; the divergence is defined as the exact
//! negative adjoint of that gradient, so
//! `<gradient(f), p> = -<f, divergence(p)>` holds to rounding error. The
//! dual-projection scheme for weighted total variation relies on this pair
//! being exactly adjoint.
//!
//! `warp` resamples a field through a displacement with bilinear
//! interpolation, treating everything outside the grid as zero.
//! `gaussian_blur` is a separable, renormalized kernel with mirrored
//! boundary handling.

use crate::error::Result;
use crate::field::{ScalarField, VectorField};

/// Forward-difference gradient of `f`; on the last column/row the backward
/// difference is used so every pixel carries a one-sided estimate.
pub fn gradient(f: &ScalarField) -> VectorField {
    let (w, h) = f.dims();
    let s = f.as_slice();
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        let row = y * w;
        for x in 0..w - 1 {
            gx[row + x] = s[row + x + 1] - s[row + x];
        }
        gx[row + w - 1] = s[row + w - 1] - s[row + w - 2];
    }
    for y in 0..h - 1 {
        let row = y * w;
        for x in 0..w {
            gy[row + x] = s[row + w + x] - s[row + x];
        }
    }
    let last = (h - 1) * w;
    for x in 0..w {
        gy[last + x] = s[last + x] - s[last - w + x];
    }
    VectorField {
        x: ScalarField::raw(w, h, gx),
        y: ScalarField::raw(w, h, gy),
    }
}

/// Central-difference gradient of `f`, one-sided on the border rows and
/// columns. Each entry estimates the derivative *at* its own pixel centre,
/// unlike [`gradient`] whose forward differences live on half-integer
/// positions. Use this wherever the gradient is read as a pointwise vector
/// at pixel positions (for instance as a registration force); keep
/// [`gradient`]/[`divergence`] for functional stencils that need the exact
/// adjoint pair.
pub fn gradient_centered(f: &ScalarField) -> VectorField {
    let (w, h) = f.dims();
    let s = f.as_slice();
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        let row = y * w;
        gx[row] = s[row + 1] - s[row];
        for x in 1..w - 1 {
            gx[row + x] = 0.5 * (s[row + x + 1] - s[row + x - 1]);
        }
        gx[row + w - 1] = s[row + w - 1] - s[row + w - 2];
    }
    for x in 0..w {
        gy[x] = s[w + x] - s[x];
        let last = (h - 1) * w;
        gy[last + x] = s[last + x] - s[last - w + x];
    }
    for y in 1..h - 1 {
        let row = y * w;
        for x in 0..w {
            gy[row + x] = 0.5 * (s[row + w + x] - s[row - w + x]);
        }
    }
    VectorField {
        x: ScalarField::raw(w, h, gx),
        y: ScalarField::raw(w, h, gy),
    }
}

/// Adds the 1-D negative-adjoint divergence of `p` along one axis into
/// `out`, where `get(i)` reads `p` and `add(j, v)` accumulates.
#[inline]
fn div_axis(n: usize, get: impl Fn(usize) -> f64, mut add: impl FnMut(usize, f64)) {
    add(0, get(0));
    for j in 1..=n - 3 {
        add(j, get(j) - get(j - 1));
    }
    add(n - 2, get(n - 2) + get(n - 1) - get(n - 3));
    add(n - 1, -get(n - 2) - get(n - 1));
}

/// Negative adjoint of [`gradient`]: backward differences in the interior
/// with boundary terms chosen so the adjoint identity is exact.
pub fn divergence(p: &VectorField) -> ScalarField {
    let (w, h) = p.dims();
    let px = p.x.as_slice();
    let py = p.y.as_slice();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = y * w;
        div_axis(w, |i| px[row + i], |j, v| out[row + j] += v);
    }
    for x in 0..w {
        div_axis(h, |i| py[i * w + x], |j, v| out[j * w + x] += v);
    }
    ScalarField::raw(w, h, out)
}

/// Bilinear sample of `f` at real coordinates `(sx, sy)`; samples outside
/// the grid contribute zero.
#[inline]
pub(crate) fn sample_bilinear(f: &ScalarField, sx: f64, sy: f64) -> f64 {
    let (w, h) = f.dims();
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let x0 = x0 as i64;
    let y0 = y0 as i64;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        let yy = y0 + dy;
        if yy < 0 || yy >= h as i64 {
            continue;
        }
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let xx = x0 + dx;
            if xx < 0 || xx >= w as i64 {
                continue;
            }
            acc += wx * wy * f.as_slice()[yy as usize * w + xx as usize];
        }
    }
    acc
}

/// Like [`sample_bilinear`] but with the query point clamped to the node
/// rectangle, so the field extends continuously with its edge values
/// instead of dropping to zero. Root-finding on displacement fields needs
/// this extension: under the zero extension a point whose preimage lies
/// outside the grid has no solution at all, while the clamped map stays
/// continuous and (being the identity plus a bounded displacement far out)
/// still reaches every target point.
pub(crate) fn sample_bilinear_clamped(f: &ScalarField, sx: f64, sy: f64) -> f64 {
    let (w, h) = f.dims();
    let cx = sx.clamp(0.0, (w - 1) as f64);
    let cy = sy.clamp(0.0, (h - 1) as f64);
    sample_bilinear(f, cx, cy)
}

/// Resamples `f` through the displacement `z`: `out(p) = f(p + z(p))` with
/// bilinear interpolation and zero outside the grid.
pub fn warp(f: &ScalarField, z: &VectorField) -> Result<ScalarField> {
    f.check_same_dims(&z.x, "warp field vs displacement")?;
    let (w, h) = f.dims();
    let zx = z.x.as_slice();
    let zy = z.y.as_slice();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out[i] = sample_bilinear(f, x as f64 + zx[i], y as f64 + zy[i]);
        }
    }
    Ok(ScalarField::raw(w, h, out))
}

/// Warps both components of a vector field (see [`warp`]).
pub fn warp_vector(v: &VectorField, z: &VectorField) -> Result<VectorField> {
    Ok(VectorField {
        x: warp(&v.x, z)?,
        y: warp(&v.y, z)?,
    })
}

/// Reflects an index into `[0, n)` (mirror at the half-sample boundary).
#[inline]
fn reflect(mut i: i64, n: i64) -> usize {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Normalized 1-D Gaussian taps for standard deviation `sigma`, truncated
/// at radius `ceil(3 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian blur with mirrored boundary handling. `sigma` must be
/// positive and finite.
pub fn gaussian_blur(f: &ScalarField, sigma: f64) -> Result<ScalarField> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(crate::error::Error::param(
            "sigma",
            "must be positive and finite",
            sigma,
        ));
    }
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as i64;
    let (w, h) = f.dims();
    let src = f.as_slice();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = y * w;
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xi = reflect(x as i64 + k as i64 - radius, w as i64);
                acc += t * src[row + xi];
            }
            tmp[row + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yi = reflect(y as i64 + k as i64 - radius, h as i64);
                acc += t * tmp[yi * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Ok(ScalarField::raw(w, h, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::DisplacementField;
    use proptest::prelude::*;

    fn inner_product(a: &ScalarField, b: &ScalarField) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(&x, &y)| x * y)
            .sum()
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let f = ScalarField::from_fn(7, 5, |_, _| 3.25).unwrap();
        let g = gradient(&f);
        assert!(g.x.max_abs() == 0.0 && g.y.max_abs() == 0.0);
    }

    #[test]
    fn gradient_of_ramp_is_unit() {
        let f = ScalarField::from_fn(8, 6, |x, _| x as f64).unwrap();
        let g = gradient(&f);
        for y in 1..5 {
            for x in 1..7 {
                assert_eq!(g.x.get(x, y), 1.0);
                assert_eq!(g.y.get(x, y), 0.0);
            }
        }
    }

    #[test]
    fn gradient_matches_direct_differences() {
        let f = ScalarField::from_fn(5, 5, |x, y| ((x * 3 + y * 7) % 11) as f64 * 0.5).unwrap();
        let g = gradient(&f);
        for y in 0..5 {
            for x in 0..5 {
                let ex = if x < 4 {
                    f.get(x + 1, y) - f.get(x, y)
                } else {
                    f.get(4, y) - f.get(3, y)
                };
                let ey = if y < 4 {
                    f.get(x, y + 1) - f.get(x, y)
                } else {
                    f.get(x, 4) - f.get(x, 3)
                };
                assert_eq!(g.x.get(x, y), ex);
                assert_eq!(g.y.get(x, y), ey);
            }
        }
    }

    #[test]
    fn divergence_of_zero_is_zero() {
        let p = VectorField::zeros(6, 9).unwrap();
        assert_eq!(divergence(&p).max_abs(), 0.0);
    }

    #[test]
    fn divergence_of_identity_position_field_is_two_inside() {
        let px = ScalarField::from_fn(9, 9, |x, _| x as f64).unwrap();
        let py = ScalarField::from_fn(9, 9, |_, y| y as f64).unwrap();
        let div = divergence(&VectorField::new(px, py).unwrap());
        for y in 1..6 {
            for x in 1..6 {
                assert!((div.get(x, y) - 2.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn warp_with_zero_displacement_is_identity() {
        let f = ScalarField::from_fn(6, 6, |x, y| (x * y) as f64 + 0.25).unwrap();
        let z = DisplacementField::zeros(6, 6).unwrap();
        let out = warp(&f, &z).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn warp_translates_interior_impulse() {
        let mut f = ScalarField::zeros(9, 9).unwrap();
        f.set(4, 4, 1.0);
        let zx = ScalarField::from_fn(9, 9, |_, _| 2.0).unwrap();
        let zy = ScalarField::from_fn(9, 9, |_, _| -1.0).unwrap();
        let out = warp(&f, &VectorField::new(zx, zy).unwrap()).unwrap();
        // out(p) = f(p + (2,-1)) puts the impulse at p = (2, 5).
        assert_eq!(out.get(2, 5), 1.0);
        assert_eq!(out.norm_sq(), 1.0);
    }

    #[test]
    fn warp_half_pixel_shift_is_exact_on_linear_ramp() {
        let f = ScalarField::from_fn(10, 6, |x, _| x as f64).unwrap();
        let zx = ScalarField::from_fn(10, 6, |_, _| 0.5).unwrap();
        let zy = ScalarField::zeros(10, 6).unwrap();
        let out = warp(&f, &VectorField::new(zx, zy).unwrap()).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                assert!((out.get(x, y) - (x as f64 + 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_preserves_constant() {
        let f = ScalarField::from_fn(12, 12, |_, _| 4.0).unwrap();
        let out = gaussian_blur(&f, 1.5).unwrap();
        for &v in out.as_slice() {
            assert!((v - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_impulse_matches_kernel() {
        let n = 33;
        let mut f = ScalarField::zeros(n, n).unwrap();
        f.set(16, 16, 1.0);
        let sigma = 2.0;
        let out = gaussian_blur(&f, sigma).unwrap();
        let taps = gaussian_kernel(sigma);
        let radius = taps.len() / 2;
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                let expected =
                    taps[(dx + radius as i64) as usize] * taps[(dy + radius as i64) as usize];
                let got = out.get((16 + dx) as usize, (16 + dy) as usize);
                assert!(
                    (got - expected).abs() < 1e-12,
                    "taps mismatch at ({dx},{dy}): {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn blur_keeps_symmetry() {
        let n = 17;
        let f = ScalarField::from_fn(n, n, |x, y| {
            let dx = x as f64 - 8.0;
            let dy = y as f64 - 8.0;
            (-(dx * dx + dy * dy) / 10.0).exp()
        })
        .unwrap();
        let out = gaussian_blur(&f, 1.0).unwrap();
        for y in 0..n {
            for x in 0..n {
                let mirrored = out.get(n - 1 - x, n - 1 - y);
                assert!((out.get(x, y) - mirrored).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_rejects_bad_sigma() {
        let f = ScalarField::zeros(8, 8).unwrap();
        assert!(gaussian_blur(&f, 0.0).is_err());
        assert!(gaussian_blur(&f, -1.0).is_err());
        assert!(gaussian_blur(&f, f64::NAN).is_err());
    }

    prop_compose! {
        fn arb_field(max: usize)(w in 4..max, h in 4..max)
            (w in Just(w), h in Just(h),
             data in proptest::collection::vec(-100.0f64..100.0, w * h))
            -> ScalarField {
            ScalarField::from_vec(w, h, data).unwrap()
        }
    }

    proptest! {
        #[test]
        fn adjoint_identity(f in arb_field(10), px in arb_field(10), py in arb_field(10)) {
            // Restrict to a common grid by resampling sizes.
            let (w, h) = f.dims();
            let clip = |s: &ScalarField| {
                ScalarField::from_fn(w, h, |x, y| {
                    s.get(x % s.width(), y % s.height())
                }).unwrap()
            };
            let p = VectorField::new(clip(&px), clip(&py)).unwrap();
            let g = gradient(&f);
            let lhs = inner_product(&g.x, &p.x) + inner_product(&g.y, &p.y);
            let rhs = -inner_product(&f, &divergence(&p));
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()),
                "adjoint identity violated: {lhs} vs {rhs}");
        }

        #[test]
        fn warp_never_exceeds_input_magnitude(
            f in arb_field(9),
            shift in proptest::collection::vec(-5.0f64..5.0, 2),
        ) {
            let (w, h) = f.dims();
            let zx = ScalarField::from_fn(w, h, |_, _| shift[0]).unwrap();
            let zy = ScalarField::from_fn(w, h, |_, _| shift[1]).unwrap();
            let out = warp(&f, &VectorField::new(zx, zy).unwrap()).unwrap();
            prop_assert!(out.max_abs() <= f.max_abs() * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn constructor_rejects_non_finite(
            w in 4usize..8, h in 4usize..8, idx in 0usize..16,
        ) {
            let mut data = vec![1.0; w * h];
            data[idx % (w * h)] = f64::NAN;
            prop_assert!(ScalarField::from_vec(w, h, data).is_err());
        }
    }

    #[test]
    fn blur_mean_preserved_on_large_grid() {
        let f = ScalarField::from_fn(32, 32, |x, y| {
            1.0 + 0.5 * ((x as f64 * 0.7).sin() + (y as f64 * 0.3).cos())
        })
        .unwrap();
        for sigma in [0.5, 1.0, 2.0] {
            let out = gaussian_blur(&f, sigma).unwrap();
            let rel = (out.mean() - f.mean()).abs() / f.mean().abs();
            assert!(rel < 1e-3, "mean drift {rel} at sigma {sigma}");
        }
    }
}
