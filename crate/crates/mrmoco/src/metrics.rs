//! Quantitative evaluation: PSNR, histogram mutual information,
//! registration endpoint error, and signed difference maps.
//!
//! Mutual information is estimated from a joint histogram with per-image
//! min-max intensity normalization; the value therefore depends on the bin
//! count and on that normalization, both of which are fixed here (32 bins,
//! natural logarithm) so numbers are comparable across runs. The plug-in
//! estimate is non-negative up to rounding and equals the marginal entropy
//! when both arguments are the same image.

use crate::error::{Error, Result};
use crate::field::{DisplacementField, ScalarField};

/// Default histogram resolution for [`mutual_information`].
pub const MI_BINS: usize = 32;

/// Peak signal-to-noise ratio in dB, `10 log10(peak^2 / MSE)`.
/// Identical inputs give `+inf`.
pub fn psnr(a: &ScalarField, b: &ScalarField, peak: f64) -> Result<f64> {
    a.check_same_dims(b, "psnr")?;
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::param("peak", "must be positive and finite", peak));
    }
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Bin index of `v` under min-max normalization to `bins` cells.
fn bin_of(v: f64, min: f64, inv_range: f64, bins: usize) -> usize {
    (((v - min) * inv_range * bins as f64) as usize).min(bins - 1)
}

/// Histogram mutual information in nats.
///
/// Both images are min-max normalized to `bins` cells; empty joint cells
/// contribute nothing. Swapping the arguments gives the exact same value:
/// the sum is taken in a symmetric order (diagonal, then transposed pairs)
/// so rounding cannot break the symmetry.
pub fn mutual_information(a: &ScalarField, b: &ScalarField, bins: usize) -> Result<f64> {
    a.check_same_dims(b, "mutual_information")?;
    if bins < 2 {
        return Err(Error::param("bins", "must be at least 2", bins as f64));
    }
    let (a_min, a_max) = (a.min(), a.max());
    let (b_min, b_max) = (b.min(), b.max());
    if a_max <= a_min || b_max <= b_min {
        return Err(Error::DegenerateInput(
            "mutual information of a constant image is undefined (zero intensity range)",
        ));
    }
    let a_inv = 1.0 / (a_max - a_min);
    let b_inv = 1.0 / (b_max - b_min);
    let mut joint = vec![0u64; bins * bins];
    for (&av, &bv) in a.as_slice().iter().zip(b.as_slice()) {
        let i = bin_of(av, a_min, a_inv, bins);
        let j = bin_of(bv, b_min, b_inv, bins);
        joint[i * bins + j] += 1;
    }
    let mut row = vec![0u64; bins];
    let mut col = vec![0u64; bins];
    for i in 0..bins {
        for j in 0..bins {
            row[i] += joint[i * bins + j];
            col[j] += joint[i * bins + j];
        }
    }
    let n = a.len() as f64;
    let term = |i: usize, j: usize| -> f64 {
        let c = joint[i * bins + j];
        if c == 0 {
            return 0.0;
        }
        let p = c as f64 / n;
        let px = row[i] as f64 / n;
        let py = col[j] as f64 / n;
        p * (p / (px * py)).ln()
    };
    let mut mi = 0.0;
    for i in 0..bins {
        mi += term(i, i);
    }
    for i in 0..bins {
        for j in (i + 1)..bins {
            mi += term(i, j) + term(j, i);
        }
    }
    Ok(mi)
}

/// Mean and max per-pixel error of an estimated displacement field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndpointError {
    /// Mean Euclidean error over the evaluated interior, in pixels.
    pub mean: f64,
    /// Largest Euclidean error over the evaluated interior, in pixels.
    pub max: f64,
}

/// Euclidean distance between estimated and true displacements, evaluated
/// on the interior with `margin` pixels excluded on every side (boundary
/// estimates are dominated by the zero-displacement boundary condition).
pub fn endpoint_error(
    z_est: &DisplacementField,
    z_true: &DisplacementField,
    margin: usize,
) -> Result<EndpointError> {
    z_est.check_same_dims(z_true, "endpoint_error")?;
    let (w, h) = z_est.dims();
    if 2 * margin + 1 > w || 2 * margin + 1 > h {
        return Err(Error::param(
            "margin",
            "leaves no interior pixels",
            margin as f64,
        ));
    }
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut count = 0.0;
    for y in margin..h - margin {
        for x in margin..w - margin {
            let e = (z_est.x.get(x, y) - z_true.x.get(x, y))
                .hypot(z_est.y.get(x, y) - z_true.y.get(x, y));
            sum += e;
            max = max.max(e);
            count += 1.0;
        }
    }
    Ok(EndpointError {
        mean: sum / count,
        max,
    })
}

/// Signed difference `u - registered`; export it with the symmetric-range
/// 8-bit writer so zero maps to mid-gray.
pub fn difference_map(u: &ScalarField, registered: &ScalarField) -> Result<ScalarField> {
    u.check_same_dims(registered, "difference_map")?;
    Ok(ScalarField::raw(
        u.width(),
        u.height(),
        u.as_slice()
            .iter()
            .zip(registered.as_slice())
            .map(|(a, b)| a - b)
            .collect(),
    ))
}
