//! Edge-stopping weight maps for the weighted total-variation term.
//!
//! For one acquisition `x` the weight is computed from the smoothed gradient
//! magnitude of its image-domain view: `r = |grad(G_sigma * adjoint(x))|`,
//! then `g = max(floor, 1 / (1 + (r / lambda)^2))`, a smooth rational
//! edge-stopping function. Weights are 1 in flat regions and decay towards
//! `floor` across strong edges, so the TV denoiser smooths homogeneous areas
//! while preserving structural boundaries.
//!
//! When `lambda` is not given it is taken as the 90th percentile of `r`
//! over the image, which makes the weights invariant under global positive
//! intensity scaling.

use crate::calculus::{gaussian_blur, gradient};
use crate::error::{Error, Result};
use crate::field::{ComplexField, ScalarField};
use crate::fourier::FourierOp;

/// Parameters of the edge-stopping function.
#[derive(Debug, Clone, Copy)]
pub struct EdgeWeightParams {
    /// Standard deviation of the Gaussian presmoothing, in pixels.
    pub sigma: f64,
    /// Gradient-magnitude scale; `None` selects the 90th percentile of the
    /// observed magnitudes.
    pub lambda: Option<f64>,
    /// Lower clamp for the weights, in `(0, 1)`.
    pub floor: f64,
}

impl Default for EdgeWeightParams {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            lambda: None,
            floor: 0.01,
        }
    }
}

impl EdgeWeightParams {
    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::param("sigma", "must be positive", self.sigma));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::param("lambda", "must be positive", l));
            }
        }
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return Err(Error::param("floor", "must lie in (0, 1)", self.floor));
        }
        Ok(())
    }
}

/// Nearest-rank percentile (`q` in `[0, 1]`) of the values in `r`.
fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("weights are finite"));
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

/// Edge-stopping weight map for one k-space acquisition.
pub fn weight_map(op: &FourierOp, x: &ComplexField, params: &EdgeWeightParams) -> Result<ScalarField> {
    params.validate()?;
    let image = op.adjoint(x)?;
    weight_map_from_image(&image, params)
}

/// Edge-stopping weight map computed directly from an image-domain view.
pub fn weight_map_from_image(image: &ScalarField, params: &EdgeWeightParams) -> Result<ScalarField> {
    params.validate()?;
    let smoothed = gaussian_blur(image, params.sigma)?;
    let grad = gradient(&smoothed);
    let r: Vec<f64> = grad
        .x
        .as_slice()
        .iter()
        .zip(grad.y.as_slice())
        .map(|(&gx, &gy)| gx.hypot(gy))
        .collect();
    let lambda = match params.lambda {
        Some(l) => l,
        None => percentile(&r, 0.9),
    };
    let data = r
        .iter()
        .map(|&ri| {
            if ri == 0.0 {
                // Flat pixel: full weight regardless of the scale.
                1.0
            } else if lambda <= 0.0 {
                // Degenerate scale with a nonzero gradient: strongest edge.
                params.floor
            } else {
                let ratio = ri / lambda;
                (1.0 / (1.0 + ratio * ratio)).max(params.floor)
            }
        })
        .collect();
    let (w, h) = image.dims();
    Ok(ScalarField::raw(w, h, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(w: usize, h: usize) -> FourierOp {
        FourierOp::new(w, h).unwrap()
    }

    /// A sharp vertical step of the given height, in image space.
    fn step_image(w: usize, h: usize, amplitude: f64) -> ScalarField {
        ScalarField::from_fn(w, h, |x, _| if x >= w / 2 { amplitude } else { 0.0 }).unwrap()
    }

    #[test]
    fn constant_image_gives_unit_weights() {
        let o = op(16, 16);
        let img = ScalarField::from_fn(16, 16, |_, _| 2.5).unwrap();
        let x = o.forward(&img).unwrap();
        let g = weight_map(&o, &x, &EdgeWeightParams::default()).unwrap();
        for &v in g.as_slice() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn strong_edge_clamps_to_floor() {
        let o = op(32, 32);
        let x = o.forward(&step_image(32, 32, 1e6)).unwrap();
        let params = EdgeWeightParams {
            lambda: Some(1.0),
            ..EdgeWeightParams::default()
        };
        let g = weight_map(&o, &x, &params).unwrap();
        assert_eq!(g.min(), params.floor);
    }

    #[test]
    fn weights_dip_at_the_edge() {
        let o = op(32, 32);
        let x = o.forward(&step_image(32, 32, 1.0)).unwrap();
        let g = weight_map(&o, &x, &EdgeWeightParams::default()).unwrap();
        let at_edge = g.get(16, 16);
        let far_away = g.get(2, 16);
        assert!(
            at_edge < 0.5 * far_away,
            "edge weight {at_edge} not below far weight {far_away}"
        );
    }

    #[test]
    fn weights_stay_in_range_and_decrease_with_gradient() {
        let o = op(24, 24);
        let img = ScalarField::from_fn(24, 24, |x, y| ((x * x + 3 * y) % 17) as f64 * 0.1).unwrap();
        let x = o.forward(&img).unwrap();
        let params = EdgeWeightParams::default();
        let g = weight_map(&o, &x, &params).unwrap();
        for &v in g.as_slice() {
            assert!((params.floor..=1.0).contains(&v));
        }
        // Monotonicity of the stopping function itself.
        let f = |r: f64, l: f64| 1.0 / (1.0 + (r / l) * (r / l));
        let mut prev = f64::INFINITY;
        for i in 0..100 {
            let v = f(i as f64 * 0.1, 1.0);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn percentile_scale_makes_weights_intensity_invariant() {
        let o = op(24, 24);
        let img = ScalarField::from_fn(24, 24, |x, y| ((x * 5 + y * 3) % 13) as f64).unwrap();
        let scaled = img.map(|v| 37.5 * v);
        let g1 = weight_map(&o, &o.forward(&img).unwrap(), &EdgeWeightParams::default()).unwrap();
        let g2 = weight_map(&o, &o.forward(&scaled).unwrap(), &EdgeWeightParams::default()).unwrap();
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let o = op(8, 8);
        let x = ComplexField::zeros(8, 8).unwrap();
        for params in [
            EdgeWeightParams {
                sigma: 0.0,
                ..Default::default()
            },
            EdgeWeightParams {
                lambda: Some(-1.0),
                ..Default::default()
            },
            EdgeWeightParams {
                floor: 0.0,
                ..Default::default()
            },
            EdgeWeightParams {
                floor: 1.0,
                ..Default::default()
            },
        ] {
            assert!(weight_map(&o, &x, &params).is_err(), "{params:?}");
        }
    }
}
