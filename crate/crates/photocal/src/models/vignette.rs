//! Radially symmetric vignette: an even sixth-order polynomial in the
//! normalized radius, with an optional gauge exponent.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `V(x) = (1 + v1 R^2 + v2 R^4 + v3 R^6)^g` with `R` the pixel radius
/// normalized by `r_norm` (center-to-corner distance), `g = 1` unless the
/// model went through a gauge transform.
#[derive(Debug, Clone)]
pub struct VignetteModel<S: Scalar> {
    coeffs: [S; 3],
    r_norm: S,
    exponent: S,
}

impl<S: Scalar> VignetteModel<S> {
    pub fn new(coeffs: [S; 3], r_norm: S) -> Self {
        assert!(r_norm > S::zero(), "r_norm must be positive");
        VignetteModel {
            coeffs,
            r_norm,
            exponent: S::one(),
        }
    }

    /// Flat vignette, `V = 1` everywhere.
    pub fn flat(r_norm: S) -> Self {
        Self::new([S::zero(); 3], r_norm)
    }

    /// Normalizer for a given frame geometry: center-to-corner distance.
    pub fn for_frame(coeffs: [S; 3], width: usize, height: usize) -> Self {
        Self::new(coeffs, crate::image::corner_radius(width, height))
    }

    pub fn coeffs(&self) -> [S; 3] {
        self.coeffs
    }

    pub fn r_norm(&self) -> S {
        self.r_norm
    }

    pub fn exponent(&self) -> S {
        self.exponent
    }

    pub fn with_coeffs(&self, coeffs: [S; 3]) -> Self {
        VignetteModel {
            coeffs,
            r_norm: self.r_norm,
            exponent: self.exponent,
        }
    }

    /// Raw polynomial at squared normalized radius.
    #[inline]
    pub fn poly_r2(&self, r2: S) -> S {
        S::one() + r2 * (self.coeffs[0] + r2 * (self.coeffs[1] + r2 * self.coeffs[2]))
    }

    /// Vignette factor at squared normalized radius; the optimizer keeps the
    /// polynomial well above zero so the gauge power stays defined.
    #[inline]
    pub fn eval_r2(&self, r2: S) -> S {
        let p = self.poly_r2(r2);
        if self.exponent == S::one() {
            p
        } else {
            p.max(S::cast(1e-9)).powf(self.exponent)
        }
    }

    /// Vignette factor at normalized radius in [0, 1].
    #[inline]
    pub fn eval_radius(&self, r: S) -> S {
        self.eval_r2(r * r)
    }

    /// Vignette factor at pixel coordinates, given the image center.
    pub fn eval_at(&self, x: S, y: S, cx: S, cy: S) -> S {
        let dx = x - cx;
        let dy = y - cy;
        let r2 = (dx * dx + dy * dy) / (self.r_norm * self.r_norm);
        self.eval_r2(r2)
    }

    /// Squared normalized radius of a pixel.
    #[inline]
    pub fn normalized_r2(&self, x: S, y: S, cx: S, cy: S) -> S {
        let dx = x - cx;
        let dy = y - cy;
        (dx * dx + dy * dy) / (self.r_norm * self.r_norm)
    }

    /// Minimum and maximum of `V` over a uniform grid of R in [0, 1].
    pub fn extrema_on_grid(&self, samples: usize) -> (S, S) {
        let mut lo = self.eval_r2(S::zero());
        let mut hi = lo;
        for i in 1..samples {
            let r = S::cast(i as f64 / (samples - 1) as f64);
            let v = self.eval_r2(r * r);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Exponential-ambiguity transform `V -> V^gamma`, exact.
    pub fn gamma_transformed(&self, gamma: S) -> Result<Self> {
        if !(gamma > S::zero()) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gamma must be positive, got {}",
                gamma.to_f64_lossy()
            )));
        }
        let mut out = self.clone();
        out.exponent = self.exponent * gamma;
        Ok(out)
    }

    /// Least-squares polynomial coefficients reproducing this model's values
    /// over a 256-point radius grid, collapsing any gauge exponent.
    pub fn refit_coeffs(&self) -> [S; 3] {
        if self.exponent == S::one() {
            return self.coeffs;
        }
        let n = 256;
        let mut ata = nalgebra::Matrix3::<S>::zeros();
        let mut atb = nalgebra::Vector3::<S>::zeros();
        for i in 0..n {
            let r = S::cast(i as f64 / (n - 1) as f64);
            let r2 = r * r;
            let basis = nalgebra::Vector3::new(r2, r2 * r2, r2 * r2 * r2);
            let target = self.eval_r2(r2) - S::one();
            ata += basis * basis.transpose();
            atb += basis * target;
        }
        match ata.cholesky() {
            Some(ch) => {
                let v = ch.solve(&atb);
                [v[0], v[1], v[2]]
            }
            None => self.coeffs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn center_is_one_for_any_coeffs() {
        for coeffs in [[0.0; 3], [-0.3, -0.1, -0.05], [0.2, -0.4, 0.1]] {
            let v = VignetteModel::new(coeffs, 200.0);
            assert_eq!(v.eval_r2(0.0), 1.0);
            let g = v.gamma_transformed(2.5).unwrap();
            assert_eq!(g.eval_r2(0.0), 1.0);
        }
    }

    #[test]
    fn polynomial_values() {
        let v = VignetteModel::new([-0.3, 0.0, 0.0], 1.0);
        assert_relative_eq!(v.eval_radius(1.0), 0.7, epsilon = 1e-12);

        // Hand evaluation at R = 0.5.
        let v = VignetteModel::new([-0.1, -0.05, -0.02], 1.0);
        assert_relative_eq!(v.eval_radius(0.5), 0.9715625, epsilon = 1e-12);
    }

    #[test]
    fn pixel_radius_normalization() {
        let v = VignetteModel::for_frame([-0.5, 0.0, 0.0], 320, 240);
        // Exact image center.
        assert_relative_eq!(v.eval_at(159.5, 119.5, 159.5, 119.5), 1.0);
        // Far corner sits at normalized radius 1.
        assert_relative_eq!(v.eval_at(0.0, 0.0, 159.5, 119.5), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gamma_then_refit_recovers_values() {
        let v = VignetteModel::new([-0.3, -0.1, -0.05], 1.0);
        let g = v.gamma_transformed(1.4).unwrap();
        let refit = VignetteModel::new(g.refit_coeffs(), 1.0);
        for i in 0..=20 {
            let r = i as f64 / 20.0;
            assert_relative_eq!(refit.eval_radius(r), g.eval_radius(r), epsilon = 2e-3);
        }
    }
}
