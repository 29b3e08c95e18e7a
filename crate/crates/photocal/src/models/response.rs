//! Parametric camera response: a basis combination evaluated through an
//! optional input-exponent warp, so gauge transforms stay exact.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::models::basis::{sample_cells, sample_curve, ResponseBasis, BASIS_SAMPLES, RESPONSE_COEFFS};
use crate::scalar::Scalar;

/// Camera response `f(x) = f0(x^a) + sum_k c_k h_k(x^a)` mapping normalized
/// accumulated irradiance in [0, 1] to output intensity in [0, 255].
///
/// The warp exponent `a` is 1 for freshly constructed models; it changes only
/// under the exponential-ambiguity transform `f(x) -> f(x^(1/gamma))`, which
/// must leave residuals untouched and therefore cannot go through resampling.
#[derive(Debug, Clone)]
pub struct ResponseModel<S: Scalar> {
    basis: Arc<ResponseBasis<S>>,
    coeffs: [S; RESPONSE_COEFFS],
    input_exponent: S,
}

impl<S: Scalar> ResponseModel<S> {
    pub fn new(basis: Arc<ResponseBasis<S>>, coeffs: [S; RESPONSE_COEFFS]) -> Result<Self> {
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Response("non-finite coefficient".into()));
        }
        Ok(ResponseModel {
            basis,
            coeffs,
            input_exponent: S::one(),
        })
    }

    /// Response with all coefficients zero (the basis mean curve).
    pub fn unit(basis: Arc<ResponseBasis<S>>) -> Self {
        ResponseModel {
            basis,
            coeffs: [S::zero(); RESPONSE_COEFFS],
            input_exponent: S::one(),
        }
    }

    /// Fixed sampled curve (zero correction span), e.g. synthetic ground truth.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        let basis = ResponseBasis::from_curve(samples)?;
        Ok(Self::unit(Arc::new(basis)))
    }

    pub fn basis(&self) -> &Arc<ResponseBasis<S>> {
        &self.basis
    }

    pub fn coeffs(&self) -> [S; RESPONSE_COEFFS] {
        self.coeffs
    }

    pub fn input_exponent(&self) -> S {
        self.input_exponent
    }

    pub fn with_coeffs(&self, coeffs: [S; RESPONSE_COEFFS]) -> Result<Self> {
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Response("non-finite coefficient".into()));
        }
        Ok(ResponseModel {
            basis: Arc::clone(&self.basis),
            coeffs,
            input_exponent: self.input_exponent,
        })
    }

    #[inline]
    fn warp(&self, x: S) -> S {
        let x = x.clamp(S::zero(), S::one());
        if self.input_exponent == S::one() {
            x
        } else {
            x.powf(self.input_exponent)
        }
    }

    /// Output intensity at `x`, clamping `x` into [0, 1].
    pub fn eval(&self, x: S) -> S {
        self.eval_flagged(x).0
    }

    /// Like [`eval`](Self::eval) but also reports whether `x` was clamped.
    pub fn eval_flagged(&self, x: S) -> (S, bool) {
        let clamped = !(x >= S::zero() && x <= S::one());
        let y = self.warp(x);
        let mut v = sample_curve(self.basis.f0(), y);
        for k in 0..RESPONSE_COEFFS {
            if self.coeffs[k] != S::zero() {
                v += self.coeffs[k] * sample_curve(self.basis.h(k), y);
            }
        }
        (v, clamped)
    }

    /// Derivative of the response at interior `x`: the exact slope of the
    /// piecewise-linear interpolant, from the cached per-cell slope grids.
    pub fn derivative(&self, x: S) -> S {
        let x = x.clamp(S::cast(1e-12), S::one());
        let y = self.warp(x);
        let mut d = sample_cells(self.basis.df0(), y);
        for k in 0..RESPONSE_COEFFS {
            if self.coeffs[k] != S::zero() {
                d += self.coeffs[k] * sample_cells(self.basis.dh(k), y);
            }
        }
        if self.input_exponent == S::one() {
            d
        } else {
            d * self.input_exponent * x.powf(self.input_exponent - S::one())
        }
    }

    /// Value and derivative together; the optimizer hot path.
    pub fn eval_and_derivative(&self, x: S) -> (S, S) {
        (self.eval(x), self.derivative(x))
    }

    /// Basis curve values at the warped input: the gradient of `eval` with
    /// respect to the coefficients.
    pub fn coeff_gradient(&self, x: S) -> [S; RESPONSE_COEFFS] {
        let y = self.warp(x);
        std::array::from_fn(|k| sample_curve(self.basis.h(k), y))
    }

    /// Combined curve on the native sample grid (in warped input space).
    pub fn grid_samples(&self) -> Vec<S> {
        let mut out = self.basis.f0().to_vec();
        for k in 0..RESPONSE_COEFFS {
            let c = self.coeffs[k];
            if c != S::zero() {
                for (o, &hv) in out.iter_mut().zip(self.basis.h(k)) {
                    *o += c * hv;
                }
            }
        }
        out
    }

    /// True when the combined curve is strictly increasing on the sample grid.
    pub fn is_monotone(&self) -> bool {
        self.grid_samples().windows(2).all(|w| w[1] > w[0])
    }

    /// Error naming the first grid interval violating monotonicity.
    pub fn ensure_monotone(&self) -> Result<()> {
        let samples = self.grid_samples();
        for (i, w) in samples.windows(2).enumerate() {
            if w[1] <= w[0] {
                let step = 1.0 / (BASIS_SAMPLES - 1) as f64;
                let y0 = i as f64 * step;
                let y1 = (i + 1) as f64 * step;
                let inv = S::one() / self.input_exponent;
                return Err(Error::NonMonotone {
                    x0: S::cast(y0).powf(inv).to_f64_lossy(),
                    x1: S::cast(y1).powf(inv).to_f64_lossy(),
                });
            }
        }
        Ok(())
    }

    /// Solve `f(x) = target` on the sample grid of a monotone model.
    fn solve_for(&self, samples: &[S], target: S) -> S {
        let n = samples.len();
        if target <= samples[0] {
            return S::zero();
        }
        if target >= samples[n - 1] {
            return S::one();
        }
        // Binary search for the bracketing cell, then solve the linear segment.
        let (mut lo, mut hi) = (0usize, n - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if samples[mid] <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let frac = (target - samples[lo]) / (samples[lo + 1] - samples[lo]);
        let y = (S::cast(lo as f64) + frac) / S::cast((n - 1) as f64);
        if self.input_exponent == S::one() {
            y
        } else {
            y.powf(S::one() / self.input_exponent)
        }
    }

    /// 256-entry inverse table: entry `k` is the `x` with `f(x) = k`.
    pub fn invert(&self) -> Result<Vec<S>> {
        self.ensure_monotone()?;
        let samples = self.grid_samples();
        Ok((0..256)
            .map(|k| self.solve_for(&samples, S::cast(k as f64)))
            .collect())
    }

    /// Gauge exponent anchoring the response through `f(0.5) = 127.5`:
    /// `gamma = ln(0.5) / ln(x*)` with `f(x*) = 127.5`.
    pub fn anchor_gamma(&self) -> Result<S> {
        self.ensure_monotone()?;
        let samples = self.grid_samples();
        let x_star = self.solve_for(&samples, S::cast(127.5));
        if x_star <= S::zero() || x_star >= S::one() {
            return Err(Error::Response(
                "response never crosses 127.5 strictly inside (0, 1)".into(),
            ));
        }
        Ok(S::cast(0.5f64.ln()) / x_star.ln())
    }

    /// Exponential-ambiguity transform `f(x) -> f(x^(1/gamma))`, exact.
    pub fn gamma_transformed(&self, gamma: S) -> Result<Self> {
        if !(gamma > S::zero()) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gamma must be positive, got {}",
                gamma.to_f64_lossy()
            )));
        }
        let mut out = self.clone();
        if gamma != S::one() {
            out.input_exponent = self.input_exponent / gamma;
        }
        Ok(out)
    }

    /// Forward lookup table sampled at `k/255`, `k = 0..=255`.
    pub fn sampled_lut(&self) -> Vec<S> {
        (0..256)
            .map(|k| self.eval(S::cast(k as f64 / 255.0)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fallback() -> Arc<ResponseBasis<f64>> {
        Arc::new(ResponseBasis::analytic_fallback())
    }

    fn gamma_curve(exponent: f64) -> Vec<f64> {
        (0..BASIS_SAMPLES)
            .map(|i| 255.0 * (i as f64 / (BASIS_SAMPLES - 1) as f64).powf(exponent))
            .collect()
    }

    #[test]
    fn endpoints_pinned_for_any_coeffs() {
        let basis = fallback();
        for coeffs in [
            [0.0; 4],
            [1.0, -0.5, 0.25, 2.0],
            [-3.0, 1.5, -0.7, 0.1],
            [10.0, 10.0, 10.0, 10.0],
        ] {
            let m = ResponseModel::new(Arc::clone(&basis), coeffs).unwrap();
            assert_eq!(m.eval(0.0), 0.0);
            assert_eq!(m.eval(1.0), 255.0);
        }
    }

    #[test]
    fn unit_fallback_is_identity_ramp() {
        let m = ResponseModel::unit(fallback());
        assert_relative_eq!(m.eval(0.5), 127.5, max_relative = 1e-12);
        assert_relative_eq!(m.eval(0.25), 63.75, max_relative = 1e-12);
        // Linear response: derivative is 255 everywhere.
        for x in [0.1, 0.3, 0.5, 0.7, 0.9] {
            assert_relative_eq!(m.derivative(x), 255.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn eval_clamps_and_flags() {
        let m = ResponseModel::unit(fallback());
        let (v, clamped) = m.eval_flagged(1.5);
        assert_eq!(v, 255.0);
        assert!(clamped);
        let (v, clamped) = m.eval_flagged(-0.2);
        assert_eq!(v, 0.0);
        assert!(clamped);
        assert!(!m.eval_flagged(0.3).1);
    }

    #[test]
    fn nan_coefficients_rejected() {
        let err = ResponseModel::new(fallback(), [f64::NAN, 0.0, 0.0, 0.0]);
        assert!(err.is_err());
    }

    #[test]
    fn derivative_matches_central_differences() {
        // Mid-cell evaluation away from grid kinks.
        let m = ResponseModel::new(fallback(), [1.3, -0.8, 0.45, -0.2]).unwrap();
        let h = 1e-5;
        let cells = (BASIS_SAMPLES - 1) as f64;
        for i in 1..=9 {
            let x = ((i as f64 * 0.1 * cells).floor() + 0.5) / cells;
            let fd = (m.eval(x + h) - m.eval(x - h)) / (2.0 * h);
            let an = m.derivative(x);
            assert_relative_eq!(an, fd, max_relative = 1e-4);
        }
    }

    #[test]
    fn invert_linear() {
        let m = ResponseModel::unit(fallback());
        let inv = m.invert().unwrap();
        for (k, &x) in inv.iter().enumerate() {
            assert_relative_eq!(x, k as f64 / 255.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn invert_sqrt_curve() {
        // f(x) = 255 sqrt(x): inverse of level 64 is (64/255)^2.
        let m: ResponseModel<f64> = ResponseModel::from_samples(&gamma_curve(0.5)).unwrap();
        let inv = m.invert().unwrap();
        assert_relative_eq!(inv[64], (64.0f64 / 255.0).powi(2), epsilon = 1e-4);
        // Round trip within half an intensity level.
        for (k, &x) in inv.iter().enumerate() {
            assert!((m.eval(x) - k as f64).abs() < 0.5, "level {k}");
        }
    }

    #[test]
    fn invert_rejects_non_monotone() {
        // A strongly negative first coefficient bends the ramp downwards.
        let m = ResponseModel::new(fallback(), [-12.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(!m.is_monotone());
        assert!(matches!(m.invert(), Err(Error::NonMonotone { .. })));
    }

    #[test]
    fn anchor_gamma_closed_forms() {
        let linear = ResponseModel::unit(fallback());
        assert_relative_eq!(linear.anchor_gamma().unwrap(), 1.0, epsilon = 1e-6);

        let square: ResponseModel<f64> =
            ResponseModel::from_samples(&gamma_curve(2.0)).unwrap();
        assert_relative_eq!(square.anchor_gamma().unwrap(), 2.0, epsilon = 1e-4);

        let sqrt: ResponseModel<f64> = ResponseModel::from_samples(&gamma_curve(0.5)).unwrap();
        assert_relative_eq!(sqrt.anchor_gamma().unwrap(), 0.5, epsilon = 1e-4);
    }

    #[test]
    fn gamma_transform_composes_exactly() {
        let m: ResponseModel<f64> = ResponseModel::from_samples(&gamma_curve(2.0)).unwrap();
        let t = m.gamma_transformed(2.0).unwrap();
        // f(x^(1/2)) of the square curve is the identity ramp.
        for x in [0.05, 0.3, 0.5, 0.77, 0.99] {
            assert_relative_eq!(t.eval(x), 255.0 * x, epsilon = 1e-3);
        }
        assert!(m.gamma_transformed(0.0).is_err());
        assert!(m.gamma_transformed(-1.0).is_err());
    }

    #[test]
    fn mid_basis_sample_matches_interpolation() {
        // With zero coefficients the model reproduces f0; check an off-grid
        // point against direct interpolation of the published samples.
        let basis = fallback();
        let m = ResponseModel::unit(Arc::clone(&basis));
        let x = 0.5 + 0.3 / (BASIS_SAMPLES - 1) as f64;
        let t = x * (BASIS_SAMPLES - 1) as f64;
        let i = t.floor() as usize;
        let frac = t - i as f64;
        let expect = basis.f0()[i] + frac * (basis.f0()[i + 1] - basis.f0()[i]);
        assert_relative_eq!(m.eval(x), expect, epsilon = 1e-12);
    }
}
