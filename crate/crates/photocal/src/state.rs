//! Full unknown vector of the joint calibration problem.

use crate::error::{Error, Result};
use crate::models::{ResponseModel, VignetteModel};
use crate::scalar::Scalar;

/// Response, vignette, per-frame exposures and per-point patch radiances.
///
/// Radiances are stored per scene point and per patch pixel, parallel to the
/// track database the state was built against.
#[derive(Debug, Clone)]
pub struct CalibrationState<S: Scalar> {
    pub response: ResponseModel<S>,
    pub vignette: VignetteModel<S>,
    pub exposures: Vec<S>,
    pub radiances: Vec<Vec<S>>,
}

impl<S: Scalar> CalibrationState<S> {
    pub fn new(
        response: ResponseModel<S>,
        vignette: VignetteModel<S>,
        exposures: Vec<S>,
        radiances: Vec<Vec<S>>,
    ) -> Result<Self> {
        if exposures.iter().any(|e| !(*e > S::zero())) {
            return Err(Error::InvalidParameter(
                "exposures must be strictly positive".into(),
            ));
        }
        Ok(CalibrationState {
            response,
            vignette,
            exposures,
            radiances,
        })
    }

    /// Exponential-ambiguity transform with exponent `gamma`:
    /// `f(x) -> f(x^(1/gamma))`, `V -> V^gamma`, `e -> e^gamma`, `L -> L^gamma`.
    /// Leaves every residual of the joint energy unchanged.
    pub fn gamma_transformed(&self, gamma: S) -> Result<Self> {
        if !(gamma > S::zero()) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gamma must be positive, got {}",
                gamma.to_f64_lossy()
            )));
        }
        if gamma == S::one() {
            return Ok(self.clone());
        }
        Ok(CalibrationState {
            response: self.response.gamma_transformed(gamma)?,
            vignette: self.vignette.gamma_transformed(gamma)?,
            exposures: self.exposures.iter().map(|e| e.powf(gamma)).collect(),
            radiances: self
                .radiances
                .iter()
                .map(|pt| pt.iter().map(|l| l.powf(gamma)).collect())
                .collect(),
        })
    }

    /// Scale-ambiguity transform: `e -> s e`, `L -> L / s`. Leaves every
    /// residual unchanged.
    pub fn exposure_scaled(&self, s: S) -> Result<Self> {
        if !(s > S::zero()) || !s.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "scale must be positive, got {}",
                s.to_f64_lossy()
            )));
        }
        Ok(CalibrationState {
            response: self.response.clone(),
            vignette: self.vignette.clone(),
            exposures: self.exposures.iter().map(|e| *e * s).collect(),
            radiances: self
                .radiances
                .iter()
                .map(|pt| pt.iter().map(|l| *l / s).collect())
                .collect(),
        })
    }
}
