//! Nonlinear backend: robust joint energy over response, vignette, exposures
//! and scene point radiances, with analytic Jacobians and an alternating
//! damped Gauss-Newton scheme.

mod step;

pub use step::{
    optimize_block, optimize_rounds, reject_outliers, step_params, step_radiances, BlockOutcome,
    ExposureLayout, StepKind, TraceEntry,
};

use crate::error::{Error, Result};
use crate::image::corner_radius;
use crate::models::RESPONSE_COEFFS;
use crate::scalar::Scalar;
use crate::state::CalibrationState;
use crate::tracker::TrackDatabase;

#[derive(Debug, Clone)]
pub struct OptimizerConfig<S: Scalar> {
    /// Huber parameter in intensity levels.
    pub huber_h: S,
    /// Gradient down-weighting constant.
    pub grad_mu: S,
    pub lm_lambda_init: S,
    pub max_rounds: usize,
    /// Stop once the relative energy decrease of a round falls below this.
    pub convergence_rel_energy: S,
    /// Fraction of residuals dropped in the outlier rejection pass.
    pub rejection_fraction: S,
    /// Steps pushing the vignette polynomial below this anywhere are rejected.
    pub vignette_floor: S,
    /// Blocks with fewer usable points are discarded.
    pub min_points: usize,
    /// Blocks whose mean per-point radial span is smaller are discarded.
    pub min_radial_span: S,
    /// Intensities within this margin of the 8-bit rails count as saturated.
    /// Tracked patches are interpolated, so values smeared toward the rails
    /// are unreliable well before they reach 0 or 255 exactly.
    pub saturation_margin: S,
}

impl<S: Scalar> Default for OptimizerConfig<S> {
    fn default() -> Self {
        OptimizerConfig {
            huber_h: S::cast(5.0),
            grad_mu: S::cast(50.0),
            lm_lambda_init: S::one(),
            max_rounds: 50,
            convergence_rel_energy: S::cast(1e-5),
            rejection_fraction: S::cast(0.20),
            vignette_floor: S::cast(0.2),
            min_points: 50,
            min_radial_span: S::cast(0.2),
            saturation_margin: S::cast(5.0),
        }
    }
}

impl<S: Scalar> OptimizerConfig<S> {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if !(self.huber_h > S::zero()) {
            return bad("huber_h must be positive");
        }
        if !(self.grad_mu > S::zero()) {
            return bad("grad_mu must be positive");
        }
        if !(self.rejection_fraction >= S::zero() && self.rejection_fraction < S::one()) {
            return bad("rejection_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Gradient-dependent weight `mu / (mu + |grad|^2)`, in (0, 1].
#[inline]
pub fn gradient_weight<S: Scalar>(grad_sq: S, mu: S) -> S {
    mu / (mu + grad_sq)
}

/// Huber loss: quadratic inside `h`, linear outside.
#[inline]
pub fn huber_loss<S: Scalar>(r: S, h: S) -> S {
    let a = r.abs();
    if a <= h {
        a * a * S::cast(0.5)
    } else {
        h * (a - h * S::cast(0.5))
    }
}

/// Huber IRLS weight folded into the normal equations: 1 inside `h`, `h/|r|`
/// outside.
#[inline]
pub fn huber_weight<S: Scalar>(r: S, h: S) -> S {
    let a = r.abs();
    if a <= h {
        S::one()
    } else {
        h / a
    }
}

/// One term of the joint energy: a single patch pixel observed in a single
/// frame.
#[derive(Debug, Clone)]
pub struct Residual<S: Scalar> {
    pub point: u32,
    pub pixel: u16,
    pub frame: u32,
    /// Observed output intensity.
    pub intensity: S,
    /// Squared normalized radius of the observed patch pixel.
    pub r2: S,
    /// Gradient weight, fixed by the data.
    pub weight_grad: S,
    /// Cleared by saturation filtering and outlier rejection.
    pub active: bool,
}

/// Contiguous residual range sharing one (point, pixel) radiance.
#[derive(Debug, Clone, Copy)]
pub struct ResidualGroup {
    pub point: usize,
    pub pixel: usize,
    pub start: usize,
    pub end: usize,
}

/// Flattened residual set for one optimization block, grouped by radiance.
#[derive(Debug, Clone)]
pub struct ResidualTable<S: Scalar> {
    pub residuals: Vec<Residual<S>>,
    pub groups: Vec<ResidualGroup>,
    pub frame_count: usize,
    pub patch_pixels: usize,
}

impl<S: Scalar> ResidualTable<S> {
    /// Build the table from a track database. Saturated observations (patch
    /// intensity at the ends of the 8-bit range) start out inactive.
    pub fn build(db: &TrackDatabase<S>, cfg: &OptimizerConfig<S>) -> Self {
        let cx = S::cast((db.width as f64 - 1.0) / 2.0);
        let cy = S::cast((db.height as f64 - 1.0) / 2.0);
        let r_norm: S = corner_radius(db.width, db.height);
        let half = (db.patch_size / 2) as i32;
        let patch_pixels = db.patch_size * db.patch_size;

        let mut residuals = Vec::new();
        let mut groups = Vec::new();
        for (pi, point) in db.points.iter().enumerate() {
            for j in 0..patch_pixels {
                let dx = S::cast((j % db.patch_size) as i32 as f64 - half as f64);
                let dy = S::cast((j / db.patch_size) as i32 as f64 - half as f64);
                let start = residuals.len();
                for obs in &point.observations {
                    let o = obs.patch_intensities[j];
                    let px = obs.location.x + dx;
                    let py = obs.location.y + dy;
                    let rx = (px - cx) / r_norm;
                    let ry = (py - cy) / r_norm;
                    residuals.push(Residual {
                        point: pi as u32,
                        pixel: j as u16,
                        frame: obs.frame_index as u32,
                        intensity: o,
                        r2: rx * rx + ry * ry,
                        weight_grad: gradient_weight(obs.patch_gradient_sq[j], cfg.grad_mu),
                        active: o > cfg.saturation_margin
                            && o < S::cast(255.0) - cfg.saturation_margin,
                    });
                }
                groups.push(ResidualGroup {
                    point: pi,
                    pixel: j,
                    start,
                    end: residuals.len(),
                });
            }
        }
        ResidualTable {
            residuals,
            groups,
            frame_count: db.frame_count,
            patch_pixels,
        }
    }

    pub fn active_count(&self) -> usize {
        self.residuals.iter().filter(|r| r.active).count()
    }
}

/// Residual value `O - f(e V L)` for one table entry.
#[inline]
pub fn residual_value<S: Scalar>(state: &CalibrationState<S>, res: &Residual<S>) -> S {
    let radiance = state.radiances[res.point as usize][res.pixel as usize];
    let v = state.vignette.eval_r2(res.r2);
    let acc = state.exposures[res.frame as usize] * v * radiance;
    res.intensity - state.response.eval(acc)
}

/// Total robust energy `sum w2 * huber(r)` over active residuals.
///
/// The Huber IRLS weight lives inside the normal equations, not here.
pub fn energy<S: Scalar>(
    state: &CalibrationState<S>,
    table: &ResidualTable<S>,
    cfg: &OptimizerConfig<S>,
) -> S {
    let mut e = S::zero();
    for res in &table.residuals {
        if !res.active {
            continue;
        }
        e += res.weight_grad * huber_loss(residual_value(state, res), cfg.huber_h);
    }
    e
}

/// Analytic derivatives of one residual with respect to the response
/// coefficients, vignette coefficients, the frame exposure and the radiance.
#[derive(Debug, Clone, Copy)]
pub struct ResidualJacobian<S: Scalar> {
    pub d_coeffs: [S; RESPONSE_COEFFS],
    pub d_vignette: [S; 3],
    pub d_exposure: S,
    pub d_radiance: S,
}

impl<S: Scalar> ResidualJacobian<S> {
    pub fn zeros() -> Self {
        ResidualJacobian {
            d_coeffs: [S::zero(); RESPONSE_COEFFS],
            d_vignette: [S::zero(); 3],
            d_exposure: S::zero(),
            d_radiance: S::zero(),
        }
    }
}

/// Chain rule through `r = O - f(e V(x) L)`. Saturated model arguments
/// (accumulated irradiance outside (0, 1)) yield all-zero derivatives.
pub fn jacobian_row<S: Scalar>(
    state: &CalibrationState<S>,
    res: &Residual<S>,
) -> (S, ResidualJacobian<S>) {
    let radiance = state.radiances[res.point as usize][res.pixel as usize];
    let exposure = state.exposures[res.frame as usize];
    let poly = state.vignette.poly_r2(res.r2);
    let g = state.vignette.exponent();
    let v = if g == S::one() {
        poly
    } else {
        poly.max(S::cast(1e-9)).powf(g)
    };
    let acc = exposure * v * radiance;
    let r = res.intensity - state.response.eval(acc);
    if !(acc > S::zero() && acc < S::one()) {
        return (r, ResidualJacobian::zeros());
    }

    let fprime = state.response.derivative(acc);
    let hvals = state.response.coeff_gradient(acc);

    // dV/dv_j = g P^(g-1) r2^(j+1)
    let dv_dp = if g == S::one() {
        S::one()
    } else {
        g * poly.max(S::cast(1e-9)).powf(g - S::one())
    };
    let el = exposure * radiance;
    let mut d_vignette = [S::zero(); 3];
    let mut rpow = res.r2;
    for dv in &mut d_vignette {
        *dv = -fprime * el * dv_dp * rpow;
        rpow *= res.r2;
    }

    (
        r,
        ResidualJacobian {
            d_coeffs: [-hvals[0], -hvals[1], -hvals[2], -hvals[3]],
            d_vignette,
            d_exposure: -fprime * v * radiance,
            d_radiance: -fprime * exposure * v,
        },
    )
}

/// Reject blocks the vignette cannot be estimated from: too few points or too
/// little radial motion of the tracked points.
pub fn check_observability<S: Scalar>(
    db: &TrackDatabase<S>,
    cfg: &OptimizerConfig<S>,
) -> Result<()> {
    let usable: Vec<&crate::tracker::ScenePoint<S>> = db
        .points
        .iter()
        .filter(|p| p.observations.len() >= 2)
        .collect();
    if usable.len() < cfg.min_points {
        return Err(Error::InsufficientCorrespondences(format!(
            "{} points with 2+ observations, need {}",
            usable.len(),
            cfg.min_points
        )));
    }
    let cx = (db.width as f64 - 1.0) / 2.0;
    let cy = (db.height as f64 - 1.0) / 2.0;
    let r_norm = corner_radius::<f64>(db.width, db.height);
    let mut span_sum = 0.0;
    for p in &usable {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for o in &p.observations {
            let dx = o.location.x.to_f64_lossy() - cx;
            let dy = o.location.y.to_f64_lossy() - cy;
            let r = (dx * dx + dy * dy).sqrt() / r_norm;
            lo = lo.min(r);
            hi = hi.max(r);
        }
        span_sum += hi - lo;
    }
    let mean_span = span_sum / usable.len() as f64;
    if mean_span < cfg.min_radial_span.to_f64_lossy() {
        return Err(Error::InsufficientCorrespondences(format!(
            "mean radial span {:.3} below {:.3}: vignetting not well constrained",
            mean_span,
            cfg.min_radial_span.to_f64_lossy()
        )));
    }
    Ok(())
}

/// Initial state for a block: mean-curve response, slight vignetting, unit
/// exposures and radiances from the mean observed intensities.
pub fn init_state<S: Scalar>(
    db: &TrackDatabase<S>,
    basis: &std::sync::Arc<crate::models::ResponseBasis<S>>,
    table: &ResidualTable<S>,
) -> CalibrationState<S> {
    let response = crate::models::ResponseModel::unit(std::sync::Arc::clone(basis));
    let vignette =
        crate::models::VignetteModel::for_frame([S::cast(-0.1), S::zero(), S::zero()], db.width, db.height);
    let exposures = vec![S::one(); db.frame_count];
    let radiances = mean_intensity_radiances(db, table);
    CalibrationState {
        response,
        vignette,
        exposures,
        radiances,
    }
}

/// Radiance seed: arithmetic mean of each pixel's unsaturated observed
/// intensities, normalized to [0, 1].
pub fn mean_intensity_radiances<S: Scalar>(
    db: &TrackDatabase<S>,
    table: &ResidualTable<S>,
) -> Vec<Vec<S>> {
    let mut radiances: Vec<Vec<S>> =
        db.points.iter().map(|_| vec![S::cast(0.5); table.patch_pixels]).collect();
    for grp in &table.groups {
        let mut sum = S::zero();
        let mut count = 0usize;
        for res in &table.residuals[grp.start..grp.end] {
            if res.active {
                sum += res.intensity;
                count += 1;
            }
        }
        if count > 0 {
            radiances[grp.point][grp.pixel] = sum / S::cast(count as f64) / S::cast(255.0);
        }
    }
    radiances
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gradient_weight_values() {
        assert_eq!(gradient_weight(0.0, 50.0), 1.0);
        assert_eq!(gradient_weight(50.0, 50.0), 0.5);
        assert_relative_eq!(gradient_weight(450.0, 50.0), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn huber_conventions() {
        let h = 5.0f64;
        // Quadratic branch: rho(h/2) = h^2 / 8.
        assert_relative_eq!(huber_loss(h / 2.0, h), h * h / 8.0, epsilon = 1e-12);
        // Linear branch: rho(2h) = 1.5 h^2.
        assert_relative_eq!(huber_loss(2.0 * h, h), 1.5 * h * h, epsilon = 1e-12);
        // Continuous at the elbow.
        assert_relative_eq!(huber_loss(h + 1e-12, h), huber_loss(h, h), epsilon = 1e-9);
        // IRLS weights.
        assert_eq!(huber_weight(3.0, h), 1.0);
        assert_relative_eq!(huber_weight(10.0, h), 0.5, epsilon = 1e-12);
        assert_relative_eq!(huber_weight(-10.0, h), 0.5, epsilon = 1e-12);
    }
}
