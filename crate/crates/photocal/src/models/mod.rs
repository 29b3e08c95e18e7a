//! Photometric maps: camera response, vignette, and the forward image
//! formation model `O = f(e V(x) L)`.

pub mod basis;
pub mod response;
pub mod vignette;

pub use basis::{BasisSource, ResponseBasis, BASIS_SAMPLES, RESPONSE_COEFFS};
pub use response::ResponseModel;
pub use vignette::VignetteModel;

use crate::scalar::Scalar;

/// Forward image formation at one scene point: output intensity plus a flag
/// set when the accumulated irradiance `e V L` falls outside (0, 1), i.e. the
/// sample is under- or overexposed.
pub fn forward_model<S: Scalar>(
    response: &ResponseModel<S>,
    vignette_value: S,
    exposure: S,
    radiance: S,
) -> (S, bool) {
    let acc = exposure * vignette_value * radiance;
    let saturated = !(acc > S::zero() && acc < S::one());
    (response.eval(acc), saturated)
}
