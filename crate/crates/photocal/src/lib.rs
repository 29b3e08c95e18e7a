//! Photometric calibration of auto-exposure grayscale video.
//!
//! Recovers the camera response function, a radial vignette and per-frame
//! exposure times from an ordinary video sequence, without access to the
//! camera. Scene point correspondences come from a gain-robust KLT tracking
//! frontend; a robust nonlinear optimizer fits the photometric model jointly
//! over blocks of frames. Both an offline block-wise mode and an online
//! streaming mode (fast per-frame exposure estimation plus a background
//! refinement backend) are provided, together with frame correction and a
//! synthetic-sequence generator used for end-to-end validation.
//!
//! The numeric core is generic over the floating-point scalar via
//! [`Scalar`]; the aliases below fix `f64`, which the CLI and the test suite
//! use throughout.

pub mod error;
pub mod image;
pub mod io;
pub mod models;
pub mod optimizer;
pub mod pipeline;
pub mod scalar;
pub mod state;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
pub use image::{Frame, GrayImage};
pub use scalar::Scalar;

/// Default-precision aliases for the commonly used types.
pub type Response = models::ResponseModel<f64>;
pub type Basis = models::ResponseBasis<f64>;
pub type Vignette = models::VignetteModel<f64>;
pub type State = state::CalibrationState<f64>;
pub type Calibration = io::CalibrationResult<f64>;
pub type TrackerConfig = tracker::TrackerConfig<f64>;
pub type OptimizerConfig = optimizer::OptimizerConfig<f64>;
pub type OfflineConfig = pipeline::OfflineConfig<f64>;
pub type OnlineConfig = pipeline::OnlineConfig<f64>;
pub type SynthSpec = synth::SynthSpec<f64>;
