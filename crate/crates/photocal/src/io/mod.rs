//! Sequence input and calibration output formats.

mod calib;
mod sequence;

pub use calib::CalibrationResult;
pub use sequence::{load_sequence, read_exposures_csv, write_gray16_png, write_gray8_png};
