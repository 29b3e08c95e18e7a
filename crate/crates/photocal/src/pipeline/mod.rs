//! Calibration pipelines: offline block-wise, online streaming, and frame
//! correction.

mod correct;
mod offline;
mod online;

pub use correct::{correct_frame, correct_with_result, CorrectedFrame};
pub use offline::{
    align_block_exposures, calibrate_offline, partition_blocks, BlockReport, OfflineConfig,
    OfflineReport,
};
pub use online::{OnlineCalibrator, OnlineConfig, OnlineFrameOutput, Snapshot};
