//! Numerical core of the planner: camera normalization, time-anchored ego
//! trajectories, multimodal output decoding, the MTP training objective and
//! the imitation / comfort metric suites.
//!
//! Everything here is plain `f64` code without a tensor backend so it can
//! serve as the reference path for the network crate.

pub mod calib;
pub mod metrics;
pub mod mtp;
pub mod prediction;
pub mod trajectory;

pub use calib::{
    rotation_homography, stack_frames, warp_frame, CalibError, CalibrationFile, CameraExtrinsics, CameraIntrinsics,
    InputTensor, VirtualCamera,
};
pub use metrics::{
    comfort_metrics, comfort_profile, imitation_metrics, imitation_metrics_with, pointwise_errors, write_point_records,
    ComfortAccumulator, ComfortReport, HitDistance, ImitationAccumulator, ImitationConfig, ImitationReport,
    MetricsError, PointError, PointRecord, RangeBuckets,
};
pub use mtp::{mtp_loss, select_mode, LossBreakdown, LossConfig, LossError, ModeSelection};
pub use prediction::{decode_output, select_best, MultimodalPrediction, OutputLayout};
pub use trajectory::{ground_truth_trajectory, AnchorMode, AnchorSet, EgoTrajectory, PoseLog, TrajectoryError};
