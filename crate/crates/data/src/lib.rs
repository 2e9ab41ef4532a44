//! Driving sequences on disk and the samples fed to the planner.
//!
//! A sequence directory holds `frames/%06d.jpg`, `poses.csv`, `calib.json`
//! and `meta.json`. Real datasets are converted into this layout offline;
//! [`synthetic`] renders sequences directly into it.

pub mod samples;
pub mod sequence;
pub mod split;
pub mod synthetic;

pub use samples::{build_samples, SampleSet, TrainingSample, WarpedFrames};
pub use sequence::{list_sequences, load_dataset, load_sequence, DataError, SequenceMeta, SequenceRecord, Split};
pub use split::split_dataset;
pub use synthetic::{desk_suite, generate_synthetic, CameraRig, PathKind, SpeedProfile, SyntheticSpec};
