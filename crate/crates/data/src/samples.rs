//! Training samples: a warped frame pair plus the ground-truth trajectory.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use image::RgbImage;
use nalgebra::Matrix3;
use opdd_core::calib::{MODEL_INPUT_HEIGHT, MODEL_INPUT_WIDTH};
use opdd_core::{
    ground_truth_trajectory, stack_frames, warp_frame, AnchorSet, EgoTrajectory, InputTensor, TrajectoryError,
    VirtualCamera,
};

use crate::sequence::{DataError, SequenceRecord};

/// Frames of one sequence warped into the virtual camera, decoded lazily
/// and optionally cached.
#[derive(Debug)]
pub struct WarpedFrames {
    record: SequenceRecord,
    homography: Matrix3<f64>,
    cache: Option<Mutex<HashMap<usize, Arc<RgbImage>>>>,
}

impl WarpedFrames {
    pub fn new(record: SequenceRecord, virt: &VirtualCamera, cache: bool) -> Result<Self, DataError> {
        let homography = record
            .calibration
            .homography_to(virt)
            .map_err(|source| DataError::Calibration {
                path: record.dir.join(crate::sequence::CALIB_FILE),
                source,
            })?;
        Ok(Self {
            record,
            homography,
            cache: cache.then(|| Mutex::new(HashMap::new())),
        })
    }

    pub fn record(&self) -> &SequenceRecord {
        &self.record
    }

    pub fn frame(&self, index: usize) -> Result<Arc<RgbImage>, DataError> {
        if let Some(cache) = &self.cache {
            if let Some(img) = cache.lock().expect("frame cache poisoned").get(&index) {
                return Ok(img.clone());
            }
        }
        let raw = self.record.read_frame(index)?;
        let warped = warp_frame(&raw, &self.homography, MODEL_INPUT_WIDTH, MODEL_INPUT_HEIGHT).map_err(|source| {
            DataError::Calibration {
                path: self.record.frame_paths[index].clone(),
                source,
            }
        })?;
        let warped = Arc::new(warped);
        if let Some(cache) = &self.cache {
            cache
                .lock()
                .expect("frame cache poisoned")
                .insert(index, warped.clone());
        }
        Ok(warped)
    }

    /// Network input for reference frame `index` (frames `index - 1` and
    /// `index`).
    pub fn input(&self, index: usize) -> Result<InputTensor, DataError> {
        if index == 0 || index >= self.record.len() {
            return Err(DataError::FrameOutOfRange {
                index,
                len: self.record.len(),
            });
        }
        let prev = self.frame(index - 1)?;
        let cur = self.frame(index)?;
        Ok(stack_frames(&cur, &prev).expect("warped frames share the model input size"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub frames: Arc<WarpedFrames>,
    pub frame_index: usize,
    pub ground_truth: EgoTrajectory,
}

impl TrainingSample {
    pub fn sequence_id(&self) -> &str {
        &self.frames.record().id
    }

    pub fn input(&self) -> Result<InputTensor, DataError> {
        self.frames.input(self.frame_index)
    }
}

/// Samples of one sequence in frame order, with the number of candidate
/// reference frames dropped for lack of future horizon.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub samples: Vec<TrainingSample>,
    pub candidates: usize,
    pub skipped: usize,
}

/// One sample per `stride`-th frame starting at frame 1; frames whose ground
/// truth would run past the end of the pose log are skipped and counted.
pub fn build_samples(frames: Arc<WarpedFrames>, anchors: &AnchorSet, stride: usize) -> Result<SampleSet, DataError> {
    let stride = stride.max(1);
    let record = frames.record();
    let mut samples = Vec::new();
    let mut candidates = 0;
    let mut skipped = 0;
    for frame_index in (1..record.len()).step_by(stride) {
        candidates += 1;
        match ground_truth_trajectory(&record.poses, frame_index, anchors) {
            Ok(ground_truth) => samples.push(TrainingSample {
                frames: frames.clone(),
                frame_index,
                ground_truth,
            }),
            Err(TrajectoryError::InsufficientHorizon { .. }) => skipped += 1,
            Err(source) => {
                return Err(DataError::Poses {
                    path: record.dir.clone(),
                    source,
                })
            }
        }
    }
    Ok(SampleSet {
        samples,
        candidates,
        skipped,
    })
}
