//! Evaluation runner: streams every sequence in frame order from a zero
//! hidden state, keeps the most confident mode per frame and reduces the
//! imitation and comfort metrics.

use std::time::Instant;

use candle_core::Tensor;
use opdd_core::{
    select_best, ComfortAccumulator, ComfortReport, ImitationAccumulator, ImitationConfig, ImitationReport,
    MultimodalPrediction, PointRecord,
};
use opdd_data::{SequenceRecord, TrainingSample};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::planner::{input_batch, AnchorMode, HiddenState, Planner};
use crate::train::prepare_sequences;

/// Something that produces one multimodal prediction per frame of a
/// sequence, possibly carrying state from frame to frame.
pub trait Predictor {
    fn anchor_mode(&self) -> AnchorMode;
    /// Called before the first frame of each sequence.
    fn reset(&mut self) -> Result<(), ModelError>;
    fn predict(&mut self, sample: &TrainingSample) -> Result<MultimodalPrediction, ModelError>;
}

/// The network in inference mode with a batch-of-one hidden state.
pub struct PlannerPredictor<'a> {
    planner: &'a Planner,
    hidden: HiddenState,
}

impl<'a> PlannerPredictor<'a> {
    pub fn new(planner: &'a Planner) -> Result<Self, ModelError> {
        Ok(Self {
            planner,
            hidden: planner.zero_hidden(1)?,
        })
    }

    /// Raw head output for one frame; advances the hidden state.
    pub fn step_raw(&mut self, sample: &TrainingSample) -> Result<Tensor, ModelError> {
        let input = input_batch(&[sample.input()?], self.planner.dtype(), self.planner.device())?;
        let (raw, hidden) = self.planner.forward(&input, &self.hidden)?;
        self.hidden = hidden;
        Ok(raw)
    }
}

impl Predictor for PlannerPredictor<'_> {
    fn anchor_mode(&self) -> AnchorMode {
        self.planner.config().anchor_mode
    }

    fn reset(&mut self) -> Result<(), ModelError> {
        self.hidden = self.planner.zero_hidden(1)?;
        Ok(())
    }

    fn predict(&mut self, sample: &TrainingSample) -> Result<MultimodalPrediction, ModelError> {
        let raw = self.step_raw(sample)?;
        Ok(self.planner.decode(&raw)?.remove(0))
    }
}

/// Replays the ground truth as a single certain mode.
pub struct GroundTruthPredictor(pub AnchorMode);

impl Predictor for GroundTruthPredictor {
    fn anchor_mode(&self) -> AnchorMode {
        self.0
    }

    fn reset(&mut self) -> Result<(), ModelError> {
        Ok(())
    }

    fn predict(&mut self, sample: &TrainingSample) -> Result<MultimodalPrediction, ModelError> {
        Ok(MultimodalPrediction {
            trajectories: vec![sample.ground_truth.clone()],
            confidences: vec![1.0],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub imitation: ImitationConfig,
    pub stride: usize,
    pub cache_frames: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            imitation: ImitationConfig::default(),
            stride: 1,
            cache_frames: false,
        }
    }
}

/// The JSON report. Comfort is reported for the 10-second comma anchors
/// only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub anchor_mode: AnchorMode,
    pub sequences: usize,
    pub samples: usize,
    pub imitation: ImitationReport,
    pub comfort: Option<ComfortReport>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub points: Vec<PointRecord>,
    /// Frames per second of the predictor alone (excludes metric reduction).
    pub frames_per_second: f64,
}

pub fn evaluate(
    predictor: &mut dyn Predictor,
    records: Vec<SequenceRecord>,
    config: &EvalConfig,
) -> Result<Evaluation, ModelError> {
    let anchor_mode = predictor.anchor_mode();
    let sequences = prepare_sequences(records, anchor_mode, config.stride, config.cache_frames)?;
    if sequences.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut imitation = ImitationAccumulator::new(config.imitation.clone());
    let mut comfort = ComfortAccumulator::default();
    let mut points = Vec::new();
    let mut samples = 0;
    let mut predict_seconds = 0.0;
    let anchor_times = anchor_mode.anchors().times().to_vec();

    for seq in &sequences {
        predictor.reset()?;
        for sample in seq {
            let started = Instant::now();
            let prediction = predictor.predict(sample)?;
            predict_seconds += started.elapsed().as_secs_f64();
            let best = select_best(&prediction);
            let errors = imitation.add(best, &sample.ground_truth)?;
            if anchor_mode == AnchorMode::Comma {
                comfort.add(best)?;
            }
            for (k, ((e, p), g)) in errors
                .iter()
                .zip(best.points())
                .zip(sample.ground_truth.points())
                .enumerate()
            {
                points.push(PointRecord {
                    sequence: sample.sequence_id().to_string(),
                    frame_index: sample.frame_index,
                    anchor_index: k,
                    anchor_time: anchor_times[k],
                    range: config.imitation.buckets.label(e.bucket),
                    gt_x: g.x,
                    gt_y: g.y,
                    gt_z: g.z,
                    pred_x: p.x,
                    pred_y: p.y,
                    pred_z: p.z,
                    d3: e.d3,
                    dx: e.dx,
                    dy: e.dy,
                });
            }
            samples += 1;
        }
    }
    Ok(Evaluation {
        report: EvalReport {
            anchor_mode,
            sequences: sequences.len(),
            samples,
            imitation: imitation.finish(),
            comfort: comfort.finish(),
        },
        points,
        frames_per_second: if predict_seconds > 0.0 {
            samples as f64 / predict_seconds
        } else {
            f64::INFINITY
        },
    })
}
