//! Raw head output layout and its decoding into candidate trajectories.
//!
//! Per mode the raw vector holds `N` points as `(x, y, z)` followed by one
//! confidence logit: `[m0: p0.x p0.y p0.z .. pN-1.z c0][m1: ..]`, for a
//! total length of `M * (3N + 1)`.

use nalgebra::Vector3;
use thiserror::Error;

use crate::trajectory::{AnchorSet, EgoTrajectory, TrajectoryError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictionError {
    #[error("raw output has length {actual}, layout expects {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("layout needs at least one mode and one point")]
    EmptyLayout,
    #[error("layout has {points} points but anchor set has {anchors}")]
    AnchorMismatch { points: usize, anchors: usize },
    #[error("non-finite value in raw output at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputLayout {
    pub modes: usize,
    pub points: usize,
}

impl OutputLayout {
    pub fn new(modes: usize, points: usize) -> Result<Self, PredictionError> {
        if modes == 0 || points == 0 {
            return Err(PredictionError::EmptyLayout);
        }
        Ok(Self { modes, points })
    }

    /// Values per mode: three coordinates per point plus one logit.
    pub fn mode_stride(&self) -> usize {
        self.points * 3 + 1
    }

    /// `D = M * (N * 3 + 1)`.
    pub fn dim(&self) -> usize {
        self.modes * self.mode_stride()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `x = exp(raw_x)`, `y = sinh(raw_y)`, `z = raw_z`.
pub fn decode_point(raw: [f64; 3]) -> [f64; 3] {
    [raw[0].exp(), raw[1].sinh(), raw[2]]
}

/// Inverse of [`decode_point`]; `x` must be positive.
pub fn encode_point(p: [f64; 3]) -> [f64; 3] {
    [p[0].ln(), p[1].asinh(), p[2]]
}

/// M candidate trajectories with their confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalPrediction {
    pub trajectories: Vec<EgoTrajectory>,
    pub confidences: Vec<f64>,
}

impl MultimodalPrediction {
    pub fn modes(&self) -> usize {
        self.trajectories.len()
    }

    /// Argmax of the confidences; ties resolve to the lowest index.
    pub fn best_mode(&self) -> usize {
        let mut best = 0;
        for (m, &c) in self.confidences.iter().enumerate().skip(1) {
            if c > self.confidences[best] {
                best = m;
            }
        }
        best
    }
}

/// Splits one raw output row into per-mode raw coordinates and logits.
pub fn split_raw(raw: &[f64], layout: OutputLayout) -> Result<(Vec<Vec<[f64; 3]>>, Vec<f64>), PredictionError> {
    if raw.len() != layout.dim() {
        return Err(PredictionError::LengthMismatch {
            expected: layout.dim(),
            actual: raw.len(),
        });
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(PredictionError::NonFinite(i));
    }
    let stride = layout.mode_stride();
    let mut coords = Vec::with_capacity(layout.modes);
    let mut logits = Vec::with_capacity(layout.modes);
    for chunk in raw.chunks_exact(stride) {
        coords.push(
            chunk[..layout.points * 3]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
        );
        logits.push(chunk[stride - 1]);
    }
    Ok((coords, logits))
}

/// Decodes one raw output row.
pub fn decode_output(
    raw: &[f64],
    layout: OutputLayout,
    anchors: &AnchorSet,
) -> Result<MultimodalPrediction, PredictionError> {
    if anchors.len() != layout.points {
        return Err(PredictionError::AnchorMismatch {
            points: layout.points,
            anchors: anchors.len(),
        });
    }
    let (coords, logits) = split_raw(raw, layout)?;
    let trajectories = coords
        .into_iter()
        .map(|mode| {
            let points = mode.into_iter().map(|c| Vector3::from(decode_point(c))).collect();
            EgoTrajectory::new(anchors.clone(), points)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MultimodalPrediction {
        trajectories,
        confidences: logits.into_iter().map(sigmoid).collect(),
    })
}

/// Re-encodes a prediction into the raw layout (ln / asinh / identity / logit).
pub fn encode_output(pred: &MultimodalPrediction) -> Vec<f64> {
    let mut raw = Vec::new();
    for (traj, &conf) in pred.trajectories.iter().zip(&pred.confidences) {
        for p in traj.points() {
            raw.extend_from_slice(&encode_point([p.x, p.y, p.z]));
        }
        raw.push(logit(conf));
    }
    raw
}

/// The planned trajectory: the highest-confidence mode.
pub fn select_best(pred: &MultimodalPrediction) -> &EgoTrajectory {
    &pred.trajectories[pred.best_mode()]
}
