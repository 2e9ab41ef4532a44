//! Multimodal trajectory prediction (MTP) objective, reference implementation.
//!
//! The closest predicted mode (cosine similarity to the ground truth) is
//! regressed with smooth-L1 on decoded metric coordinates; every mode's
//! confidence logit is trained with BCE against a one-hot target on that
//! mode. `total = regression + alpha * classification`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prediction::decode_point;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite input to the loss")]
    NonFinite,
}

/// How the supervised mode is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSelection {
    /// Cosine similarity of the whole flattened `3N` trajectory.
    #[default]
    Trajectory,
    /// Cosine similarity of the final point only (displacement direction).
    FinalDisplacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub smooth_l1_beta: f64,
    pub selection: ModeSelection,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            smooth_l1_beta: 1.0,
            selection: ModeSelection::Trajectory,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(LossError::InvalidConfig(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.smooth_l1_beta > 0.0) || !self.smooth_l1_beta.is_finite() {
            return Err(LossError::InvalidConfig(format!(
                "smooth_l1_beta must be > 0, got {}",
                self.smooth_l1_beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub regression: f64,
    pub classification: f64,
    pub selected_mode: usize,
}

/// Cosine similarity; a zero-norm candidate scores -1, and any candidate
/// scores 0 against a zero-norm reference.
pub fn cosine_similarity(candidate: &[f64], reference: &[f64]) -> f64 {
    let dot: f64 = candidate.iter().zip(reference).map(|(a, b)| a * b).sum();
    let nc = candidate.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nr = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nc == 0.0 {
        -1.0
    } else if nr == 0.0 {
        0.0
    } else {
        dot / (nc * nr)
    }
}

fn flatten(points: &[[f64; 3]]) -> Vec<f64> {
    points.iter().flatten().copied().collect()
}

/// Index of the mode most similar to the ground truth; ties go to the lowest
/// index.
pub fn select_mode(pred_trajs: &[Vec<[f64; 3]>], gt: &[[f64; 3]], selection: ModeSelection) -> usize {
    let reference = match selection {
        ModeSelection::Trajectory => flatten(gt),
        ModeSelection::FinalDisplacement => gt.last().map(|p| p.to_vec()).unwrap_or_default(),
    };
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (m, traj) in pred_trajs.iter().enumerate() {
        let candidate = match selection {
            ModeSelection::Trajectory => flatten(traj),
            ModeSelection::FinalDisplacement => traj.last().map(|p| p.to_vec()).unwrap_or_default(),
        };
        let sim = cosine_similarity(&candidate, &reference);
        if sim > best_sim {
            best_sim = sim;
            best = m;
        }
    }
    best
}

pub fn smooth_l1(residual: f64, beta: f64) -> f64 {
    let d = residual.abs();
    if d < beta {
        0.5 * d * d / beta
    } else {
        d - 0.5 * beta
    }
}

/// Numerically stable `BCE(sigmoid(logit), target)`.
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// MTP loss for one sample.
///
/// `raw_coords` is `M x N` pre-activation points, `conf_logits` has length M
/// and `gt` holds the N metric ground-truth points.
pub fn mtp_loss(
    raw_coords: &[Vec<[f64; 3]>],
    conf_logits: &[f64],
    gt: &[[f64; 3]],
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    cfg.validate()?;
    let modes = raw_coords.len();
    if modes == 0 || conf_logits.len() != modes {
        return Err(LossError::Shape(format!(
            "{} modes of coordinates but {} logits",
            modes,
            conf_logits.len()
        )));
    }
    if gt.is_empty() || raw_coords.iter().any(|m| m.len() != gt.len()) {
        return Err(LossError::Shape(format!("every mode must have {} points", gt.len())));
    }
    let finite = raw_coords.iter().flatten().flatten().all(|v| v.is_finite())
        && conf_logits.iter().all(|v| v.is_finite())
        && gt.iter().flatten().all(|v| v.is_finite());
    if !finite {
        return Err(LossError::NonFinite);
    }

    let decoded: Vec<Vec<[f64; 3]>> = raw_coords
        .iter()
        .map(|mode| mode.iter().map(|&c| decode_point(c)).collect())
        .collect();
    if decoded.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite);
    }
    let selected = select_mode(&decoded, gt, cfg.selection);

    let residuals = decoded[selected]
        .iter()
        .zip(gt)
        .flat_map(|(p, g)| (0..3).map(move |k| p[k] - g[k]));
    let regression = residuals.map(|r| smooth_l1(r, cfg.smooth_l1_beta)).sum::<f64>() / (3 * gt.len()) as f64;
    let classification = conf_logits
        .iter()
        .enumerate()
        .map(|(m, &z)| bce_with_logits(z, if m == selected { 1.0 } else { 0.0 }))
        .sum::<f64>()
        / modes as f64;

    Ok(LossBreakdown {
        total: regression + cfg.alpha * classification,
        regression,
        classification,
        selected_mode: selected,
    })
}
