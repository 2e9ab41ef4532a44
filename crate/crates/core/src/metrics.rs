//! Imitation metrics (range-bucketed distance errors and hit-rate AP) and
//! comfort metrics (jerk and lateral acceleration amplitudes).
//!
//! Aggregation goes through accumulators holding per-bucket sums and counts
//! so datasets can be reduced in parallel and merged.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::EgoTrajectory;

pub const DEFAULT_AP_THRESHOLDS: [f64; 3] = [0.5, 1.0, 2.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction and ground truth use different anchor sets")]
    AnchorMismatch,
    #[error("comfort metrics need at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("no trajectory pairs to evaluate")]
    Empty,
    #[error("csv export: {0}")]
    Csv(String),
}

/// Ranges along ego x, in meters; the last bucket is open ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeBuckets {
    lower_edges: Vec<f64>,
}

impl Default for RangeBuckets {
    fn default() -> Self {
        Self {
            lower_edges: vec![0.0, 10.0, 20.0, 30.0, 50.0],
        }
    }
}

impl RangeBuckets {
    pub fn len(&self) -> usize {
        self.lower_edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower_edges.is_empty()
    }

    /// Bucket holding forward distance `x`; lower edges are inclusive and
    /// negative distances fall into the first bucket.
    pub fn bucket_of(&self, x: f64) -> usize {
        self.lower_edges[1..].iter().take_while(|&&edge| x >= edge).count()
    }

    pub fn label(&self, bucket: usize) -> String {
        let lo = self.lower_edges[bucket];
        match self.lower_edges.get(bucket + 1) {
            Some(hi) => format!("{lo}-{hi}"),
            None => format!("{lo}+"),
        }
    }
}

/// Distance used for the AP "hit" test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitDistance {
    #[default]
    Full3d,
    /// Bird's-eye-view distance in the xy-plane.
    Bev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImitationConfig {
    pub buckets: RangeBuckets,
    pub thresholds: Vec<f64>,
    pub hit_distance: HitDistance,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        Self {
            buckets: RangeBuckets::default(),
            thresholds: DEFAULT_AP_THRESHOLDS.to_vec(),
            hit_distance: HitDistance::Full3d,
        }
    }
}

/// Error of one predicted point against its ground-truth counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointError {
    pub d3: f64,
    pub dx: f64,
    pub dy: f64,
    pub dxy: f64,
    pub bucket: usize,
}

pub fn pointwise_errors(
    pred: &EgoTrajectory,
    gt: &EgoTrajectory,
    buckets: &RangeBuckets,
) -> Result<Vec<PointError>, MetricsError> {
    if pred.anchors() != gt.anchors() {
        return Err(MetricsError::AnchorMismatch);
    }
    Ok(pred
        .points()
        .iter()
        .zip(gt.points())
        .map(|(p, g)| {
            let d = p - g;
            PointError {
                d3: d.norm(),
                dx: d.x.abs(),
                dy: d.y.abs(),
                dxy: d.x.hypot(d.y),
                bucket: buckets.bucket_of(g.x),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Default)]
struct BucketSums {
    count: usize,
    d3: f64,
    dx: f64,
    dy: f64,
    hits: Vec<usize>,
}

/// Streaming imitation-metric reducer.
#[derive(Debug, Clone)]
pub struct ImitationAccumulator {
    config: ImitationConfig,
    sums: Vec<BucketSums>,
}

impl ImitationAccumulator {
    pub fn new(config: ImitationConfig) -> Self {
        let sums = vec![
            BucketSums {
                hits: vec![0; config.thresholds.len()],
                ..BucketSums::default()
            };
            config.buckets.len()
        ];
        Self { config, sums }
    }

    pub fn add_errors(&mut self, errors: &[PointError]) {
        for e in errors {
            let s = &mut self.sums[e.bucket];
            s.count += 1;
            s.d3 += e.d3;
            s.dx += e.dx;
            s.dy += e.dy;
            let hit_distance = match self.config.hit_distance {
                HitDistance::Full3d => e.d3,
                HitDistance::Bev => e.dxy,
            };
            for (hits, &tau) in s.hits.iter_mut().zip(&self.config.thresholds) {
                if hit_distance < tau {
                    *hits += 1;
                }
            }
        }
    }

    pub fn add(&mut self, pred: &EgoTrajectory, gt: &EgoTrajectory) -> Result<Vec<PointError>, MetricsError> {
        let errors = pointwise_errors(pred, gt, &self.config.buckets)?;
        self.add_errors(&errors);
        Ok(errors)
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            a.count += b.count;
            a.d3 += b.d3;
            a.dx += b.dx;
            a.dy += b.dy;
            for (x, y) in a.hits.iter_mut().zip(&b.hits) {
                *x += y;
            }
        }
    }

    pub fn finish(&self) -> ImitationReport {
        let rows = self
            .sums
            .iter()
            .enumerate()
            .map(|(b, s)| {
                let mean = |v: f64| (s.count > 0).then(|| v / s.count as f64);
                BucketReport {
                    range: self.config.buckets.label(b),
                    count: s.count,
                    distance_error: mean(s.d3),
                    distance_error_x: mean(s.dx),
                    distance_error_y: mean(s.dy),
                    ap: self
                        .config
                        .thresholds
                        .iter()
                        .zip(&s.hits)
                        .map(|(tau, &h)| (format!("ap@{tau}"), mean(h as f64)))
                        .collect(),
                }
            })
            .collect();
        ImitationReport {
            hit_distance: self.config.hit_distance,
            thresholds: self.config.thresholds.clone(),
            rows,
        }
    }
}

/// One range row; means are absent for empty buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub range: String,
    pub count: usize,
    pub distance_error: Option<f64>,
    pub distance_error_x: Option<f64>,
    pub distance_error_y: Option<f64>,
    #[serde(flatten)]
    pub ap: BTreeMap<String, Option<f64>>,
}

impl BucketReport {
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.ap.get(&format!("ap@{threshold}")).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImitationReport {
    pub hit_distance: HitDistance,
    pub thresholds: Vec<f64>,
    pub rows: Vec<BucketReport>,
}

pub fn imitation_metrics_with(
    pairs: &[(EgoTrajectory, EgoTrajectory)],
    config: &ImitationConfig,
) -> Result<ImitationReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut acc = ImitationAccumulator::new(config.clone());
    for (pred, gt) in pairs {
        acc.add(pred, gt)?;
    }
    Ok(acc.finish())
}

/// Imitation metrics over `(prediction, ground truth)` pairs with the
/// default ranges, thresholds and 3D hit distance.
pub fn imitation_metrics(pairs: &[(EgoTrajectory, EgoTrajectory)]) -> Result<ImitationReport, MetricsError> {
    imitation_metrics_with(pairs, &ImitationConfig::default())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComfortProfile {
    /// Jerk amplitude at each third-difference location (m/s^3).
    pub jerk: Vec<f64>,
    /// Lateral acceleration amplitude at each second-difference location (m/s^2).
    pub lateral_acceleration: Vec<f64>,
}

fn midpoint_derivative(values: &[Vector3<f64>], times: &[f64]) -> (Vec<Vector3<f64>>, Vec<f64>) {
    let rates = values
        .windows(2)
        .zip(times.windows(2))
        .map(|(v, t)| (v[1] - v[0]) / (t[1] - t[0]))
        .collect();
    let mids = times.windows(2).map(|t| 0.5 * (t[0] + t[1])).collect();
    (rates, mids)
}

/// Finite-difference kinematics of a trajectory sampled on its anchors.
pub fn comfort_profile(traj: &EgoTrajectory) -> Result<ComfortProfile, MetricsError> {
    if traj.len() < 4 {
        return Err(MetricsError::TooFewPoints(traj.len()));
    }
    let (vel, vel_t) = midpoint_derivative(traj.points(), traj.anchors().times());
    let (acc, acc_t) = midpoint_derivative(&vel, &vel_t);
    let (jerk, _) = midpoint_derivative(&acc, &acc_t);

    let lateral_acceleration = acc
        .iter()
        .enumerate()
        .map(|(k, a)| {
            // velocity at the acceleration sample
            let v = 0.5 * (vel[k] + vel[k + 1]);
            let speed = v.x.hypot(v.y);
            if speed == 0.0 {
                return 0.0;
            }
            let (ux, uy) = (v.x / speed, v.y / speed);
            let along = a.x * ux + a.y * uy;
            (a.x - along * ux).hypot(a.y - along * uy)
        })
        .collect();
    Ok(ComfortProfile {
        jerk: jerk.iter().map(|j| j.norm()).collect(),
        lateral_acceleration,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComfortReport {
    pub average_jerk: f64,
    pub max_jerk: f64,
    pub average_lateral_acceleration: f64,
    pub max_lateral_acceleration: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComfortAccumulator {
    jerk_sum: f64,
    jerk_count: usize,
    jerk_max: f64,
    lat_sum: f64,
    lat_count: usize,
    lat_max: f64,
}

impl ComfortAccumulator {
    pub fn add_profile(&mut self, profile: &ComfortProfile) {
        for &j in &profile.jerk {
            self.jerk_sum += j;
            self.jerk_count += 1;
            self.jerk_max = self.jerk_max.max(j);
        }
        for &a in &profile.lateral_acceleration {
            self.lat_sum += a;
            self.lat_count += 1;
            self.lat_max = self.lat_max.max(a);
        }
    }

    pub fn add(&mut self, traj: &EgoTrajectory) -> Result<(), MetricsError> {
        self.add_profile(&comfort_profile(traj)?);
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.jerk_sum += other.jerk_sum;
        self.jerk_count += other.jerk_count;
        self.jerk_max = self.jerk_max.max(other.jerk_max);
        self.lat_sum += other.lat_sum;
        self.lat_count += other.lat_count;
        self.lat_max = self.lat_max.max(other.lat_max);
    }

    pub fn finish(&self) -> Option<ComfortReport> {
        if self.jerk_count == 0 || self.lat_count == 0 {
            return None;
        }
        Some(ComfortReport {
            average_jerk: self.jerk_sum / self.jerk_count as f64,
            max_jerk: self.jerk_max,
            average_lateral_acceleration: self.lat_sum / self.lat_count as f64,
            max_lateral_acceleration: self.lat_max,
        })
    }
}

pub fn comfort_metrics(traj: &EgoTrajectory) -> Result<ComfortReport, MetricsError> {
    let mut acc = ComfortAccumulator::default();
    acc.add(traj)?;
    Ok(acc.finish().expect("at least one sample per series"))
}

/// One per-point row of the per-sample CSV export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointRecord {
    pub sequence: String,
    pub frame_index: usize,
    pub anchor_index: usize,
    pub anchor_time: f64,
    pub range: String,
    pub gt_x: f64,
    pub gt_y: f64,
    pub gt_z: f64,
    pub pred_x: f64,
    pub pred_y: f64,
    pub pred_z: f64,
    pub d3: f64,
    pub dx: f64,
    pub dy: f64,
}

pub fn write_point_records<W: Write>(writer: W, records: &[PointRecord]) -> Result<(), MetricsError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in records {
        wtr.serialize(r).map_err(|e| MetricsError::Csv(e.to_string()))?;
    }
    wtr.flush().map_err(|e| MetricsError::Csv(e.to_string()))
}
