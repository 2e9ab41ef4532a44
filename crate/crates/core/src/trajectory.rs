//! Time-based anchors, pose logs and ego-frame ground-truth trajectories.
//!
//! The ego frame is right-handed with x forward, y to the left and z up.
//! Pose orientations give the vehicle attitude: they rotate body-frame
//! vectors into the global frame.

use std::io::{Read, Write};

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Future offsets (seconds) used by the comma-style ground truth.
pub const COMMA_ANCHOR_TIMES: [f64; 33] = [
    0., 0.00976562, 0.0390625, 0.08789062, 0.15625, 0.24414062, 0.3515625, 0.47851562, 0.625, 0.79101562, 0.9765625,
    1.18164062, 1.40625, 1.65039062, 1.9140625, 2.19726562, 2.5, 2.82226562, 3.1640625, 3.52539062, 3.90625,
    4.30664062, 4.7265625, 5.16601562, 5.625, 6.10351562, 6.6015625, 7.11914062, 7.65625, 8.21289062, 8.7890625,
    9.38476562, 10.,
];

const QUATERNION_NORM_TOL: f64 = 1e-6;
const HORIZON_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("invalid anchor set: {0}")]
    InvalidAnchors(String),
    #[error("invalid pose log: {0}")]
    InvalidPoseLog(String),
    #[error("reference index {index} out of range for log of {len} poses")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("pose log ends at t={available:.6}, trajectory needs t={needed:.6}")]
    InsufficientHorizon { needed: f64, available: f64 },
    #[error("trajectory has {points} points but {anchors} anchors")]
    LengthMismatch { points: usize, anchors: usize },
    #[error("trajectory contains non-finite coordinates")]
    NonFinite,
    #[error("pose csv: {0}")]
    Csv(String),
}

/// Ordered future time offsets at which trajectory points are defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    times: Vec<f64>,
}

impl AnchorSet {
    pub fn new(times: Vec<f64>) -> Result<Self, TrajectoryError> {
        if times.is_empty() {
            return Err(TrajectoryError::InvalidAnchors("no anchors".into()));
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(TrajectoryError::InvalidAnchors(
                "anchors must be finite and non-negative".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TrajectoryError::InvalidAnchors(
                "anchors must be strictly increasing".into(),
            ));
        }
        Ok(Self { times })
    }

    /// The 33 quadratically spaced anchors over 10 s, including T = 0.
    pub fn comma() -> Self {
        Self {
            times: COMMA_ANCHOR_TIMES.to_vec(),
        }
    }

    /// `n` evenly spaced strictly-future anchors ending at `horizon`.
    pub fn uniform(n: usize, horizon: f64) -> Result<Self, TrajectoryError> {
        if n == 0 {
            return Err(TrajectoryError::InvalidAnchors("anchor count must be >= 1".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(TrajectoryError::InvalidAnchors(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Self::new((0..n).map(|k| horizon * (k + 1) as f64 / n as f64).collect())
    }

    /// Ten points over five seconds, matching 2 Hz data.
    pub fn nuscenes() -> Self {
        Self::uniform(10, 5.0).expect("constant anchor set is valid")
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("anchor set is never empty")
    }
}

/// Named anchor layouts a model head and a dataset can be built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// 33 quadratically spaced anchors over 10 s.
    #[default]
    Comma,
    /// 10 anchors at 0.5 s spacing over 5 s.
    Nuscenes,
}

impl AnchorMode {
    pub fn anchors(self) -> AnchorSet {
        match self {
            Self::Comma => AnchorSet::comma(),
            Self::Nuscenes => AnchorSet::nuscenes(),
        }
    }
}

impl std::fmt::Display for AnchorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Comma => "comma",
            Self::Nuscenes => "nuscenes",
        })
    }
}

impl std::str::FromStr for AnchorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "comma" => Ok(Self::Comma),
            "nuscenes" => Ok(Self::Nuscenes),
            other => Err(format!("unknown anchor mode '{other}' (expected comma or nuscenes)")),
        }
    }
}

/// Timestamped global poses of one recorded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseLog {
    timestamps: Vec<f64>,
    positions: Vec<Vector3<f64>>,
    orientations: Vec<UnitQuaternion<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseRow {
    frame_index: usize,
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
}

impl PoseLog {
    /// Builds a log from raw quaternions, rejecting any whose norm deviates
    /// from one by more than 1e-6.
    pub fn new(
        timestamps: Vec<f64>,
        positions: Vec<Vector3<f64>>,
        quaternions: Vec<Quaternion<f64>>,
    ) -> Result<Self, TrajectoryError> {
        let n = timestamps.len();
        if positions.len() != n || quaternions.len() != n {
            return Err(TrajectoryError::InvalidPoseLog(format!(
                "length mismatch: {} timestamps, {} positions, {} orientations",
                n,
                positions.len(),
                quaternions.len()
            )));
        }
        if n < 2 {
            return Err(TrajectoryError::InvalidPoseLog(format!(
                "need at least 2 poses, got {n}"
            )));
        }
        if timestamps.iter().any(|t| !t.is_finite()) || positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(TrajectoryError::InvalidPoseLog("non-finite pose values".into()));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(TrajectoryError::InvalidPoseLog(format!(
                "timestamps not strictly increasing at row {}",
                i + 1
            )));
        }
        let mut orientations = Vec::with_capacity(n);
        for (i, q) in quaternions.into_iter().enumerate() {
            let norm = q.norm();
            if !((norm - 1.0).abs() <= QUATERNION_NORM_TOL) {
                return Err(TrajectoryError::InvalidPoseLog(format!(
                    "quaternion at row {i} has norm {norm}"
                )));
            }
            orientations.push(UnitQuaternion::new_normalize(q));
        }
        Ok(Self {
            timestamps,
            positions,
            orientations,
        })
    }

    pub fn from_unit(
        timestamps: Vec<f64>,
        positions: Vec<Vector3<f64>>,
        orientations: Vec<UnitQuaternion<f64>>,
    ) -> Result<Self, TrajectoryError> {
        Self::new(
            timestamps,
            positions,
            orientations.into_iter().map(|q| q.into_inner()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn orientations(&self) -> &[UnitQuaternion<f64>] {
        &self.orientations
    }

    /// Applies a rigid transform to every pose (re-expresses the log in
    /// another global frame).
    pub fn transformed(&self, iso: &Isometry3<f64>) -> Self {
        Self {
            timestamps: self.timestamps.clone(),
            positions: self
                .positions
                .iter()
                .map(|p| iso.transform_vector(p) + iso.translation.vector)
                .collect(),
            orientations: self.orientations.iter().map(|q| iso.rotation * q).collect(),
        }
    }

    /// Reads the `frame_index,t,x,y,z,qw,qx,qy,qz` CSV format.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, TrajectoryError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(|e| TrajectoryError::Csv(e.to_string()))?.clone();
        let expected = ["frame_index", "t", "x", "y", "z", "qw", "qx", "qy", "qz"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(TrajectoryError::Csv(format!(
                "unexpected header {:?}, expected {}",
                headers,
                expected.join(",")
            )));
        }
        let (mut ts, mut ps, mut qs) = (Vec::new(), Vec::new(), Vec::new());
        for (i, row) in rdr.deserialize::<PoseRow>().enumerate() {
            let row = row.map_err(|e| TrajectoryError::Csv(e.to_string()))?;
            if row.frame_index != i {
                return Err(TrajectoryError::Csv(format!(
                    "row {i} has frame_index {}",
                    row.frame_index
                )));
            }
            ts.push(row.t);
            ps.push(Vector3::new(row.x, row.y, row.z));
            qs.push(Quaternion::new(row.qw, row.qx, row.qy, row.qz));
        }
        Self::new(ts, ps, qs)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TrajectoryError> {
        let mut wtr = csv::Writer::from_writer(writer);
        for (i, ((t, p), q)) in self
            .timestamps
            .iter()
            .zip(&self.positions)
            .zip(&self.orientations)
            .enumerate()
        {
            wtr.serialize(PoseRow {
                frame_index: i,
                t: *t,
                x: p.x,
                y: p.y,
                z: p.z,
                qw: q.w,
                qx: q.i,
                qy: q.j,
                qz: q.k,
            })
            .map_err(|e| TrajectoryError::Csv(e.to_string()))?;
        }
        wtr.flush().map_err(|e| TrajectoryError::Csv(e.to_string()))
    }

    /// Position at absolute time `t`, linearly interpolated between the two
    /// bracketing samples.
    pub fn interpolate_position(&self, t: f64) -> Result<Vector3<f64>, TrajectoryError> {
        let first = self.timestamps[0];
        let last = *self.timestamps.last().expect("non-empty");
        if t > last + HORIZON_SLACK {
            return Err(TrajectoryError::InsufficientHorizon {
                needed: t,
                available: last,
            });
        }
        if t < first - HORIZON_SLACK {
            return Err(TrajectoryError::InvalidPoseLog(format!(
                "time {t} precedes the log start {first}"
            )));
        }
        let upper = self.timestamps.partition_point(|&s| s <= t);
        let i = upper.saturating_sub(1).min(self.len() - 2);
        let (t0, t1) = (self.timestamps[i], self.timestamps[i + 1]);
        let alpha = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        Ok(self.positions[i].lerp(&self.positions[i + 1], alpha))
    }
}

/// Rigid transform taking global coordinates into the ego frame at `ref_index`.
pub fn global_to_ego(log: &PoseLog, ref_index: usize) -> Result<Isometry3<f64>, TrajectoryError> {
    if ref_index >= log.len() {
        return Err(TrajectoryError::IndexOutOfRange {
            index: ref_index,
            len: log.len(),
        });
    }
    let pose = Isometry3::from_parts(
        Translation3::from(log.positions[ref_index]),
        log.orientations[ref_index],
    );
    Ok(pose.inverse())
}

/// N ego-frame points, one per anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoTrajectory {
    anchors: AnchorSet,
    points: Vec<Vector3<f64>>,
}

impl EgoTrajectory {
    pub fn new(anchors: AnchorSet, points: Vec<Vector3<f64>>) -> Result<Self, TrajectoryError> {
        if points.len() != anchors.len() {
            return Err(TrajectoryError::LengthMismatch {
                points: points.len(),
                anchors: anchors.len(),
            });
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(TrajectoryError::NonFinite);
        }
        Ok(Self { anchors, points })
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_arrays(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p.x, p.y, p.z]).collect()
    }
}

/// Ego-frame ground truth at `ref_index`: for each anchor T the position at
/// `t_ref + T`, linearly interpolated and mapped through [`global_to_ego`].
pub fn ground_truth_trajectory(
    log: &PoseLog,
    ref_index: usize,
    anchors: &AnchorSet,
) -> Result<EgoTrajectory, TrajectoryError> {
    let to_ego = global_to_ego(log, ref_index)?;
    let t_ref = log.timestamps[ref_index];
    let available = *log.timestamps.last().expect("non-empty");
    if t_ref + anchors.horizon() > available + HORIZON_SLACK {
        return Err(TrajectoryError::InsufficientHorizon {
            needed: t_ref + anchors.horizon(),
            available,
        });
    }
    let points = anchors
        .times()
        .iter()
        .map(|&dt| {
            let p = log.interpolate_position(t_ref + dt)?;
            Ok(to_ego.transform_vector(&p) + to_ego.translation.vector)
        })
        .collect::<Result<Vec<_>, TrajectoryError>>()?;
    EgoTrajectory::new(anchors.clone(), points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn yaw(angle: f64) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle)
    }

    fn arc_log(rate_hz: f64, duration: f64, speed: f64, radius: f64) -> PoseLog {
        let n = (duration * rate_hz).round() as usize + 1;
        let mut ts = Vec::new();
        let mut ps = Vec::new();
        let mut qs = Vec::new();
        for k in 0..n {
            let t = k as f64 / rate_hz;
            let theta = speed * t / radius;
            ts.push(t);
            ps.push(Vector3::new(radius * theta.sin(), radius * (1.0 - theta.cos()), 0.0));
            qs.push(yaw(theta));
        }
        PoseLog::from_unit(ts, ps, qs).unwrap()
    }

    fn arc_oracle(t: f64, speed: f64, radius: f64) -> Vector3<f64> {
        let theta = speed * t / radius;
        Vector3::new(radius * theta.sin(), radius * (1.0 - theta.cos()), 0.0)
    }

    #[test]
    fn comma_anchors_match_reference_values_and_closed_form() {
        let a = AnchorSet::comma();
        assert_eq!(a.len(), 33);
        assert_eq!(a.times()[0], 0.0);
        assert_eq!(a.times()[1], 0.00976562);
        assert_eq!(a.times()[16], 2.5);
        assert_eq!(a.horizon(), 10.0);
        for (i, &t) in a.times().iter().enumerate() {
            let closed = 10.0 * (i as f64 / 32.0).powi(2);
            assert!((t - closed).abs() <= 1e-6, "anchor {i}: {t} vs {closed}");
        }
        let gaps: Vec<f64> = a.times().windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.windows(2).all(|g| g[1] >= g[0]));
    }

    #[test]
    fn uniform_anchor_sets() {
        let a = AnchorSet::uniform(10, 5.0).unwrap();
        let expected: Vec<f64> = (1..=10).map(|k| 0.5 * k as f64).collect();
        for (t, e) in a.times().iter().zip(&expected) {
            assert_relative_eq!(*t, *e, epsilon = 1e-12);
        }
        assert_eq!(AnchorSet::uniform(1, 1.0).unwrap().times(), &[1.0]);
        assert_eq!(AnchorSet::uniform(4, 2.0).unwrap().times(), &[0.5, 1.0, 1.5, 2.0]);
        assert!(AnchorSet::uniform(0, 5.0).is_err());
        assert!(AnchorSet::uniform(3, 0.0).is_err());
        assert!(AnchorSet::new(vec![0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn ego_transform_cases() {
        let ts = vec![0.0, 1.0];
        let log = PoseLog::from_unit(
            ts.clone(),
            vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)],
            vec![UnitQuaternion::identity(); 2],
        )
        .unwrap();
        let iso = global_to_ego(&log, 0).unwrap();
        assert!((iso.to_homogeneous() - nalgebra::Matrix4::identity()).amax() < 1e-15);

        let log = PoseLog::from_unit(
            ts.clone(),
            vec![Vector3::new(10.0, 5.0, 0.0), Vector3::new(11.0, 5.0, 0.0)],
            vec![UnitQuaternion::identity(); 2],
        )
        .unwrap();
        let iso = global_to_ego(&log, 0).unwrap();
        let p = iso * nalgebra::Point3::new(12.0, 4.0, 1.0);
        assert_relative_eq!(p.coords, Vector3::new(2.0, -1.0, 1.0), epsilon = 1e-12);

        // vehicle at the origin facing global +y: a point 1 m along global +x
        // is on its right. Hand-computed q = (cos 45°, 0, 0, sin 45°), and
        // R(q)^T (1, 0, 0) = (cos 90°, -sin 90°, 0).
        let half = FRAC_PI_2 / 2.0;
        let q = Quaternion::new(half.cos(), 0.0, 0.0, half.sin());
        let log = PoseLog::new(ts, vec![Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0)], vec![q, q]).unwrap();
        let iso = global_to_ego(&log, 0).unwrap();
        let p = iso * nalgebra::Point3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(p.coords, Vector3::new(0.0, -1.0, 0.0), epsilon = 1e-12);

        assert!(matches!(
            global_to_ego(&log, 2),
            Err(TrajectoryError::IndexOutOfRange { index: 2, len: 2 })
        ));
    }

    #[test]
    fn stationary_and_constant_velocity_ground_truth() {
        let anchors = AnchorSet::comma();
        let n = 301;
        let ts: Vec<f64> = (0..n).map(|k| k as f64 / 20.0).collect();
        let still = PoseLog::from_unit(ts.clone(), vec![Vector3::new(3.0, -2.0, 0.5); n], vec![yaw(0.7); n]).unwrap();
        let gt = ground_truth_trajectory(&still, 0, &anchors).unwrap();
        assert!(gt.points().iter().all(|p| p.norm() < 1e-12));

        let heading = yaw(0.3);
        let fwd = heading * Vector3::x();
        let moving = PoseLog::from_unit(
            ts.clone(),
            ts.iter().map(|t| fwd * (10.0 * t)).collect(),
            vec![heading; n],
        )
        .unwrap();
        let gt = ground_truth_trajectory(&moving, 40, &anchors).unwrap();
        for (p, t) in gt.points().iter().zip(anchors.times()) {
            assert_relative_eq!(*p, Vector3::new(10.0 * t, 0.0, 0.0), epsilon = 1e-9);
        }
    }

    #[test]
    fn arc_matches_analytic_oracle() {
        let log = arc_log(100.0, 12.0, 10.0, 100.0);
        let anchors = AnchorSet::comma();
        let gt = ground_truth_trajectory(&log, 0, &anchors).unwrap();
        for (p, &t) in gt.points().iter().zip(anchors.times()) {
            assert!((p - arc_oracle(t, 10.0, 100.0)).norm() < 1e-3);
        }
    }

    #[test]
    fn denser_logs_converge() {
        let anchors = AnchorSet::comma();
        let mut previous = f64::INFINITY;
        for rate in [5.0, 10.0, 20.0, 40.0, 80.0] {
            let log = arc_log(rate, 11.0, 10.0, 100.0);
            let gt = ground_truth_trajectory(&log, 0, &anchors).unwrap();
            let dev = gt
                .points()
                .iter()
                .zip(anchors.times())
                .map(|(p, &t)| (p - arc_oracle(t, 10.0, 100.0)).norm())
                .fold(0.0, f64::max);
            assert!(dev <= previous, "rate {rate}: {dev} > {previous}");
            previous = dev;
        }
    }

    #[test]
    fn insufficient_horizon_is_reported() {
        let log = arc_log(20.0, 5.0, 10.0, 100.0);
        let err = ground_truth_trajectory(&log, 0, &AnchorSet::comma()).unwrap_err();
        assert!(matches!(err, TrajectoryError::InsufficientHorizon { .. }));
        assert!(ground_truth_trajectory(&log, 0, &AnchorSet::nuscenes()).is_ok());
        assert!(ground_truth_trajectory(&log, 1, &AnchorSet::nuscenes()).is_err());
    }

    #[test]
    fn pose_log_validation() {
        let q = Quaternion::new(1.0, 0.0, 0.0, 0.0);
        let bad_q = Quaternion::new(1.01, 0.0, 0.0, 0.0);
        let p = Vector3::zeros();
        assert!(PoseLog::new(vec![0.0], vec![p], vec![q]).is_err());
        assert!(PoseLog::new(vec![0.0, 0.0], vec![p, p], vec![q, q]).is_err());
        assert!(PoseLog::new(vec![0.0, 1.0], vec![p, p], vec![q, bad_q]).is_err());
        assert!(PoseLog::new(vec![0.0, 1.0], vec![p], vec![q, q]).is_err());
    }

    #[test]
    fn pose_csv_round_trip() {
        let log = arc_log(10.0, 2.0, 10.0, 50.0);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("frame_index,t,x,y,z,qw,qx,qy,qz\n"));
        let back = PoseLog::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, log);

        let bad = "frame,t,x,y,z,qw,qx,qy,qz\n0,0,0,0,0,1,0,0,0\n";
        assert!(PoseLog::read_csv(bad.as_bytes()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn ground_truth_is_frame_independent(
                tx in -1e3f64..1e3, ty in -1e3f64..1e3, tz in -10f64..10.0,
                roll in -3.1f64..3.1, pitch in -1.5f64..1.5, yaw_angle in -3.1f64..3.1,
                radius in 20f64..400.0, speed in 1f64..30.0, ref_index in 0usize..20,
            ) {
                let log = arc_log(20.0, 12.0, speed, radius);
                let iso = Isometry3::from_parts(
                    Translation3::new(tx, ty, tz),
                    UnitQuaternion::from_euler_angles(roll, pitch, yaw_angle),
                );
                let moved = log.transformed(&iso);
                let anchors = AnchorSet::comma();
                let a = ground_truth_trajectory(&log, ref_index, &anchors).unwrap();
                let b = ground_truth_trajectory(&moved, ref_index, &anchors).unwrap();
                for (p, q) in a.points().iter().zip(b.points()) {
                    prop_assert!((p - q).norm() < 1e-9, "{p} vs {q}");
                }
                prop_assert!(a.points()[0].norm() < 1e-9);
            }
        }
    }
}
