//! Parametric driving scenarios rendered into canonical sequences.
//!
//! The world is a flat road along the scenario's reference path: six lane
//! lines 3.5 m apart (solid outer edges, dashed inner lines), asphalt with
//! world-fixed value-noise texture, grass beyond the edges and a sky
//! gradient. Poses follow the closed-form path exactly.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{Rgb, RgbImage};
use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use opdd_core::{AnchorMode, CalibrationFile, CameraExtrinsics, CameraIntrinsics, PoseLog};
use serde::{Deserialize, Serialize};

use crate::sequence::{
    frame_file_name, write_meta, DataError, SequenceMeta, Split, CALIB_FILE, FRAMES_DIR, POSES_FILE,
};

pub const LANE_WIDTH: f64 = 3.5;
const LINE_HALF_WIDTH: f64 = 0.075;
const DASH_LENGTH: f64 = 3.0;
const DASH_PERIOD: f64 = 9.0;
const LANE_LINES: i32 = 3;
const JPEG_QUALITY: u8 = 92;

/// Reference path followed by the ego vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathKind {
    Straight,
    /// Constant curvature; positive radius turns left.
    Arc {
        radius: f64,
    },
    /// Lateral shift of `offset` meters (positive to the left) over
    /// `duration` seconds, beginning at `start` seconds.
    LaneChange {
        offset: f64,
        duration: f64,
        start: f64,
    },
}

/// Speed along the path: `initial + acceleration * t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub initial: f64,
    #[serde(default)]
    pub acceleration: f64,
}

impl SpeedProfile {
    pub fn constant(speed: f64) -> Self {
        Self {
            initial: speed,
            acceleration: 0.0,
        }
    }

    pub fn speed(&self, t: f64) -> f64 {
        self.initial + self.acceleration * t
    }

    pub fn distance(&self, t: f64) -> f64 {
        self.initial * t + 0.5 * self.acceleration * t * t
    }
}

/// Physical camera of the rendered sequences. Angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRig {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub pitch_down_deg: f64,
    pub yaw_left_deg: f64,
    pub roll_deg: f64,
    pub mount_height: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            width: 384,
            height: 224,
            fx: 300.0,
            fy: 300.0,
            pitch_down_deg: 4.0,
            yaw_left_deg: 1.0,
            roll_deg: 0.0,
            mount_height: 1.3,
        }
    }
}

impl CameraRig {
    pub fn calibration(&self) -> Result<CalibrationFile, DataError> {
        let bad = |e: opdd_core::CalibError| DataError::InvalidSpec(format!("camera: {e}"));
        let intrinsics = CameraIntrinsics::new(
            self.fx,
            self.fy,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
        .map_err(bad)?;
        let extrinsics = CameraExtrinsics::from_mount_angles(
            self.pitch_down_deg.to_radians(),
            self.yaw_left_deg.to_radians(),
            self.roll_deg.to_radians(),
            self.mount_height,
        )
        .map_err(bad)?;
        Ok(CalibrationFile { intrinsics, extrinsics })
    }
}

fn default_horizon() -> f64 {
    10.0
}

fn default_min_radius() -> f64 {
    10.0
}

fn default_location() -> String {
    "synthetic".into()
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub path: PathKind,
    pub speed: SpeedProfile,
    /// Seconds.
    pub duration: f64,
    pub rate_hz: f64,
    /// Texture noise seed.
    pub seed: u64,
    #[serde(default)]
    pub camera: CameraRig,
    /// Longest anchor offset the sequence must support; duration has to
    /// exceed it by at least one second.
    #[serde(default = "default_horizon")]
    pub anchor_horizon: f64,
    /// Anchor layout recorded in the sequence metadata.
    #[serde(default)]
    pub anchor_mode: AnchorMode,
    #[serde(default = "default_min_radius")]
    pub min_radius: f64,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default = "default_location")]
    pub location: String,
}

impl SyntheticSpec {
    pub fn new(path: PathKind, speed: SpeedProfile, duration: f64, rate_hz: f64, seed: u64) -> Self {
        Self {
            path,
            speed,
            duration,
            rate_hz,
            seed,
            camera: CameraRig::default(),
            anchor_horizon: default_horizon(),
            anchor_mode: AnchorMode::default(),
            min_radius: default_min_radius(),
            split: default_split(),
            location: default_location(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::InvalidSpec(msg));
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return fail(format!("rate_hz must be positive, got {}", self.rate_hz));
        }
        if !(self.anchor_horizon > 0.0) {
            return fail(format!("anchor_horizon must be positive, got {}", self.anchor_horizon));
        }
        if !(self.duration >= self.anchor_horizon + 1.0) || !self.duration.is_finite() {
            return fail(format!(
                "duration {} s is shorter than anchor horizon {} s + 1 s",
                self.duration, self.anchor_horizon
            ));
        }
        let v_end = self.speed.speed(self.duration);
        if !(self.speed.initial >= 0.0 && v_end >= 0.0) || !self.speed.acceleration.is_finite() {
            return fail(format!(
                "speed must stay non-negative (initial {}, final {v_end})",
                self.speed.initial
            ));
        }
        match self.path {
            PathKind::Straight => {}
            PathKind::Arc { radius } => {
                if !(radius.abs() > self.min_radius) || !radius.is_finite() {
                    return fail(format!(
                        "arc radius {radius} m is below the turning minimum {} m",
                        self.min_radius
                    ));
                }
            }
            PathKind::LaneChange {
                offset,
                duration,
                start,
            } => {
                if !(duration > 0.0) || !offset.is_finite() || !start.is_finite() {
                    return fail(format!(
                        "lane change needs finite offset/start and positive duration (offset {offset}, duration {duration})"
                    ));
                }
            }
        }
        self.camera.calibration().map(|_| ())
    }

    /// Frames at `k / rate_hz` for `k < duration * rate_hz`.
    pub fn frame_count(&self) -> usize {
        (self.duration * self.rate_hz).round() as usize
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.frame_count()).map(|k| k as f64 / self.rate_hz).collect()
    }

    /// Ground-plane position and heading (yaw, radians) at time `t`.
    pub fn pose_at(&self, t: f64) -> (Vector3<f64>, f64) {
        let s = self.speed.distance(t);
        match self.path {
            PathKind::Straight => (Vector3::new(s, 0.0, 0.0), 0.0),
            PathKind::Arc { radius } => {
                let theta = s / radius;
                (
                    Vector3::new(radius * theta.sin(), radius * (1.0 - theta.cos()), 0.0),
                    theta,
                )
            }
            PathKind::LaneChange {
                offset,
                duration,
                start,
            } => {
                let u = ((t - start) / duration).clamp(0.0, 1.0);
                let y = offset * u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
                let vy = if (0.0..1.0).contains(&u) {
                    offset * 30.0 * u * u * (1.0 - u) * (1.0 - u) / duration
                } else {
                    0.0
                };
                (Vector3::new(s, y, 0.0), vy.atan2(self.speed.speed(t)))
            }
        }
    }

    pub fn pose_log(&self) -> PoseLog {
        let ts = self.timestamps();
        let (positions, orientations) = ts
            .iter()
            .map(|&t| {
                let (p, yaw) = self.pose_at(t);
                (p, UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw))
            })
            .unzip();
        PoseLog::from_unit(ts, positions, orientations).expect("closed-form poses are valid")
    }

    /// Lateral offset (left positive) and arc length of a ground point
    /// relative to the road centerline.
    fn road_coordinates(&self, x: f64, y: f64) -> (f64, f64) {
        match self.path {
            PathKind::Straight | PathKind::LaneChange { .. } => (y, x),
            PathKind::Arc { radius } => {
                let d = x.hypot(y - radius);
                let angle = (x / radius).atan2((radius - y) / radius);
                (radius.signum() * (radius.abs() - d), radius * angle)
            }
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x1656_67B1) ^ (iy as u64).rotate_left(32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in [0, 1) on a unit lattice.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let a = lattice(seed, ix, iy) * (1.0 - tx) + lattice(seed, ix + 1, iy) * tx;
    let b = lattice(seed, ix, iy + 1) * (1.0 - tx) + lattice(seed, ix + 1, iy + 1) * tx;
    a * (1.0 - ty) + b * ty
}

/// Fraction of the footprint `[center - w/2, center + w/2]` covered by
/// `[lo, hi]`.
fn box_coverage(center: f64, footprint: f64, lo: f64, hi: f64) -> f64 {
    let overlap = (center + footprint / 2.0).min(hi) - (center - footprint / 2.0).max(lo);
    (overlap / footprint).clamp(0.0, 1.0)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t)
}

const SKY_TOP: [f64; 3] = [95.0, 140.0, 205.0];
const SKY_HORIZON: [f64; 3] = [205.0, 218.0, 232.0];
const HAZE: [f64; 3] = [185.0, 195.0, 205.0];
const PAINT: [f64; 3] = [238.0, 236.0, 220.0];

/// Road-surface sample with its pixel footprint measured in road
/// coordinates (meters across and along the road).
struct GroundSample {
    x: f64,
    y: f64,
    lateral: f64,
    along: f64,
    footprint_lateral: f64,
    footprint_along: f64,
}

fn ground_color(spec: &SyntheticSpec, g: &GroundSample) -> [f64; 3] {
    let seed = spec.seed;
    let coarse = value_noise(seed, g.x / 2.0, g.y / 2.0);
    let fine = value_noise(seed.wrapping_add(1), g.x / 0.35, g.y / 0.35);
    let fine_weight = (1.0 - g.footprint_lateral.max(g.footprint_along) / 0.3).clamp(0.0, 1.0);
    let edge = LANE_WIDTH * (LANE_LINES as f64 - 0.5);
    let mut color = if g.lateral.abs() > edge + 0.5 {
        let k = 0.7 + 0.5 * coarse + 0.25 * fine_weight * (fine - 0.5);
        [62.0 * k, 104.0 * k, 48.0 * k]
    } else {
        let k = 78.0 + 34.0 * coarse + 26.0 * fine_weight * (fine - 0.5);
        [k, k, k + 4.0]
    };
    for k in -LANE_LINES..LANE_LINES {
        let line = LANE_WIDTH * (k as f64 + 0.5);
        let across = box_coverage(
            g.lateral,
            g.footprint_lateral,
            line - LINE_HALF_WIDTH,
            line + LINE_HALF_WIDTH,
        );
        if across <= 0.0 {
            continue;
        }
        let solid = k == -LANE_LINES || k == LANE_LINES - 1;
        let cover = if solid {
            across
        } else {
            let phase = g.along.rem_euclid(DASH_PERIOD);
            let dash = box_coverage(phase, g.footprint_along, 0.0, DASH_LENGTH)
                + box_coverage(phase, g.footprint_along, DASH_PERIOD, DASH_PERIOD + DASH_LENGTH);
            across * dash.min(1.0)
        };
        color = mix(color, PAINT, cover);
    }
    color
}

/// Renders the camera view at time `t`.
pub fn render_frame(spec: &SyntheticSpec, calib: &CalibrationFile, t: f64) -> RgbImage {
    let k = &calib.intrinsics;
    let (ego, yaw) = spec.pose_at(t);
    let body = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
    let cam_to_world = body.matrix() * calib.extrinsics.rotation.transpose();
    let center = ego + body * calib.extrinsics.position();
    let cast = |u: f64, v: f64| {
        let dir = (cam_to_world * k.backproject(u, v)).normalize();
        (dir.z < -1e-6)
            .then(|| {
                let dist = -center.z / dir.z;
                let hit = center + dir * dist;
                let (lateral, along) = spec.road_coordinates(hit.x, hit.y);
                (hit, dist, lateral, along)
            })
            .ok_or(dir)
    };

    RgbImage::from_fn(k.width, k.height, |u, v| {
        let (u, v) = (u as f64, v as f64);
        let color = match cast(u, v) {
            Ok((hit, dist, lateral, along)) => {
                // footprint from the neighbouring pixel rays
                let nominal = dist / k.fx;
                let delta = |other: Result<(Vector3<f64>, f64, f64, f64), _>| match other {
                    Ok((_, _, l, a)) => ((l - lateral).abs(), (a - along).abs()),
                    Err(_) => (nominal, nominal),
                };
                let (lu, au) = delta(cast(u + 1.0, v));
                let (lv, av) = delta(cast(u, v + 1.0));
                let sample = GroundSample {
                    x: hit.x,
                    y: hit.y,
                    lateral,
                    along,
                    footprint_lateral: (lu + lv).max(1e-3),
                    footprint_along: (au + av).max(1e-3),
                };
                mix(ground_color(spec, &sample), HAZE, 1.0 - (-dist / 160.0).exp())
            }
            Err(dir) => mix(SKY_HORIZON, SKY_TOP, (dir.z * 4.0).clamp(0.0, 1.0)),
        };
        Rgb(color.map(|c| c.round().clamp(0.0, 255.0) as u8))
    })
}

fn write_jpeg(img: &RgbImage, path: &Path) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    JpegEncoder::new_with_quality(BufWriter::new(file), JPEG_QUALITY)
        .encode_image(img)
        .map_err(|source| DataError::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes the sequence for `spec` into `out` and returns that directory.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<PathBuf, DataError> {
    spec.validate()?;
    let calib = spec.camera.calibration()?;
    let frames_dir = out.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| DataError::io(&frames_dir, e))?;

    let poses = spec.pose_log();
    let poses_path = out.join(POSES_FILE);
    let file = fs::File::create(&poses_path).map_err(|e| DataError::io(&poses_path, e))?;
    poses
        .write_csv(BufWriter::new(file))
        .map_err(|source| DataError::Poses {
            path: poses_path.clone(),
            source,
        })?;
    let calib_path = out.join(CALIB_FILE);
    calib.write(&calib_path).map_err(|source| DataError::Calibration {
        path: calib_path.clone(),
        source,
    })?;
    write_meta(
        out,
        &SequenceMeta {
            rate_hz: spec.rate_hz,
            location: spec.location.clone(),
            split: spec.split,
            anchor_mode: Some(spec.anchor_mode),
        },
    )?;
    for (i, &t) in poses.timestamps().iter().enumerate() {
        write_jpeg(&render_frame(spec, &calib, t), &frames_dir.join(frame_file_name(i)))?;
    }
    Ok(out.to_path_buf())
}

/// The 20-sequence desk-scale scenario set: straight roads with varied
/// speed profiles, left and right arcs, and lane changes. 12 s at 10 Hz.
pub fn desk_suite(seed: u64) -> Vec<(String, SyntheticSpec)> {
    let mut out = Vec::new();
    let mut push = |kind: &str, path: PathKind, v0: f64, a: f64| {
        let i = out.len();
        let spec = SyntheticSpec::new(
            path,
            SpeedProfile {
                initial: v0,
                acceleration: a,
            },
            12.0,
            10.0,
            seed.wrapping_mul(1000).wrapping_add(i as u64),
        );
        out.push((format!("{i:02}_{kind}"), spec));
    };
    for (v0, a) in [
        (8.0, 0.0),
        (12.0, 0.5),
        (16.0, 0.0),
        (20.0, -0.6),
        (24.0, 0.0),
        (10.0, 1.0),
    ] {
        push("straight", PathKind::Straight, v0, a);
    }
    for (radius, v0) in [
        (40.0, 8.0),
        (-40.0, 8.0),
        (80.0, 11.0),
        (-80.0, 11.0),
        (150.0, 14.0),
        (-150.0, 14.0),
        (300.0, 18.0),
        (-300.0, 18.0),
    ] {
        push("arc", PathKind::Arc { radius }, v0, 0.0);
    }
    for (offset, duration, start, v0) in [
        (3.5, 3.0, 0.5, 12.0),
        (-3.5, 3.0, 0.5, 12.0),
        (3.5, 4.0, 1.5, 16.0),
        (-3.5, 4.0, 1.5, 16.0),
        (3.5, 3.5, 3.0, 20.0),
        (-3.5, 3.5, 3.0, 20.0),
    ] {
        push(
            "lane_change",
            PathKind::LaneChange {
                offset,
                duration,
                start,
            },
            v0,
            0.0,
        );
    }
    out
}
