//! Pinhole camera models and the rotation-only warp that maps raw frames into
//! the fixed "virtual camera" view consumed by the network.
//!
//! Frames:
//! - road (vehicle) frame: x forward, y left, z up;
//! - camera frame: x right, y down, z along the optical axis.
//!
//! Extrinsic rotations map road-frame vectors into the camera frame.

use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of the normalized model input.
pub const MODEL_INPUT_WIDTH: u32 = 256;
/// Height of the normalized model input.
pub const MODEL_INPUT_HEIGHT: u32 = 128;
/// Two stacked RGB frames.
pub const INPUT_CHANNELS: usize = 6;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal (max |R^T R - I| = {0:e})")]
    NonOrthonormal(f64),
    #[error("rotation has determinant {0}, expected +1")]
    Improper(f64),
    #[error("camera height above ground must be positive, got {0}")]
    InvalidHeight(f64),
    #[error("virtual camera must be {expected_w}x{expected_h}, got {w}x{h}")]
    VirtualSize {
        expected_w: u32,
        expected_h: u32,
        w: u32,
        h: u32,
    },
    #[error("homography is singular")]
    SingularHomography,
    #[error("image is empty")]
    EmptyImage,
    #[error("frame size mismatch: expected {expected:?}, got {actual:?}")]
    SizeMismatch { expected: (u32, u32), actual: (u32, u32) },
    #[error("malformed calibration file: {0}")]
    Malformed(String),
    #[error("calibration i/o: {0}")]
    Io(String),
}

/// Pinhole intrinsics of a camera producing `width x height` images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, CalibError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite {
            return Err(CalibError::InvalidIntrinsics("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(CalibError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(CalibError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Projects a camera-frame point; `None` when it lies behind the camera.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p_cam.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    /// Camera-frame ray through pixel `(u, v)`, scaled to unit depth.
    pub fn backproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Axis permutation taking road-frame vectors to an ideally mounted camera
/// (optical axis forward, image x to the right, image y down).
pub fn road_to_camera_axes() -> Matrix3<f64> {
    Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0)
}

fn check_rotation(rotation: &Matrix3<f64>) -> Result<(), CalibError> {
    if rotation.iter().any(|v| !v.is_finite()) {
        return Err(CalibError::NonOrthonormal(f64::INFINITY));
    }
    let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
    if err > ORTHONORMAL_TOL {
        return Err(CalibError::NonOrthonormal(err));
    }
    let det = rotation.determinant();
    if (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(CalibError::Improper(det));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    /// Road frame -> camera frame.
    pub rotation: Matrix3<f64>,
    /// Meters.
    pub height_above_ground: f64,
}

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, height_above_ground: f64) -> Result<Self, CalibError> {
        let e = Self {
            rotation,
            height_above_ground,
        };
        e.validate()?;
        Ok(e)
    }

    /// Extrinsics of a camera tilted away from the ideal forward mount.
    ///
    /// `pitch_down` rotates the optical axis toward the ground, `yaw_left`
    /// toward the vehicle's left, `roll` about the optical axis. Radians.
    pub fn from_mount_angles(
        pitch_down: f64,
        yaw_left: f64,
        roll: f64,
        height_above_ground: f64,
    ) -> Result<Self, CalibError> {
        let body = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw_left)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), pitch_down)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), roll);
        Self::new(road_to_camera_axes() * body.matrix().transpose(), height_above_ground)
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        check_rotation(&self.rotation)?;
        if !(self.height_above_ground > 0.0) {
            return Err(CalibError::InvalidHeight(self.height_above_ground));
        }
        Ok(())
    }

    /// Position of the camera center in the road frame (the ego origin sits
    /// on the ground directly below it).
    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.height_above_ground)
    }
}

/// The canonical camera every frame is warped into.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualCamera {
    pub intrinsics: CameraIntrinsics,
    /// Road frame -> virtual camera frame.
    pub rotation: Matrix3<f64>,
}

impl Default for VirtualCamera {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics {
                fx: 256.0,
                fy: 256.0,
                cx: 128.0,
                cy: 64.0,
                width: MODEL_INPUT_WIDTH,
                height: MODEL_INPUT_HEIGHT,
            },
            rotation: road_to_camera_axes(),
        }
    }
}

impl VirtualCamera {
    pub fn with_intrinsics(intrinsics: CameraIntrinsics) -> Result<Self, CalibError> {
        let cam = Self {
            intrinsics,
            ..Self::default()
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        self.intrinsics.validate()?;
        if self.intrinsics.width != MODEL_INPUT_WIDTH || self.intrinsics.height != MODEL_INPUT_HEIGHT {
            return Err(CalibError::VirtualSize {
                expected_w: MODEL_INPUT_WIDTH,
                expected_h: MODEL_INPUT_HEIGHT,
                w: self.intrinsics.width,
                h: self.intrinsics.height,
            });
        }
        check_rotation(&self.rotation)
    }
}

/// Homography taking virtual-camera pixels (homogeneous) to source pixels:
/// `K_src * R_rel * K_virt^-1` with `R_rel` the virtual -> source rotation.
///
/// Translation between the two optical centers is ignored (plane at
/// infinity), which is exact for distant scenery.
pub fn rotation_homography(
    src: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    virt: &VirtualCamera,
) -> Result<Matrix3<f64>, CalibError> {
    src.validate()?;
    extr.validate()?;
    virt.validate()?;
    let r_rel = extr.rotation * virt.rotation.transpose();
    Ok(src.matrix() * r_rel * virt.intrinsics.inverse_matrix())
}

fn is_singular(h: &Matrix3<f64>) -> bool {
    let scale = h.amax();
    if !(scale > 0.0) || h.iter().any(|v| !v.is_finite()) {
        return true;
    }
    (h / scale).determinant().abs() < 1e-12
}

/// Bilinear sample at a continuous source position; `None` when outside the
/// pixel-center grid.
fn sample_bilinear(image: &RgbImage, x: f64, y: f64) -> Option<[f64; 3]> {
    let (w, h) = image.dimensions();
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    if !(x >= 0.0 && y >= 0.0 && x <= max_x && y <= max_y) {
        return None;
    }
    let x0 = (x.floor() as u32).min(w - 1);
    let y0 = (y.floor() as u32).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p00 = image.get_pixel(x0, y0).0;
    let p10 = image.get_pixel(x1, y0).0;
    let p01 = image.get_pixel(x0, y1).0;
    let p11 = image.get_pixel(x1, y1).0;
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
        let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        out[c] = top * (1.0 - fy) + bottom * fy;
    }
    Some(out)
}

/// Inverse-maps every output pixel through `h` (output -> source) and samples
/// the source bilinearly. Samples outside the source are zero.
pub fn warp_frame(image: &RgbImage, h: &Matrix3<f64>, out_width: u32, out_height: u32) -> Result<RgbImage, CalibError> {
    if image.width() == 0 || image.height() == 0 || out_width == 0 || out_height == 0 {
        return Err(CalibError::EmptyImage);
    }
    if is_singular(h) {
        return Err(CalibError::SingularHomography);
    }
    let mut out = RgbImage::new(out_width, out_height);
    for (u, v, px) in out.enumerate_pixels_mut() {
        let p = h * Vector3::new(u as f64, v as f64, 1.0);
        if p.z <= 0.0 {
            continue;
        }
        if let Some(rgb) = sample_bilinear(image, p.x / p.z, p.y / p.z) {
            *px = Rgb(rgb.map(|c| c.round().clamp(0.0, 255.0) as u8));
        }
    }
    Ok(out)
}

/// A `(6, 128, 256)` channel-major network input with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    data: Vec<f32>,
}

impl InputTensor {
    pub const SHAPE: [usize; 3] = [INPUT_CHANNELS, MODEL_INPUT_HEIGHT as usize, MODEL_INPUT_WIDTH as usize];

    pub fn shape(&self) -> [usize; 3] {
        Self::SHAPE
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        let [_, h, w] = Self::SHAPE;
        self.data[(channel * h + row) * w + col]
    }
}

/// Stacks two warped frames as `[prev RGB, current RGB]`, scaled to `[0, 1]`.
pub fn stack_frames(frame_t: &RgbImage, frame_t_prev: &RgbImage) -> Result<InputTensor, CalibError> {
    let expected = (MODEL_INPUT_WIDTH, MODEL_INPUT_HEIGHT);
    for frame in [frame_t_prev, frame_t] {
        if frame.dimensions() != expected {
            return Err(CalibError::SizeMismatch {
                expected,
                actual: frame.dimensions(),
            });
        }
    }
    let plane = (MODEL_INPUT_WIDTH * MODEL_INPUT_HEIGHT) as usize;
    let mut data = vec![0f32; INPUT_CHANNELS * plane];
    for (slot, frame) in [frame_t_prev, frame_t].into_iter().enumerate() {
        for (i, px) in frame.pixels().enumerate() {
            for c in 0..3 {
                data[(slot * 3 + c) * plane + i] = px.0[c] as f32 / 255.0;
            }
        }
    }
    Ok(InputTensor { data })
}

#[derive(Debug, Serialize, Deserialize)]
struct IntrinsicsJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExtrinsicsJson {
    rotation: Vec<f64>,
    height: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibrationJson {
    intrinsics: IntrinsicsJson,
    extrinsics: ExtrinsicsJson,
}

/// Per-sequence `calib.json`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationFile {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

impl CalibrationFile {
    pub fn from_json_str(text: &str) -> Result<Self, CalibError> {
        let raw: CalibrationJson = serde_json::from_str(text).map_err(|e| CalibError::Malformed(e.to_string()))?;
        if raw.extrinsics.rotation.len() != 9 {
            return Err(CalibError::Malformed(format!(
                "extrinsics.rotation must hold 9 values, got {}",
                raw.extrinsics.rotation.len()
            )));
        }
        let i = raw.intrinsics;
        let intrinsics = CameraIntrinsics::new(i.fx, i.fy, i.cx, i.cy, i.width, i.height)?;
        let rotation = Matrix3::from_row_slice(&raw.extrinsics.rotation);
        let extrinsics = CameraExtrinsics::new(rotation, raw.extrinsics.height)?;
        Ok(Self { intrinsics, extrinsics })
    }

    pub fn to_json_string(&self) -> String {
        let k = &self.intrinsics;
        let r = &self.extrinsics.rotation;
        let raw = CalibrationJson {
            intrinsics: IntrinsicsJson {
                fx: k.fx,
                fy: k.fy,
                cx: k.cx,
                cy: k.cy,
                width: k.width,
                height: k.height,
            },
            extrinsics: ExtrinsicsJson {
                rotation: (0..3).flat_map(|row| (0..3).map(move |col| r[(row, col)])).collect(),
                height: self.extrinsics.height_above_ground,
            },
        };
        serde_json::to_string_pretty(&raw).expect("calibration serializes")
    }

    pub fn read(path: &Path) -> Result<Self, CalibError> {
        let text = std::fs::read_to_string(path).map_err(|e| CalibError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), CalibError> {
        std::fs::write(path, self.to_json_string()).map_err(|e| CalibError::Io(format!("{}: {e}", path.display())))
    }

    /// Source -> virtual mapping for this sequence.
    pub fn homography_to(&self, virt: &VirtualCamera) -> Result<Matrix3<f64>, CalibError> {
        rotation_homography(&self.intrinsics, &self.extrinsics, virt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let r = 40.0 + 150.0 * (x as f64 / w as f64);
            let g = 30.0 + 180.0 * (y as f64 / h as f64);
            let b = 128.0 + 60.0 * ((x as f64) * 0.05).sin() * ((y as f64) * 0.07).cos();
            Rgb([r as u8, g as u8, b as u8])
        })
    }

    #[test]
    fn identity_rotation_and_equal_intrinsics_give_identity() {
        let virt = VirtualCamera::default();
        let extr = CameraExtrinsics::new(road_to_camera_axes(), 1.2).unwrap();
        let h = rotation_homography(&virt.intrinsics, &extr, &virt).unwrap();
        assert!((h - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn doubled_focal_length_doubles_offsets() {
        let virt = VirtualCamera::default();
        let src = CameraIntrinsics::new(512.0, 512.0, 128.0, 64.0, 256, 128).unwrap();
        let extr = CameraExtrinsics::new(road_to_camera_axes(), 1.2).unwrap();
        let h = rotation_homography(&src, &extr, &virt).unwrap();
        let map = |u: f64, v: f64| {
            let p = h * Vector3::new(u, v, 1.0);
            (p.x / p.z, p.y / p.z)
        };
        let (u, v) = map(128.0, 64.0);
        assert_relative_eq!(u, 128.0, epsilon = 1e-12);
        assert_relative_eq!(v, 64.0, epsilon = 1e-12);
        let (u, v) = map(138.0, 64.0);
        assert_relative_eq!(u, 148.0, epsilon = 1e-12);
        assert_relative_eq!(v, 64.0, epsilon = 1e-12);
    }

    #[test]
    fn pitched_camera_matches_direct_projection_of_far_point() {
        let virt = VirtualCamera::default();
        let src = CameraIntrinsics::new(300.0, 300.0, 192.0, 112.0, 384, 224).unwrap();
        let extr = CameraExtrinsics::from_mount_angles(5f64.to_radians(), 0.0, 0.0, 1.3).unwrap();
        let h = rotation_homography(&src, &extr, &virt).unwrap();

        let far = Vector3::new(1000.0, 0.0, 0.0);
        let pv = virt.intrinsics.project(&(virt.rotation * far)).unwrap();
        let ps = src.project(&(extr.rotation * far)).unwrap();
        // pitched down: distant point rises above the principal row
        let expected_row = 112.0 - 300.0 * 5f64.to_radians().tan();
        assert_relative_eq!(ps.y, expected_row, epsilon = 1e-9);
        assert_relative_eq!(pv.y, 64.0, epsilon = 1e-9);

        let mapped = h * Vector3::new(pv.x, pv.y, 1.0);
        assert_relative_eq!(mapped.x / mapped.z, ps.x, epsilon = 1e-9);
        assert_relative_eq!(mapped.y / mapped.z, ps.y, epsilon = 1e-9);
    }

    #[test]
    fn rejects_bad_calibration() {
        let mut r = road_to_camera_axes();
        r[(0, 0)] = 0.1;
        assert!(matches!(
            CameraExtrinsics::new(r, 1.0),
            Err(CalibError::NonOrthonormal(_))
        ));
        let reflect = -road_to_camera_axes();
        assert!(matches!(
            CameraExtrinsics::new(reflect, 1.0),
            Err(CalibError::Improper(_))
        ));
        assert!(matches!(
            CameraExtrinsics::new(road_to_camera_axes(), 0.0),
            Err(CalibError::InvalidHeight(_))
        ));
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 10.0, 1.0, 10, 10).is_err());
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = gradient_image(256, 128);
        let out = warp_frame(&img, &Matrix3::identity(), 256, 128).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = RgbImage::from_pixel(300, 200, Rgb([17, 99, 201]));
        // mild rotation + zoom that keeps the output inside the source
        let h = Matrix3::new(0.9, 0.05, 20.0, -0.04, 0.92, 30.0, 0.0, 0.0, 1.0);
        let out = warp_frame(&img, &h, 256, 128).unwrap();
        assert!(out.pixels().all(|p| p.0 == [17, 99, 201]));
    }

    #[test]
    fn scale_two_checkerboard_matches_nearest_pixel_oracle() {
        let square = 16u32;
        let src = RgbImage::from_fn(512, 256, |x, y| {
            if ((x / square) + (y / square)) % 2 == 0 {
                Rgb([255, 255, 255])
            } else {
                Rgb([0, 0, 0])
            }
        });
        let h = Matrix3::new(2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0);
        let out = warp_frame(&src, &h, 256, 128).unwrap();
        // integer scale hits pixel centers exactly: output equals the
        // brute-force nearest-pixel map wherever the source is defined
        for v in 0..128u32 {
            for u in 0..256u32 {
                let expected = src.get_pixel(2 * u, 2 * v);
                assert_eq!(out.get_pixel(u, v), expected, "pixel ({u}, {v})");
            }
        }
        // a corner at source (16, 16) lands at output (8, 8)
        assert_eq!(out.get_pixel(7, 7).0, [255, 255, 255]);
        assert_eq!(out.get_pixel(8, 7).0, [0, 0, 0]);
        assert_eq!(out.get_pixel(8, 8).0, [255, 255, 255]);
    }

    #[test]
    fn warp_round_trip_on_smooth_image() {
        let img = gradient_image(256, 128);
        let virt = VirtualCamera::default();
        let extr = CameraExtrinsics::from_mount_angles(0.02, -0.015, 0.01, 1.2).unwrap();
        let h = rotation_homography(&virt.intrinsics, &extr, &virt).unwrap();
        let h_inv = h.try_inverse().unwrap();
        let warped = warp_frame(&img, &h, 256, 128).unwrap();
        let back = warp_frame(&warped, &h_inv, 256, 128).unwrap();
        let (mut sum, mut count) = (0.0, 0usize);
        for v in 0..128u32 {
            for u in 0..256u32 {
                // keep pixels whose round trip stays inside both images
                let p = h * Vector3::new(u as f64, v as f64, 1.0);
                let (x, y) = (p.x / p.z, p.y / p.z);
                if x < 1.0 || y < 1.0 || x > 254.0 || y > 126.0 {
                    continue;
                }
                let q = h_inv * Vector3::new(u as f64, v as f64, 1.0);
                let (x, y) = (q.x / q.z, q.y / q.z);
                if x < 1.0 || y < 1.0 || x > 254.0 || y > 126.0 {
                    continue;
                }
                for c in 0..3 {
                    sum += (img.get_pixel(u, v).0[c] as f64 - back.get_pixel(u, v).0[c] as f64).abs();
                    count += 1;
                }
            }
        }
        assert!(count > 3 * 20_000);
        assert!(sum / count as f64 / 255.0 < 2.0 / 255.0, "mae {}", sum / count as f64);
    }

    #[test]
    fn singular_homography_is_rejected() {
        let img = RgbImage::new(10, 10);
        assert_eq!(
            warp_frame(&img, &Matrix3::zeros(), 256, 128),
            Err(CalibError::SingularHomography)
        );
        let rank2 = Matrix3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0);
        assert_eq!(warp_frame(&img, &rank2, 256, 128), Err(CalibError::SingularHomography));
        assert_eq!(
            warp_frame(&RgbImage::new(0, 0), &Matrix3::identity(), 256, 128),
            Err(CalibError::EmptyImage)
        );
    }

    #[test]
    fn stacking_orders_previous_frame_first() {
        let a = RgbImage::from_pixel(256, 128, Rgb([255, 0, 51]));
        let b = RgbImage::from_pixel(256, 128, Rgb([0, 255, 102]));
        let t = stack_frames(&b, &a).unwrap();
        assert_eq!(t.shape(), [6, 128, 256]);
        assert_eq!(t.get(0, 5, 7), 1.0);
        assert_eq!(t.get(1, 5, 7), 0.0);
        assert_eq!(t.get(2, 0, 0), 0.2);
        assert_eq!(t.get(3, 127, 255), 0.0);
        assert_eq!(t.get(4, 64, 128), 1.0);
        assert_eq!(t.get(5, 64, 128), 0.4);

        let zeros = RgbImage::new(256, 128);
        let t = stack_frames(&zeros, &zeros).unwrap();
        assert!(t.as_slice().iter().all(|&v| v == 0.0));

        let small = RgbImage::new(128, 64);
        assert!(matches!(
            stack_frames(&small, &zeros),
            Err(CalibError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn calibration_json_round_trip_and_validation() {
        let calib = CalibrationFile {
            intrinsics: CameraIntrinsics::new(320.0, 320.0, 192.0, 112.0, 384, 224).unwrap(),
            extrinsics: CameraExtrinsics::from_mount_angles(0.05, 0.02, 0.0, 1.3).unwrap(),
        };
        let back = CalibrationFile::from_json_str(&calib.to_json_string()).unwrap();
        assert_eq!(back, calib);

        let bad = r#"{"intrinsics":{"fx":300,"fy":300,"cx":10,"cy":10,"width":100,"height":100},
            "extrinsics":{"rotation":[1,0,0,0,1,0,0,0,2],"height":1.2}}"#;
        assert!(matches!(
            CalibrationFile::from_json_str(bad),
            Err(CalibError::NonOrthonormal(_))
        ));
        let short = r#"{"intrinsics":{"fx":300,"fy":300,"cx":10,"cy":10,"width":100,"height":100},
            "extrinsics":{"rotation":[1,0,0],"height":1.2}}"#;
        assert!(matches!(
            CalibrationFile::from_json_str(short),
            Err(CalibError::Malformed(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn stacked_values_stay_in_unit_interval(a in any::<u8>(), b in any::<u8>(), c in any::<u8>()) {
                let f0 = RgbImage::from_pixel(256, 128, Rgb([a, b, c]));
                let f1 = RgbImage::from_fn(256, 128, |x, y| Rgb([(x % 256) as u8, (y * 2) as u8, a ^ b]));
                let t = stack_frames(&f1, &f0).unwrap();
                prop_assert_eq!(t.as_slice().len(), 6 * 128 * 256);
                prop_assert!(t.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            }

            #[test]
            fn mount_rotations_are_valid(p in -0.3f64..0.3, y in -0.3f64..0.3, r in -0.3f64..0.3) {
                let e = CameraExtrinsics::from_mount_angles(p, y, r, 1.0).unwrap();
                let virt = VirtualCamera::default();
                let h = rotation_homography(&virt.intrinsics, &e, &virt).unwrap();
                prop_assert!(h.try_inverse().is_some());
            }
        }
    }
}
