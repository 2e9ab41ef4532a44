//! The core pieces chained through their public API, the way the training and
//! evaluation code uses them.

use nalgebra::{UnitQuaternion, Vector3};
use opdd_core::prediction::{decode_output, encode_output};
use opdd_core::{
    comfort_metrics, ground_truth_trajectory, imitation_metrics, mtp_loss, select_best, stack_frames, warp_frame,
    AnchorSet, CalibrationFile, CameraExtrinsics, CameraIntrinsics, EgoTrajectory, LossConfig, MultimodalPrediction,
    OutputLayout, PoseLog, VirtualCamera,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 20 s of a left-hand arc at 10 Hz, radius 80 m, 12 m/s.
fn arc_log() -> PoseLog {
    let (speed, radius) = (12.0, 80.0);
    let mut t = Vec::new();
    let mut pos = Vec::new();
    let mut rot = Vec::new();
    for k in 0..=200 {
        let time = k as f64 * 0.1;
        let phi = speed * time / radius;
        t.push(time);
        pos.push(Vector3::new(radius * phi.sin(), radius * (1.0 - phi.cos()), 0.0));
        rot.push(UnitQuaternion::from_euler_angles(0.0, 0.0, phi));
    }
    PoseLog::from_unit(t, pos, rot).unwrap()
}

fn noisy_mode(rng: &mut ChaCha8Rng, gt: &EgoTrajectory, scale: f64) -> EgoTrajectory {
    let pts = gt
        .points()
        .iter()
        .map(|p| {
            Vector3::new(
                p.x.max(0.01) * rng.random_range(0.5..1.5),
                p.y + scale * rng.random_range(-1.0..1.0),
                p.z + scale * rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    EgoTrajectory::new(gt.anchors().clone(), pts).unwrap()
}

#[test]
fn pose_file_to_scored_prediction() {
    let mut csv = Vec::new();
    arc_log().write_csv(&mut csv).unwrap();
    let log = PoseLog::read_csv(csv.as_slice()).unwrap();
    let anchors = AnchorSet::comma();
    let gt = ground_truth_trajectory(&log, 30, &anchors).unwrap();
    assert_eq!(gt.points()[0], Vector3::zeros());
    assert!(gt.points()[32].y > 0.0, "left turn ends on the left");

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut trajectories: Vec<_> = (0..4).map(|_| noisy_mode(&mut rng, &gt, 3.0)).collect();
    // x is decoded through exp, so the T = 0 point can only approach zero
    let reachable: Vec<_> = gt
        .points()
        .iter()
        .map(|p| Vector3::new(p.x.max(1e-9), p.y, p.z))
        .collect();
    trajectories.insert(2, EgoTrajectory::new(anchors.clone(), reachable).unwrap());
    let pred = MultimodalPrediction {
        trajectories,
        confidences: vec![0.1, 0.2, 0.9, 0.3, 0.05],
    };

    let layout = OutputLayout::new(5, anchors.len()).unwrap();
    let raw = encode_output(&pred);
    assert_eq!(raw.len(), layout.dim());
    let decoded = decode_output(&raw, layout, &anchors).unwrap();
    let best = select_best(&decoded);

    let stride = layout.mode_stride();
    let coords: Vec<Vec<[f64; 3]>> = raw
        .chunks_exact(stride)
        .map(|m| m[..stride - 1].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
        .collect();
    let logits: Vec<f64> = raw.chunks_exact(stride).map(|m| m[stride - 1]).collect();
    let loss = mtp_loss(&coords, &logits, &gt.to_arrays(), &LossConfig::default()).unwrap();
    assert_eq!(loss.selected_mode, 2);
    assert!(loss.regression < 1e-9);

    let report = imitation_metrics(&[(best.clone(), gt.clone())]).unwrap();
    for row in report.rows.iter().filter(|r| r.count > 0) {
        assert!(row.distance_error.unwrap() < 1e-9, "{}", row.range);
        assert_eq!(row.ap_at(0.5), Some(1.0));
    }
    let comfort = comfort_metrics(best).unwrap();
    // poses are interpolated linearly between 10 Hz samples, which flattens
    // the arc between them
    assert!(
        (comfort.average_lateral_acceleration - 144.0 / 80.0).abs() < 0.1 * 1.8,
        "{comfort:?}"
    );
}

#[test]
fn calibration_file_to_network_input() {
    let calib = CalibrationFile {
        intrinsics: CameraIntrinsics::new(200.0, 200.0, 160.0, 120.0, 320, 240).unwrap(),
        extrinsics: CameraExtrinsics::from_mount_angles(0.03, -0.02, 0.0, 1.3).unwrap(),
    };
    let calib = CalibrationFile::from_json_str(&calib.to_json_string()).unwrap();
    let virt = VirtualCamera::default();
    let h = calib.homography_to(&virt).unwrap();

    let gray = image::RgbImage::from_pixel(320, 240, image::Rgb([90, 90, 90]));
    let warped = warp_frame(&gray, &h, 256, 128).unwrap();
    assert_eq!(warped.dimensions(), (256, 128));
    // the narrow virtual view lies inside the wider source view
    assert!(warped.pixels().all(|p| p.0 == [90, 90, 90]));

    let input = stack_frames(&warped, &warped).unwrap();
    assert_eq!(input.shape(), [6, 128, 256]);
    assert!(input.as_slice().iter().all(|&v| (v - 90.0 / 255.0).abs() < 1e-6));
}
