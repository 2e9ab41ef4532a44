//! Bird's-eye-view plots of predicted and ground-truth trajectories.
//!
//! Plot coordinates: forward (x) points up the page and left (y) points to
//! the left, so the ego vehicle sits near the bottom centre. The lateral
//! window is fixed at ±20 m; the forward window starts 5 m behind the ego
//! and ends at the next multiple of 25 m past the ground truth.

use std::path::{Path, PathBuf};

use ab_glyph::{FontVec, PxScale};
use image::{Rgb, RgbImage};
use opdd_core::{ground_truth_trajectory, EgoTrajectory, MultimodalPrediction, TrajectoryError, VirtualCamera};
use opdd_data::{DataError, SequenceRecord, WarpedFrames};

use crate::error::ModelError;
use crate::planner::{input_batch, Planner};

pub const PLOT_WIDTH: u32 = 400;
pub const PLOT_HEIGHT: u32 = 800;
pub const LATERAL_HALF_RANGE: f64 = 20.0;
pub const REAR_MARGIN: f64 = 5.0;
const FORWARD_STEP: f64 = 25.0;
const FORWARD_CAP: f64 = 250.0;

const FONT_PATHS: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
];

const MODE_COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];
const GT_COLOR: [u8; 3] = [0, 0, 0];

/// World (ego metres) to pixel mapping of one plot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevMapping {
    pub x_min: f64,
    pub x_max: f64,
    pub y_half: f64,
    pub width: u32,
    pub height: u32,
}

impl BevMapping {
    pub fn for_forward_extent(max_x: f64) -> Self {
        let steps = (max_x.max(0.0) / FORWARD_STEP).ceil().max(1.0);
        Self {
            x_min: -REAR_MARGIN,
            x_max: (steps * FORWARD_STEP).min(FORWARD_CAP),
            y_half: LATERAL_HALF_RANGE,
            width: PLOT_WIDTH,
            height: PLOT_HEIGHT,
        }
    }

    /// `(column, row)` in pixels for an ego-frame point.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let col = (self.y_half - y) / (2.0 * self.y_half) * self.width as f64;
        let row = (self.x_max - x) / (self.x_max - self.x_min) * self.height as f64;
        (col, row)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pub label: String,
    /// Pixel coordinates.
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
    pub opacity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevPlot {
    pub mapping: BevMapping,
    /// `pred0..predM-1`, then `gt` when ground truth is known.
    pub polylines: Vec<Polyline>,
    pub title: String,
}

impl BevPlot {
    pub fn polyline(&self, label: &str) -> Option<&Polyline> {
        self.polylines.iter().find(|p| p.label == label)
    }
}

pub fn bev_plot(pred: &MultimodalPrediction, gt: Option<&EgoTrajectory>, title: &str) -> BevPlot {
    let max_x = gt.map_or(0.0, |g| g.points().iter().map(|p| p.x).fold(0.0, f64::max));
    let mapping = BevMapping::for_forward_extent(max_x);
    let project = |t: &EgoTrajectory| {
        t.points()
            .iter()
            .map(|p| mapping.to_pixel(p.x, p.y))
            .collect::<Vec<_>>()
    };
    let mut polylines: Vec<Polyline> = pred
        .trajectories
        .iter()
        .zip(&pred.confidences)
        .enumerate()
        .map(|(m, (t, &c))| Polyline {
            label: format!("pred{m}"),
            points: project(t),
            color: MODE_COLORS[m % MODE_COLORS.len()],
            opacity: c.clamp(0.0, 1.0),
        })
        .collect();
    if let Some(g) = gt {
        polylines.push(Polyline {
            label: "gt".into(),
            points: project(g),
            color: GT_COLOR,
            opacity: 1.0,
        });
    }
    BevPlot {
        mapping,
        polylines,
        title: title.to_string(),
    }
}

fn blend(img: &mut RgbImage, col: i64, row: i64, color: [u8; 3], alpha: f64) {
    if col < 0 || row < 0 || col >= img.width() as i64 || row >= img.height() as i64 || alpha <= 0.0 {
        return;
    }
    let px = img.get_pixel_mut(col as u32, row as u32);
    for (c, &target) in px.0.iter_mut().zip(&color) {
        *c = (*c as f64 * (1.0 - alpha) + target as f64 * alpha).round() as u8;
    }
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

/// Anti-aliased thick segment (a disc when `a == b`).
fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), half_width: f64, color: [u8; 3], alpha: f64) {
    let pad = half_width + 1.0;
    let (c0, c1) = ((a.0.min(b.0) - pad).floor() as i64, (a.0.max(b.0) + pad).ceil() as i64);
    let (r0, r1) = ((a.1.min(b.1) - pad).floor() as i64, (a.1.max(b.1) + pad).ceil() as i64);
    let c0 = c0.max(0);
    let r0 = r0.max(0);
    let c1 = c1.min(img.width() as i64 - 1);
    let r1 = r1.min(img.height() as i64 - 1);
    for row in r0..=r1 {
        for col in c0..=c1 {
            let d = point_segment_distance((col as f64 + 0.5, row as f64 + 0.5), a, b);
            let coverage = (half_width + 0.5 - d).clamp(0.0, 1.0);
            blend(img, col, row, color, alpha * coverage);
        }
    }
}

/// Pixel distance from polyline `a` to polyline `b`: the largest distance of
/// a vertex of `a` to the segments of `b`.
pub fn polyline_deviation(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    a.iter()
        .map(|&p| match b {
            [] => f64::INFINITY,
            [only] => (p.0 - only.0).hypot(p.1 - only.1),
            _ => b
                .windows(2)
                .map(|w| point_segment_distance(p, w[0], w[1]))
                .fold(f64::INFINITY, f64::min),
        })
        .fold(0.0, f64::max)
}

/// The first DejaVu Sans found in the usual system locations.
pub fn load_label_font() -> Option<FontVec> {
    FONT_PATHS
        .iter()
        .find_map(|p| std::fs::read(p).ok())
        .and_then(|bytes| FontVec::try_from_vec(bytes).ok())
}

/// Rasterizes a plot. Labels are drawn only when a font is supplied; the
/// legend swatches are drawn either way.
pub fn render_bev(plot: &BevPlot, font: Option<&FontVec>) -> RgbImage {
    let m = plot.mapping;
    let mut img = RgbImage::from_pixel(m.width, m.height, Rgb([255, 255, 255]));
    let grid = [225, 225, 225];
    let mut x = (m.x_min / 5.0).ceil() * 5.0;
    while x <= m.x_max {
        let (_, row) = m.to_pixel(x, 0.0);
        let heavy = (x / 25.0).fract() == 0.0;
        draw_segment(
            &mut img,
            (0.0, row),
            (m.width as f64, row),
            if heavy { 0.8 } else { 0.4 },
            grid,
            1.0,
        );
        x += 5.0;
    }
    let mut y = -m.y_half;
    while y <= m.y_half {
        let (col, _) = m.to_pixel(0.0, y);
        draw_segment(&mut img, (col, 0.0), (col, m.height as f64), 0.4, grid, 1.0);
        y += 5.0;
    }
    // ego footprint, roughly 1.8 m x 4.5 m centred behind the origin
    let (l, t) = m.to_pixel(1.0, 0.9);
    let (r, b) = m.to_pixel(-3.5, -0.9);
    for row in t.round() as i64..b.round() as i64 {
        for col in l.round() as i64..r.round() as i64 {
            blend(&mut img, col, row, [120, 120, 120], 0.6);
        }
    }

    for line in &plot.polylines {
        let half = if line.label == "gt" { 1.5 } else { 1.25 };
        match line.points.as_slice() {
            [] => {}
            [p] => draw_segment(&mut img, *p, *p, half, line.color, line.opacity),
            pts => {
                for w in pts.windows(2) {
                    draw_segment(&mut img, w[0], w[1], half, line.color, line.opacity);
                }
            }
        }
        if line.label == "gt" {
            for &p in &line.points {
                draw_segment(&mut img, p, p, 2.5, line.color, 1.0);
            }
        }
    }

    for (i, line) in plot.polylines.iter().enumerate() {
        let top = 10.0 + 16.0 * i as f64;
        draw_segment(
            &mut img,
            (10.0, top + 6.0),
            (28.0, top + 6.0),
            2.0,
            line.color,
            line.opacity.max(0.2),
        );
        if let Some(font) = font {
            let label = if line.label == "gt" {
                "gt".to_string()
            } else {
                format!("{} ({:.2})", line.label, line.opacity)
            };
            imageproc::drawing::draw_text_mut(
                &mut img,
                Rgb([20, 20, 20]),
                34,
                top as i32,
                PxScale::from(13.0),
                font,
                &label,
            );
        }
    }
    if let Some(font) = font {
        let w = plot.title.len() as i32 * 7;
        imageproc::drawing::draw_text_mut(
            &mut img,
            Rgb([20, 20, 20]),
            m.width as i32 - w - 8,
            8,
            PxScale::from(13.0),
            font,
            &plot.title,
        );
    }
    img
}

pub fn bev_file_name(frame_index: usize) -> String {
    format!("bev_{frame_index:06}.png")
}

/// One plot per frame of `record` (from frame 1), streaming the network
/// with a zero initial hidden state. Frames past the last full-horizon
/// reference are plotted without ground truth.
pub fn visualize(planner: &Planner, record: SequenceRecord, out_dir: &Path) -> Result<Vec<PathBuf>, ModelError> {
    std::fs::create_dir_all(out_dir).map_err(|e| ModelError::io(out_dir, e))?;
    let anchors = planner.config().anchor_mode.anchors();
    let id = record.id.clone();
    let frames = WarpedFrames::new(record, &VirtualCamera::default(), false)?;
    let font = load_label_font();
    let mut hidden = planner.zero_hidden(1)?;
    let mut written = Vec::new();
    for index in 1..frames.record().len() {
        let input = input_batch(&[frames.input(index)?], planner.dtype(), planner.device())?;
        let (raw, next) = planner.forward(&input, &hidden)?;
        hidden = next;
        let pred = planner.decode(&raw)?.remove(0);
        let gt = match ground_truth_trajectory(&frames.record().poses, index, &anchors) {
            Ok(g) => Some(g),
            Err(TrajectoryError::InsufficientHorizon { .. }) => None,
            Err(source) => {
                return Err(DataError::Poses {
                    path: frames.record().dir.clone(),
                    source,
                }
                .into())
            }
        };
        let plot = bev_plot(&pred, gt.as_ref(), &format!("{id} #{index}"));
        let path = out_dir.join(bev_file_name(index));
        render_bev(&plot, font.as_ref())
            .save(&path)
            .map_err(|e| ModelError::Plot(format!("{}: {e}", path.display())))?;
        written.push(path);
    }
    Ok(written)
}
