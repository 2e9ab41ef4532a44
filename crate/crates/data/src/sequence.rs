//! Loading and validating canonical sequence directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use opdd_core::{AnchorMode, CalibError, CalibrationFile, PoseLog, TrajectoryError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FRAMES_DIR: &str = "frames";
pub const POSES_FILE: &str = "poses.csv";
pub const CALIB_FILE: &str = "calib.json";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: missing {what}")]
    Missing { path: PathBuf, what: &'static str },
    #[error("{path}: {frames} frames but {poses} poses")]
    CountMismatch { path: PathBuf, frames: usize, poses: usize },
    #[error("{path}: {source}")]
    Calibration { path: PathBuf, source: CalibError },
    #[error("{path}: {source}")]
    Poses { path: PathBuf, source: TrajectoryError },
    #[error("{path}: invalid metadata: {reason}")]
    Meta { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("need at least 2 sequences to split, got {0}")]
    TooFewSequences(usize),
    #[error("split ratio must lie in (0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("frame {index} out of range for sequence with {len} frames")]
    FrameOutOfRange { index: usize, len: usize },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            other => Err(format!("unknown split '{other}' (expected train or val)")),
        }
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub rate_hz: f64,
    pub location: String,
    pub split: Split,
    /// Anchor layout the sequence was prepared for, when declared.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_mode: Option<AnchorMode>,
}

/// A validated sequence directory.
#[derive(Debug, Clone)]
pub struct SequenceRecord {
    pub id: String,
    pub dir: PathBuf,
    pub frame_paths: Vec<PathBuf>,
    pub poses: PoseLog,
    pub calibration: CalibrationFile,
    pub meta: SequenceMeta,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frame_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_paths.is_empty()
    }

    pub fn read_frame(&self, index: usize) -> Result<RgbImage, DataError> {
        let path = self
            .frame_paths
            .get(index)
            .ok_or(DataError::FrameOutOfRange { index, len: self.len() })?;
        let img = image::open(path).map_err(|source| DataError::Image {
            path: path.clone(),
            source,
        })?;
        Ok(img.to_rgb8())
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.jpg")
}

fn require(path: &Path, what: &'static str) -> Result<(), DataError> {
    if path.exists() {
        Ok(())
    } else {
        Err(DataError::Missing {
            path: path.to_path_buf(),
            what,
        })
    }
}

pub fn read_meta(dir: &Path) -> Result<SequenceMeta, DataError> {
    let path = dir.join(META_FILE);
    require(&path, "meta.json")?;
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let meta: SequenceMeta = serde_json::from_str(&text).map_err(|e| DataError::Meta {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if !(meta.rate_hz > 0.0 && meta.rate_hz.is_finite()) {
        return Err(DataError::Meta {
            path,
            reason: format!("rate_hz must be positive, got {}", meta.rate_hz),
        });
    }
    Ok(meta)
}

pub fn write_meta(dir: &Path, meta: &SequenceMeta) -> Result<(), DataError> {
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&path, text).map_err(|e| DataError::io(&path, e))
}

/// Loads a sequence directory and checks every cross-file invariant.
pub fn load_sequence(dir: &Path) -> Result<SequenceRecord, DataError> {
    let frames_dir = dir.join(FRAMES_DIR);
    let poses_path = dir.join(POSES_FILE);
    let calib_path = dir.join(CALIB_FILE);
    require(&frames_dir, "frames/ directory")?;
    require(&poses_path, "poses.csv")?;
    require(&calib_path, "calib.json")?;
    let meta = read_meta(dir)?;

    let calibration = CalibrationFile::read(&calib_path).map_err(|source| DataError::Calibration {
        path: calib_path.clone(),
        source,
    })?;
    let file = fs::File::open(&poses_path).map_err(|e| DataError::io(&poses_path, e))?;
    let poses = PoseLog::read_csv(file).map_err(|source| DataError::Poses {
        path: poses_path.clone(),
        source,
    })?;

    let frame_count = fs::read_dir(&frames_dir)
        .map_err(|e| DataError::io(&frames_dir, e))?
        .filter_map(Result::ok)
        .filter(|e| e.path().extension().is_some_and(|x| x == "jpg"))
        .count();
    if frame_count != poses.len() {
        return Err(DataError::CountMismatch {
            path: dir.to_path_buf(),
            frames: frame_count,
            poses: poses.len(),
        });
    }
    let frame_paths: Vec<PathBuf> = (0..frame_count).map(|i| frames_dir.join(frame_file_name(i))).collect();
    if let Some(missing) = frame_paths.iter().find(|p| !p.exists()) {
        return Err(DataError::Missing {
            path: missing.clone(),
            what: "frame file",
        });
    }

    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(SequenceRecord {
        id,
        dir: dir.to_path_buf(),
        frame_paths,
        poses,
        calibration,
        meta,
    })
}

/// Sequence directories directly below `root` (those holding a
/// `poses.csv`), sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>, DataError> {
    if root.join(POSES_FILE).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| DataError::io(root, e))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.join(POSES_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Loads every sequence under `root`, optionally keeping one split.
pub fn load_dataset(root: &Path, split: Option<Split>) -> Result<Vec<SequenceRecord>, DataError> {
    let mut out = Vec::new();
    for dir in list_sequences(root)? {
        let seq = load_sequence(&dir)?;
        if split.is_none_or(|s| s == seq.meta.split) {
            out.push(seq);
        }
    }
    Ok(out)
}
