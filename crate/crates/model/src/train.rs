//! Training loop.
//!
//! The batch holds `batch_size` sequence streams advanced in lockstep. Each
//! stream owns a GRU hidden state that starts at zero when a sequence starts
//! and is detached from the graph between frames. Gradients of consecutive
//! frames are summed and applied every `accumulation_steps` frames after
//! global-norm clipping.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use opdd_core::{EgoTrajectory, LossConfig, VirtualCamera};
use opdd_data::{build_samples, SequenceRecord, TrainingSample, WarpedFrames};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::checkpoint::{Checkpoint, TrainProgress};
use crate::error::ModelError;
use crate::loss::mtp_loss_batch;
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, GradAccumulator};
use crate::planner::{input_batch, AnchorMode, HiddenState, ModelConfig, Planner};

pub const SEED_ENV: &str = "OPDD_SEED";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

/// Flat training configuration; the loss and model fields sit at the top
/// level next to the optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `inf` disables clipping.
    #[serde(serialize_with = "ser_maybe_inf", deserialize_with = "de_maybe_inf")]
    pub grad_clip_norm: f64,
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Stop after this many optimizer updates in total.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_updates: Option<u64>,
    pub lr_schedule: LrSchedule,
    /// Floor of the cosine schedule.
    pub min_learning_rate: f64,
    /// Reference-frame stride when building samples.
    pub stride: usize,
    /// Keep decoded, warped frames in memory.
    pub cache_frames: bool,
    #[serde(flatten)]
    pub loss: LossConfig,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl TrainConfig {
    /// Full backbone, comma anchors, batch 48 x 40 accumulation, AdamW 1e-4.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 48,
            learning_rate: 1e-4,
            grad_clip_norm: 1.0,
            accumulation_steps: 40,
            epochs: 100,
            seed: 0,
            weight_decay: 0.01,
            max_updates: None,
            lr_schedule: LrSchedule::Constant,
            min_learning_rate: 0.0,
            stride: 1,
            cache_frames: false,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }

    /// Tiny backbone sized for the 20-sequence synthetic suite on a CPU.
    pub fn desk() -> Self {
        Self {
            batch_size: 20,
            learning_rate: 1e-3,
            accumulation_steps: 1,
            epochs: 1000,
            max_updates: Some(2000),
            lr_schedule: LrSchedule::Cosine,
            min_learning_rate: 1e-5,
            cache_frames: true,
            model: ModelConfig::tiny(AnchorMode::Comma),
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.accumulation_steps == 0 {
            return fail("accumulation_steps must be >= 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.stride == 0 {
            return fail("stride must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.grad_clip_norm > 0.0) {
            return fail(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm));
        }
        if self.lr_schedule == LrSchedule::Cosine && self.max_updates.is_none() {
            return fail("the cosine schedule needs max_updates".into());
        }
        if !(self.min_learning_rate >= 0.0 && self.min_learning_rate <= self.learning_rate) {
            return fail(format!(
                "min_learning_rate must lie in [0, learning_rate], got {}",
                self.min_learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Learning rate of the update that follows `step` completed updates.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match (self.lr_schedule, self.max_updates) {
            (LrSchedule::Cosine, Some(total)) if total > 0 => {
                let p = (step as f64 / total as f64).min(1.0);
                let span = self.learning_rate - self.min_learning_rate;
                self.min_learning_rate + span * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
            _ => self.learning_rate,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Replaces the seed with `OPDD_SEED` when that variable is set.
    pub fn apply_seed_env(&mut self) -> Result<(), ModelError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| ModelError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `learning_rate` to `min_learning_rate` over
    /// `max_updates`.
    Cosine,
}

fn ser_maybe_inf<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn de_maybe_inf<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Value {
        Num(f64),
        Text(String),
    }
    match Value::deserialize(d)? {
        Value::Num(v) => Ok(v),
        Value::Text(s) if matches!(s.as_str(), "inf" | "+inf" | "infinity") => Ok(f64::INFINITY),
        Value::Text(s) => Err(serde::de::Error::custom(format!(
            "expected a number or \"inf\", got {s:?}"
        ))),
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: u64,
    pub epoch: usize,
    /// Means over the frames folded into this update.
    pub total: f64,
    pub regression: f64,
    pub classification: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Samples of each usable sequence, in frame order.
pub fn prepare_sequences(
    records: Vec<SequenceRecord>,
    anchor_mode: AnchorMode,
    stride: usize,
    cache_frames: bool,
) -> Result<Vec<Vec<TrainingSample>>, ModelError> {
    let anchors = anchor_mode.anchors();
    let virt = VirtualCamera::default();
    let mut out = Vec::new();
    for record in records {
        if let Some(declared) = record.meta.anchor_mode {
            if declared != anchor_mode {
                return Err(ModelError::AnchorMismatch {
                    model: anchor_mode.to_string(),
                    data: format!("{declared} ({})", record.id),
                });
            }
        }
        let frames = Arc::new(WarpedFrames::new(record, &virt, cache_frames)?);
        let set = build_samples(frames, &anchors, stride)?;
        if !set.samples.is_empty() {
            out.push(set.samples);
        }
    }
    Ok(out)
}

#[derive(Debug)]
struct Stream {
    sequence: usize,
    position: usize,
    hidden: Option<HiddenState>,
}

impl Stream {
    fn start(sequence: usize) -> Self {
        Self {
            sequence,
            position: 0,
            hidden: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochEnd {
    Completed,
    /// `max_updates` was reached mid-epoch.
    Stopped,
}

#[derive(Debug, Serialize)]
struct DumpSample<'a> {
    sequence: &'a str,
    frame_index: usize,
    ground_truth: Vec<[f64; 3]>,
}

#[derive(Debug, Serialize)]
struct NonFiniteDump<'a> {
    step: u64,
    epoch: usize,
    loss: f64,
    samples: Vec<DumpSample<'a>>,
    raw_output: Vec<Vec<f64>>,
}

pub struct Trainer {
    config: TrainConfig,
    planner: Planner,
    optimizer: AdamW,
    accumulator: GradAccumulator,
    progress: TrainProgress,
    sequences: Vec<Vec<TrainingSample>>,
    dump_dir: PathBuf,
}

impl Trainer {
    /// Fresh weights drawn from `config.seed`.
    pub fn new(config: TrainConfig, sequences: Vec<Vec<TrainingSample>>, dump_dir: &Path) -> Result<Self, ModelError> {
        config.validate()?;
        if sequences.iter().all(Vec::is_empty) {
            return Err(ModelError::EmptyDataset);
        }
        let planner = Planner::new(config.model, config.seed, DType::F32, &Device::Cpu)?;
        let optimizer = AdamW::new(planner.trainable_vars(), config.adamw())?;
        Ok(Self {
            config,
            planner,
            optimizer,
            accumulator: GradAccumulator::default(),
            progress: TrainProgress::default(),
            sequences,
            dump_dir: dump_dir.to_path_buf(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. The
    /// model part of `config` must match the checkpoint.
    pub fn resume(
        checkpoint: &Checkpoint,
        config: TrainConfig,
        sequences: Vec<Vec<TrainingSample>>,
        dump_dir: &Path,
    ) -> Result<Self, ModelError> {
        if checkpoint.model_config != config.model {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint model {:?} differs from configured model {:?}",
                checkpoint.model_config, config.model
            )));
        }
        let state = checkpoint
            .optimizer
            .as_ref()
            .ok_or_else(|| ModelError::Checkpoint("checkpoint holds no optimizer state".into()))?;
        let mut trainer = Self::new(config, sequences, dump_dir)?;
        trainer.planner.load_state(&checkpoint.weights)?;
        let restore = |stored: &std::collections::BTreeMap<String, Tensor>,
                       target: &mut std::collections::BTreeMap<String, Tensor>|
         -> Result<(), ModelError> {
            for (name, slot) in target.iter_mut() {
                let t = stored
                    .get(name)
                    .ok_or_else(|| ModelError::Checkpoint(format!("missing optimizer tensor {name}")))?;
                *slot = t.to_dtype(slot.dtype())?;
            }
            Ok(())
        };
        restore(&state.first_moment, &mut trainer.optimizer.first_moment)?;
        restore(&state.second_moment, &mut trainer.optimizer.second_moment)?;
        trainer.optimizer.steps = checkpoint.progress.step;
        trainer.accumulator.sums = state.accumulated_grads.clone();
        trainer.accumulator.count = checkpoint.progress.accumulated;
        trainer.progress = checkpoint.progress;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn planner(&self) -> &Planner {
        &self.planner
    }

    pub fn progress(&self) -> TrainProgress {
        self.progress
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.planner,
            Some((&self.config, self.progress, &self.optimizer, &self.accumulator)),
        )
    }

    fn max_reached(&self) -> bool {
        self.config.max_updates.is_some_and(|m| self.progress.step >= m)
    }

    /// Sequence visiting order for an epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.sequences.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        order
    }

    /// One forward/backward pass over a batch of frames. Returns the next
    /// hidden state (detached) and the update record when this pass
    /// completed an accumulation window.
    pub fn frame_step(
        &mut self,
        input: &Tensor,
        hidden: &HiddenState,
        samples: &[&TrainingSample],
    ) -> Result<(HiddenState, Option<UpdateRecord>), ModelError> {
        let (raw, next) = self.planner.forward_t(input, hidden, true)?;
        let gts: Vec<&EgoTrajectory> = samples.iter().map(|s| &s.ground_truth).collect();
        let loss = mtp_loss_batch(&raw, &gts, self.config.model.layout(), &self.config.loss)?;
        let value = loss.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(self.dump_non_finite(value, &raw, samples));
        }
        let grads = loss.total.backward()?;
        self.accumulator.add(self.optimizer.vars(), &grads)?;
        let (t, r, c) = loss.mean_breakdown();
        self.progress.pending_loss[0] += t;
        self.progress.pending_loss[1] += r;
        self.progress.pending_loss[2] += c;
        self.progress.accumulated = self.accumulator.count;

        let mut record = None;
        if self.accumulator.count >= self.config.accumulation_steps {
            let frames = self.accumulator.count as f64;
            let mut summed = self.accumulator.take();
            let grad_norm = clip_grad_norm(&mut summed, self.config.grad_clip_norm)?;
            self.optimizer.config.learning_rate = self.config.learning_rate_at(self.progress.step);
            self.optimizer.step(&summed)?;
            self.progress.step += 1;
            self.progress.accumulated = 0;
            let [t, r, c] = std::mem::take(&mut self.progress.pending_loss);
            record = Some(UpdateRecord {
                step: self.progress.step,
                epoch: self.progress.epoch,
                total: t / frames,
                regression: r / frames,
                classification: c / frames,
                grad_norm,
            });
        }
        Ok((next.detach(), record))
    }

    fn dump_non_finite(&self, loss: f64, raw: &Tensor, samples: &[&TrainingSample]) -> ModelError {
        let dump = self
            .dump_dir
            .join(format!("nonfinite_step{:06}.json", self.progress.step));
        let raw_output = raw
            .to_dtype(DType::F64)
            .and_then(|r| r.to_vec2::<f64>())
            .unwrap_or_default();
        let body = NonFiniteDump {
            step: self.progress.step,
            epoch: self.progress.epoch,
            loss,
            samples: samples
                .iter()
                .map(|s| DumpSample {
                    sequence: s.sequence_id(),
                    frame_index: s.frame_index,
                    ground_truth: s.ground_truth.to_arrays(),
                })
                .collect(),
            raw_output,
        };
        // non-finite values serialize as null, which keeps the dump valid JSON
        let text = serde_json::to_string_pretty(&body).expect("dump serializes");
        if let Err(e) = fs::create_dir_all(&self.dump_dir).and_then(|_| fs::write(&dump, text)) {
            return ModelError::io(dump, e);
        }
        ModelError::NonFiniteLoss {
            step: self.progress.step,
            epoch: self.progress.epoch,
            dump,
        }
    }

    /// Runs the current epoch to its end, or until `max_updates`.
    pub fn run_epoch(
        &mut self,
        on_update: &mut dyn FnMut(&UpdateRecord) -> Result<(), ModelError>,
    ) -> Result<EpochEnd, ModelError> {
        if self.max_reached() {
            return Ok(EpochEnd::Stopped);
        }
        let device = self.planner.device().clone();
        let dtype = self.planner.dtype();
        let mut queue = self.epoch_order(self.progress.epoch).into_iter();
        let mut streams: Vec<Option<Stream>> = (0..self.config.batch_size)
            .map(|_| queue.next().map(Stream::start))
            .collect();
        loop {
            let active: Vec<usize> = (0..streams.len()).filter(|&i| streams[i].is_some()).collect();
            if active.is_empty() {
                break;
            }
            let mut inputs = Vec::with_capacity(active.len());
            let mut hidden_rows = Vec::with_capacity(active.len());
            let mut batch: Vec<&TrainingSample> = Vec::with_capacity(active.len());
            for &i in &active {
                let s = streams[i].as_ref().expect("active stream");
                let sample = &self.sequences[s.sequence][s.position];
                inputs.push(sample.input()?);
                hidden_rows.push(match &s.hidden {
                    Some(h) => h.clone(),
                    None => HiddenState::zeros(1, dtype, &device)?,
                });
                batch.push(sample);
            }
            let input = input_batch(&inputs, dtype, &device)?;
            let hidden = HiddenState::stack(&hidden_rows)?;
            // samples borrow self.sequences; clone the handles so the step can borrow self mutably
            let batch: Vec<TrainingSample> = batch.into_iter().cloned().collect();
            let refs: Vec<&TrainingSample> = batch.iter().collect();
            let (next, record) = self.frame_step(&input, &hidden, &refs)?;

            for (k, &i) in active.iter().enumerate() {
                let s = streams[i].as_mut().expect("active stream");
                s.position += 1;
                if s.position == self.sequences[s.sequence].len() {
                    streams[i] = queue.next().map(Stream::start);
                } else {
                    s.hidden = Some(next.row(k)?);
                }
            }
            if let Some(record) = record {
                on_update(&record)?;
                if self.max_reached() {
                    return Ok(EpochEnd::Stopped);
                }
            }
        }
        self.progress.epoch += 1;
        Ok(EpochEnd::Completed)
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub progress: TrainProgress,
    pub final_checkpoint: PathBuf,
    pub updates: Vec<UpdateRecord>,
}

pub fn epoch_checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.safetensors"))
}

/// Trains on `records`, writing a checkpoint after every epoch, a final
/// checkpoint and a JSONL log of every update into `out`.
pub fn train(
    config: &TrainConfig,
    records: Vec<SequenceRecord>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary, ModelError> {
    config.validate()?;
    let sequences = prepare_sequences(records, config.model.anchor_mode, config.stride, config.cache_frames)?;
    if sequences.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    fs::create_dir_all(out).map_err(|e| ModelError::io(out, e))?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(&Checkpoint::load(path)?, config.clone(), sequences, out)?,
        None => Trainer::new(config.clone(), sequences, out)?,
    };

    let log_path = out.join(LOG_FILE);
    let file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| ModelError::io(&log_path, e))?;
    let mut log_file = BufWriter::new(file);
    let mut updates = Vec::new();

    while trainer.progress().epoch < config.epochs {
        let mut sink = |r: &UpdateRecord| -> Result<(), ModelError> {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(log_file, "{line}").map_err(|e| ModelError::io(&log_path, e))?;
            if r.step % 50 == 0 {
                log::info!(
                    "step {} epoch {}: loss {:.4} (reg {:.4}, cls {:.4}), grad norm {:.3}",
                    r.step,
                    r.epoch,
                    r.total,
                    r.regression,
                    r.classification,
                    r.grad_norm
                );
            }
            updates.push(r.clone());
            Ok(())
        };
        let end = trainer.run_epoch(&mut sink)?;
        log_file.flush().map_err(|e| ModelError::io(&log_path, e))?;
        if end == EpochEnd::Stopped {
            break;
        }
        let epoch = trainer.progress().epoch;
        trainer.checkpoint().save(&epoch_checkpoint_path(out, epoch))?;
        log::info!("epoch {epoch} done at step {}", trainer.progress().step);
    }

    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainSummary {
        progress: trainer.progress(),
        final_checkpoint,
        updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        TrainConfig::full_scale().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
        let full = TrainConfig::full_scale();
        assert_eq!(
            (
                full.batch_size,
                full.learning_rate,
                full.grad_clip_norm,
                full.accumulation_steps
            ),
            (48, 1e-4, 1.0, 40)
        );
        for bad in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::full_scale()
            },
            TrainConfig {
                accumulation_steps: 0,
                ..TrainConfig::full_scale()
            },
            TrainConfig {
                learning_rate: -1.0,
                ..TrainConfig::full_scale()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            min_learning_rate: 1e-5,
            lr_schedule: LrSchedule::Cosine,
            max_updates: Some(100),
            ..TrainConfig::desk()
        };
        assert_eq!(cfg.learning_rate_at(0), 1e-3);
        assert!((cfg.learning_rate_at(50) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-15);
        assert!((cfg.learning_rate_at(100) - 1e-5).abs() < 1e-15);
        assert_eq!(cfg.learning_rate_at(500), cfg.learning_rate_at(100));
        assert_eq!(TrainConfig::full_scale().learning_rate_at(10_000), 1e-4);
        let no_horizon = TrainConfig {
            max_updates: None,
            ..cfg
        };
        assert!(no_horizon.validate().is_err());
    }

    #[test]
    fn config_json_round_trip_keeps_infinite_clip() {
        let cfg = TrainConfig {
            grad_clip_norm: f64::INFINITY,
            max_updates: Some(7),
            ..TrainConfig::desk()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flat_keys_fill_nested_configs() {
        let cfg: TrainConfig =
            serde_json::from_str(r#"{"alpha": 0.5, "backbone": "tiny", "anchor_mode": "nuscenes", "modes": 3}"#)
                .unwrap();
        assert_eq!(cfg.loss.alpha, 0.5);
        assert_eq!(cfg.model.modes, 3);
        assert_eq!(cfg.model.anchor_mode, AnchorMode::Nuscenes);
        assert_eq!(cfg.batch_size, 48);
    }
}
