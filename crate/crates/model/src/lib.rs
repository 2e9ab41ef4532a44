//! Trajectory planner network (CNN backbone, GRU, multimodal head) with its
//! training loop, evaluation runner, checkpoints and bird's-eye-view plots.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod init;
pub mod loss;
pub mod optim;
pub mod planner;
pub mod train;
pub mod viz;

pub use backbone::{BackboneVariant, FEATURE_MAP_HW};
pub use checkpoint::{Checkpoint, OptimizerState, TrainProgress};
pub use error::ModelError;
pub use eval::{evaluate, EvalConfig, EvalReport, Evaluation, GroundTruthPredictor, PlannerPredictor, Predictor};
pub use loss::{mtp_loss_batch, BatchLoss};
pub use optim::{clip_grad_norm, global_norm, AdamW, AdamWConfig, GradAccumulator};
pub use planner::{input_batch, AnchorMode, HiddenState, ModelConfig, Planner, FEATURE_LEN, GRU_WIDTH};
pub use train::{prepare_sequences, train, EpochEnd, LrSchedule, TrainConfig, TrainSummary, Trainer, UpdateRecord};
pub use viz::{
    bev_file_name, bev_plot, load_label_font, polyline_deviation, render_bev, visualize, BevMapping, BevPlot, Polyline,
};
