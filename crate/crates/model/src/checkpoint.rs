//! Checkpoints: one safetensors file holding the model weights, optional
//! optimizer and gradient-accumulation state, and JSON metadata (model
//! config, training config and progress counters).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::optim::{AdamW, GradAccumulator};
use crate::planner::{ModelConfig, Planner};
use crate::train::TrainConfig;

const FORMAT: &str = "opdd-checkpoint-1";
const MODEL_PREFIX: &str = "model.";
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";
const ACCUM_PREFIX: &str = "accum.";

/// Where training stood when the checkpoint was written.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainProgress {
    /// Optimizer updates applied.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Backward passes folded into the pending accumulation.
    pub accumulated: usize,
    /// Loss sums (total, regression, classification) of those passes.
    #[serde(default)]
    pub pending_loss: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
    pub accumulated_grads: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub progress: TrainProgress,
    pub weights: BTreeMap<String, Tensor>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    /// Snapshot of a model (and optionally its training state).
    pub fn capture(
        planner: &Planner,
        training: Option<(&TrainConfig, TrainProgress, &AdamW, &GradAccumulator)>,
    ) -> Self {
        let weights = planner
            .named_vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().detach()))
            .collect();
        let (train_config, progress, optimizer) = match training {
            Some((cfg, progress, opt, acc)) => (
                Some(cfg.clone()),
                progress,
                Some(OptimizerState {
                    first_moment: opt.first_moment.clone(),
                    second_moment: opt.second_moment.clone(),
                    accumulated_grads: acc.sums.clone(),
                }),
            ),
            None => (None, TrainProgress::default(), None),
        };
        Self {
            model_config: *planner.config(),
            train_config,
            progress,
            weights,
            optimizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (k, t) in &self.weights {
            tensors.push((format!("{MODEL_PREFIX}{k}"), t));
        }
        if let Some(o) = &self.optimizer {
            for (prefix, map) in [
                (M_PREFIX, &o.first_moment),
                (V_PREFIX, &o.second_moment),
                (ACCUM_PREFIX, &o.accumulated_grads),
            ] {
                for (k, t) in map {
                    tensors.push((format!("{prefix}{k}"), t));
                }
            }
        }
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("model_config".to_string(), json(&self.model_config));
        meta.insert("progress".to_string(), json(&self.progress));
        meta.insert("has_optimizer".to_string(), self.optimizer.is_some().to_string());
        if let Some(cfg) = &self.train_config {
            meta.insert("train_config".to_string(), json(cfg));
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| ModelError::io(parent, e))?;
        }
        safetensors::serialize_to_file(tensors, Some(meta), path)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::io(path, e))?;
        let bad = |msg: String| ModelError::Checkpoint(format!("{}: {msg}", path.display()));
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| bad("missing metadata".into()))?;
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(bad(format!("unsupported format {:?}", meta.get("format"))));
        }
        let field = |key: &str| meta.get(key).ok_or_else(|| bad(format!("missing metadata key {key}")));
        let model_config: ModelConfig = serde_json::from_str(field("model_config")?).map_err(|e| bad(e.to_string()))?;
        let progress: TrainProgress = serde_json::from_str(field("progress")?).map_err(|e| bad(e.to_string()))?;
        let train_config = match meta.get("train_config") {
            Some(s) => Some(serde_json::from_str(s).map_err(|e| bad(e.to_string()))?),
            None => None,
        };
        let has_optimizer = field("has_optimizer")? == "true";

        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut weights = BTreeMap::new();
        let mut opt = OptimizerState {
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            accumulated_grads: BTreeMap::new(),
        };
        for (name, t) in tensors {
            if let Some(k) = name.strip_prefix(MODEL_PREFIX) {
                weights.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(M_PREFIX) {
                opt.first_moment.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(V_PREFIX) {
                opt.second_moment.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(ACCUM_PREFIX) {
                opt.accumulated_grads.insert(k.to_string(), t);
            } else {
                return Err(bad(format!("unexpected tensor {name}")));
            }
        }
        Ok(Self {
            model_config,
            train_config,
            progress,
            weights,
            optimizer: has_optimizer.then_some(opt),
        })
    }

    /// Rebuilds the network and loads the stored weights.
    pub fn planner(&self, dtype: DType, device: &Device) -> Result<Planner, ModelError> {
        let planner = Planner::new(self.model_config, 0, dtype, device)?;
        planner.load_state(&self.weights)?;
        Ok(planner)
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}
