//! The planning network: backbone, 3x3 channel reduction to a 1024-long
//! feature vector, a GRU of width 512 and a two-layer fully connected head
//! producing `M * (3N + 1)` raw values per sample.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::rnn::{GRUConfig, GRUState, RNN};
use candle_nn::{conv2d, gru, linear, Conv2d, Conv2dConfig, Linear, VarMap, GRU};
use opdd_core::calib::{INPUT_CHANNELS, MODEL_INPUT_HEIGHT, MODEL_INPUT_WIDTH};
use opdd_core::{decode_output, InputTensor, MultimodalPrediction, OutputLayout};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneVariant, FEATURE_MAP_HW};
use crate::error::ModelError;
use crate::init::seeded_var_builder;

pub use opdd_core::AnchorMode;

pub const GRU_WIDTH: usize = 512;
pub const REDUCED_CHANNELS: usize = 32;
pub const FEATURE_LEN: usize = REDUCED_CHANNELS * FEATURE_MAP_HW.0 * FEATURE_MAP_HW.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub modes: usize,
    pub anchor_mode: AnchorMode,
    pub gru_width: usize,
    pub feature_len: usize,
    pub backbone: BackboneVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modes: 5,
            anchor_mode: AnchorMode::Comma,
            gru_width: GRU_WIDTH,
            feature_len: FEATURE_LEN,
            backbone: BackboneVariant::Full,
        }
    }
}

impl ModelConfig {
    pub fn tiny(anchor_mode: AnchorMode) -> Self {
        Self {
            anchor_mode,
            backbone: BackboneVariant::Tiny,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.modes == 0 {
            return Err(ModelError::Config("modes must be at least 1".into()));
        }
        if self.gru_width != GRU_WIDTH {
            return Err(ModelError::Config(format!(
                "gru_width must be {GRU_WIDTH}, got {}",
                self.gru_width
            )));
        }
        if self.feature_len != FEATURE_LEN {
            return Err(ModelError::Config(format!(
                "feature_len must be {FEATURE_LEN} (32 x 4 x 8), got {}",
                self.feature_len
            )));
        }
        Ok(())
    }

    pub fn points(&self) -> usize {
        self.anchor_mode.anchors().len()
    }

    pub fn layout(&self) -> OutputLayout {
        OutputLayout {
            modes: self.modes,
            points: self.points(),
        }
    }

    /// `D = M * (3N + 1)`.
    pub fn output_dim(&self) -> usize {
        self.layout().dim()
    }
}

/// Per-sample GRU state, shape `(B, gru_width)`.
#[derive(Debug, Clone)]
pub struct HiddenState(Tensor);

impl HiddenState {
    pub fn zeros(batch: usize, dtype: DType, device: &Device) -> Result<Self, ModelError> {
        Ok(Self(Tensor::zeros((batch, GRU_WIDTH), dtype, device)?))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self, ModelError> {
        match t.dims() {
            [_, GRU_WIDTH] => Ok(Self(t)),
            dims => Err(ModelError::Shape(format!(
                "hidden state must be (B, {GRU_WIDTH}), got {dims:?}"
            ))),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.dim(0).expect("rank-2 hidden state")
    }

    /// Cuts the gradient path to earlier frames.
    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    pub fn row(&self, i: usize) -> Result<Self, ModelError> {
        Ok(Self(self.0.narrow(0, i, 1)?))
    }

    pub fn stack(rows: &[HiddenState]) -> Result<Self, ModelError> {
        let ts: Vec<&Tensor> = rows.iter().map(|h| &h.0).collect();
        Ok(Self(Tensor::cat(&ts, 0)?))
    }
}

/// Batches network inputs into a `(B, 6, 128, 256)` tensor.
pub fn input_batch(inputs: &[InputTensor], dtype: DType, device: &Device) -> Result<Tensor, ModelError> {
    let mut data = Vec::with_capacity(inputs.len() * inputs.first().map_or(0, |i| i.as_slice().len()));
    for i in inputs {
        data.extend_from_slice(i.as_slice());
    }
    let t = Tensor::from_vec(
        data,
        (
            inputs.len(),
            INPUT_CHANNELS,
            MODEL_INPUT_HEIGHT as usize,
            MODEL_INPUT_WIDTH as usize,
        ),
        device,
    )?;
    Ok(t.to_dtype(dtype)?)
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

pub struct Planner {
    config: ModelConfig,
    varmap: VarMap,
    backbone: Backbone,
    reduce: Conv2d,
    gru: GRU,
    fc1: Linear,
    fc2: Linear,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for Planner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Planner")
            .field("config", &self.config)
            .field("dtype", &self.dtype)
            .field("device", &self.device)
            .finish_non_exhaustive()
    }
}

impl Planner {
    /// Builds the network with weights drawn deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self, ModelError> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = seeded_var_builder(&varmap, seed, dtype, device);
        let backbone = Backbone::new(config.backbone, vb.pp("backbone"))?;
        let reduce = conv2d(
            backbone.out_channels(),
            REDUCED_CHANNELS,
            3,
            Conv2dConfig {
                padding: 1,
                ..Default::default()
            },
            vb.pp("reduce"),
        )?;
        let gru = gru(config.feature_len, config.gru_width, GRUConfig::default(), vb.pp("gru"))?;
        let fc1 = linear(config.gru_width, config.gru_width, vb.pp("head.fc1"))?;
        let fc2 = linear(config.gru_width, config.output_dim(), vb.pp("head.fc2"))?;
        Ok(Self {
            config,
            varmap,
            backbone,
            reduce,
            gru,
            fc1,
            fc2,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn zero_hidden(&self, batch: usize) -> Result<HiddenState, ModelError> {
        HiddenState::zeros(batch, self.dtype, &self.device)
    }

    fn check_input(&self, input: &Tensor) -> Result<(), ModelError> {
        match input.dims() {
            [_, c, h, w]
                if *c == INPUT_CHANNELS && *h == MODEL_INPUT_HEIGHT as usize && *w == MODEL_INPUT_WIDTH as usize =>
            {
                Ok(())
            }
            dims => Err(ModelError::Shape(format!(
                "input must be (B, {INPUT_CHANNELS}, {MODEL_INPUT_HEIGHT}, {MODEL_INPUT_WIDTH}), got {dims:?}"
            ))),
        }
    }

    /// Backbone output, `(B, C, 4, 8)`. Pixel values in `[0, 1]` are
    /// centred on zero first.
    pub fn backbone_map(&self, input: &Tensor, train: bool) -> Result<Tensor, ModelError> {
        self.check_input(input)?;
        Ok(self.backbone.forward_t(&(input - 0.5)?, train)?)
    }

    /// Flattened reduced features, `(B, 1024)`.
    pub fn feature_vector(&self, input: &Tensor, train: bool) -> Result<Tensor, ModelError> {
        let map = self.backbone_map(input, train)?;
        Ok(self.reduce.forward(&map)?.flatten_from(1)?)
    }

    /// One recurrent step: raw head output `(B, D)` and the next hidden state.
    pub fn forward_t(
        &self,
        input: &Tensor,
        hidden: &HiddenState,
        train: bool,
    ) -> Result<(Tensor, HiddenState), ModelError> {
        let batch = input.dim(0)?;
        if hidden.batch_size() != batch {
            return Err(ModelError::Shape(format!(
                "hidden state batch {} does not match input batch {batch}",
                hidden.batch_size()
            )));
        }
        let features = self.feature_vector(input, train)?;
        let state = self.gru.step(&features, &GRUState { h: hidden.0.clone() })?;
        let h = state.h;
        let raw = self.fc2.forward(&self.fc1.forward(&h)?.relu()?)?;
        Ok((raw, HiddenState(h)))
    }

    /// Inference-mode step.
    pub fn forward(&self, input: &Tensor, hidden: &HiddenState) -> Result<(Tensor, HiddenState), ModelError> {
        self.forward_t(input, hidden, false)
    }

    /// Decodes each row of a `(B, D)` raw output.
    pub fn decode(&self, raw: &Tensor) -> Result<Vec<MultimodalPrediction>, ModelError> {
        let rows: Vec<Vec<f64>> = raw.to_dtype(DType::F64)?.to_vec2()?;
        let anchors = self.config.anchor_mode.anchors();
        rows.iter()
            .map(|r| Ok(decode_output(r, self.config.layout(), &anchors)?))
            .collect()
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// Every stored tensor (weights and normalization statistics) by name.
    pub fn named_vars(&self) -> BTreeMap<String, Var> {
        self.varmap
            .data()
            .lock()
            .expect("var map poisoned")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Optimized parameters, sorted by name.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.named_vars()
            .into_iter()
            .filter(|(k, _)| !is_running_stat(k))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.trainable_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Parameters of the GRU and fully connected head.
    pub fn head_param_count(&self) -> usize {
        self.trainable_vars()
            .iter()
            .filter(|(k, _)| k.starts_with("gru.") || k.starts_with("head."))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrites stored tensors from `values`; every variable must be present.
    pub fn load_state(&self, values: &BTreeMap<String, Tensor>) -> Result<(), ModelError> {
        for (name, var) in self.named_vars() {
            let t = values
                .get(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Squared L2 sum over all stored tensors; changes whenever any weight does.
    pub fn weight_checksum(&self) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for (_, v) in self.named_vars() {
            total += v
                .as_tensor()
                .to_dtype(DType::F64)?
                .sqr()?
                .sum_all()?
                .to_scalar::<f64>()?;
        }
        Ok(total)
    }

    /// Split of a `(B, D)` raw output into coordinates `(B, M, N, 3)` and
    /// confidence logits `(B, M)`.
    pub fn split_raw(&self, raw: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        let layout = self.config.layout();
        split_raw_tensor(raw, layout)
    }
}

pub fn split_raw_tensor(raw: &Tensor, layout: OutputLayout) -> Result<(Tensor, Tensor), ModelError> {
    let b = raw.dim(0)?;
    let per_mode = raw.reshape((b, layout.modes, layout.mode_stride()))?;
    let coords = per_mode
        .narrow(D::Minus1, 0, layout.points * 3)?
        .reshape((b, layout.modes, layout.points, 3))?;
    let logits = per_mode.narrow(D::Minus1, layout.points * 3, 1)?.squeeze(D::Minus1)?;
    Ok((coords, logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Planner {
        Planner::new(ModelConfig::tiny(AnchorMode::Nuscenes), 7, DType::F32, &Device::Cpu).unwrap()
    }

    fn input(b: usize, value: f32) -> Tensor {
        Tensor::full(value, (b, 6, 128, 256), &Device::Cpu).unwrap()
    }

    #[test]
    fn config_invariants() {
        assert_eq!(ModelConfig::default().output_dim(), 500);
        assert_eq!(ModelConfig::tiny(AnchorMode::Nuscenes).output_dim(), 155);
        let bad = ModelConfig {
            gru_width: 256,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            modes: 0,
            ..ModelConfig::default()
        };
        assert!(Planner::new(bad, 0, DType::F32, &Device::Cpu).is_err());
    }

    #[test]
    fn tiny_shapes() {
        let p = tiny();
        let x = input(2, 0.5);
        assert_eq!(p.backbone_map(&x, false).unwrap().dims(), &[2, 64, 4, 8]);
        assert_eq!(p.feature_vector(&x, false).unwrap().dims(), &[2, 1024]);
        let (raw, h) = p.forward(&x, &p.zero_hidden(2).unwrap()).unwrap();
        assert_eq!(raw.dims(), &[2, 155]);
        assert_eq!(h.tensor().dims(), &[2, 512]);
        assert!(p.forward(&x, &p.zero_hidden(3).unwrap()).is_err());
        assert!(p
            .forward(&input(1, 0.0).narrow(3, 0, 128).unwrap(), &p.zero_hidden(1).unwrap())
            .is_err());
    }

    #[test]
    fn split_matches_layout() {
        let layout = OutputLayout { modes: 2, points: 2 };
        let raw = Tensor::arange(0f32, 14.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 14))
            .unwrap();
        let (coords, logits) = split_raw_tensor(&raw, layout).unwrap();
        assert_eq!(coords.dims(), &[1, 2, 2, 3]);
        assert_eq!(logits.to_vec2::<f32>().unwrap(), vec![vec![6.0, 13.0]]);
        let m1: Vec<f32> = coords
            .get(0)
            .unwrap()
            .get(1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(m1, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn trainable_vars_are_sorted_and_complete() {
        let p = tiny();
        let names: Vec<String> = p.trainable_vars().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert!(names.contains(&"gru.weight_ih_l0".to_string()));
        assert!(names.contains(&"head.fc2.bias".to_string()));
        assert_eq!(
            p.head_param_count(),
            3 * 512 * (1024 + 512) + 6 * 512 + 512 * 512 + 512 + 512 * 155 + 155
        );
    }
}
