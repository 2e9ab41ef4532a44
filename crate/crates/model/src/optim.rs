//! AdamW with decoupled weight decay, gradient accumulation buffers and
//! global-norm clipping. Moment estimates are kept by parameter name so they
//! can be written to and restored from checkpoints.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    vars: Vec<(String, Var)>,
    /// Number of updates applied so far.
    pub steps: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, config: AdamWConfig) -> Result<Self, ModelError> {
        let mut first_moment = BTreeMap::new();
        let mut second_moment = BTreeMap::new();
        for (name, var) in &vars {
            first_moment.insert(name.clone(), var.as_tensor().zeros_like()?);
            second_moment.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            config,
            vars,
            steps: 0,
            first_moment,
            second_moment,
        })
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// One update from (already clipped) gradients. Parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<(), ModelError> {
        let c = self.config;
        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(name) else { continue };
            let m = self.first_moment.get_mut(name).expect("moment per var");
            *m = ((&*m * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = self.second_moment.get_mut(name).expect("moment per var");
            *v = ((&*v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&*m / bias1)?;
            let v_hat = (&*v / bias2)?;
            let decayed = (var.as_tensor() * (1.0 - c.learning_rate * c.weight_decay))?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            var.set(&(decayed - (update * c.learning_rate)?)?)?;
        }
        Ok(())
    }
}

/// Sums per-frame gradients until an update is due.
#[derive(Debug, Default)]
pub struct GradAccumulator {
    pub sums: BTreeMap<String, Tensor>,
    /// Backward passes folded in since the last update.
    pub count: usize,
}

impl GradAccumulator {
    pub fn add(&mut self, vars: &[(String, Var)], grads: &GradStore) -> Result<(), ModelError> {
        for (name, var) in vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                let g = g.detach();
                let sum = match self.sums.remove(name) {
                    Some(s) => (s + g)?,
                    None => g,
                };
                self.sums.insert(name.clone(), sum);
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn take(&mut self) -> BTreeMap<String, Tensor> {
        self.count = 0;
        std::mem::take(&mut self.sums)
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> Result<f64, ModelError> {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(sq.sqrt())
}

/// Scales gradients so their global L2 norm is at most `max_norm` (the
/// usual `max_norm / (norm + 1e-6)` factor, never above one). Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64, ModelError> {
    let norm = global_norm(grads)?;
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        for g in grads.values_mut() {
            *g = (&*g * coef)?;
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn grads(values: &[(&str, Vec<f64>)]) -> BTreeMap<String, Tensor> {
        values
            .iter()
            .map(|(n, v)| (n.to_string(), Tensor::new(v.as_slice(), &Device::Cpu).unwrap()))
            .collect()
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = grads(&[("a", vec![3.0, 0.0]), ("b", vec![0.0, 4.0])]);
        let norm = clip_grad_norm(&mut g, 1.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((global_norm(&g).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn infinite_clip_leaves_gradients_unchanged() {
        let original = grads(&[("a", vec![3e3, -1.0]), ("b", vec![0.5, 4.0])]);
        let mut g = original.clone();
        clip_grad_norm(&mut g, f64::INFINITY).unwrap();
        for (k, v) in &original {
            assert_eq!(v.to_vec1::<f64>().unwrap(), g[k].to_vec1::<f64>().unwrap());
        }
    }

    #[test]
    fn adamw_matches_hand_computed_first_step() {
        let var = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(vec![("w".into(), var.clone())], cfg).unwrap();
        opt.step(&grads(&[("w", vec![0.3, -0.7])])).unwrap();
        // first step: m_hat = g, v_hat = g^2, so the update is lr * sign(g)
        // (up to eps) after decoupled decay p * (1 - lr * wd)
        let got = var.as_tensor().to_vec1::<f64>().unwrap();
        let want = [
            1.0 * 0.95 - 0.1 * 0.3 / (0.3 + 1e-8),
            -2.0 * 0.95 + 0.1 * 0.7 / (0.7 + 1e-8),
        ];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(opt.steps, 1);
    }

    #[test]
    fn accumulator_sums_and_resets() {
        let var = Var::new(&[1.0f64, 2.0], &Device::Cpu).unwrap();
        let vars = vec![("w".to_string(), var.clone())];
        let mut acc = GradAccumulator::default();
        for scale in [1.0, 2.0] {
            let loss = (var.as_tensor() * scale).unwrap().sum_all().unwrap();
            acc.add(&vars, &loss.backward().unwrap()).unwrap();
        }
        assert_eq!(acc.count, 2);
        let g = acc.take();
        assert_eq!(g["w"].to_vec1::<f64>().unwrap(), vec![3.0, 3.0]);
        assert_eq!(acc.count, 0);
        assert!(acc.sums.is_empty());
    }
}
