//! Seeded parameter initialization.
//!
//! candle's CPU generator cannot be seeded, so variables are created through
//! this backend instead: each one is sampled from a ChaCha stream keyed by
//! the model seed and the variable name, honoring the layer's init hint.
//! Results do not depend on construction order.

use candle_core::{DType, Device, Result, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

struct SeededVarMap {
    map: VarMap,
    seed: u64,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn sample(init: Init, shape: &Shape, rng: &mut impl Rng) -> Vec<f64> {
    let n = shape.elem_count();
    let normal = |rng: &mut dyn rand::RngCore, mean: f64, std: f64| {
        let d = Normal::new(mean, std.max(0.0)).expect("finite normal parameters");
        (0..n).map(|_| d.sample(rng)).collect::<Vec<_>>()
    };
    let uniform = |rng: &mut dyn rand::RngCore, lo: f64, up: f64| {
        if lo >= up {
            return vec![lo; n];
        }
        let d = Uniform::new(lo, up).expect("ordered uniform bounds");
        (0..n).map(|_| d.sample(rng)).collect::<Vec<_>>()
    };
    match init {
        Init::Const(v) => vec![v; n],
        Init::Randn { mean, stdev } => normal(rng, mean, stdev),
        Init::Uniform { lo, up } => uniform(rng, lo, up),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
            match dist {
                NormalOrUniform::Normal => normal(rng, 0.0, std),
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    uniform(rng, -bound, bound)
                }
            }
        }
    }
}

impl SimpleBackend for SeededVarMap {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> Result<Tensor> {
        let mut data = self.map.data().lock().expect("var map poisoned");
        if let Some(var) = data.get(name) {
            if var.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {:?}", var.shape(), s);
            }
            return Ok(var.as_tensor().clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let values = sample(h, &s, &mut rng);
        let tensor = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> Result<Tensor> {
        candle_core::bail!("no shape known for variable {name}")
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.map.data().lock().expect("var map poisoned").contains_key(name)
    }
}

/// A builder whose new variables are registered in `map` and initialized
/// deterministically from `seed`.
pub fn seeded_var_builder(map: &VarMap, seed: u64, dtype: DType, device: &Device) -> VarBuilder<'static> {
    VarBuilder::from_backend(Box::new(SeededVarMap { map: map.clone(), seed }), dtype, device.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(seed: u64) -> (VarMap, Tensor) {
        let map = VarMap::new();
        let vb = seeded_var_builder(&map, seed, DType::F64, &Device::Cpu);
        let lin = candle_nn::linear(64, 32, vb.pp("fc")).unwrap();
        (map, lin.weight().clone())
    }

    #[test]
    fn same_seed_same_weights() {
        let (map, a) = build(3);
        let (_, b) = build(3);
        let (_, c) = build(4);
        let a: Vec<f64> = a.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, build(3).1.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        assert_eq!(a, b.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        assert_ne!(a, c.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        assert!(map.data().lock().unwrap().contains_key("fc.weight"));
    }

    #[test]
    fn kaiming_normal_scale() {
        let (_, w) = build(0);
        let v: Vec<f64> = w.flatten_all().unwrap().to_vec1().unwrap();
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        // relu gain squared over fan-in
        let expected = 2.0 / 64.0;
        assert!((var / expected - 1.0).abs() < 0.15, "{var}");
    }

    #[test]
    fn existing_variables_are_reused() {
        let map = VarMap::new();
        let vb = seeded_var_builder(&map, 1, DType::F32, &Device::Cpu);
        let a = vb.get_with_hints(4, "b", Init::Const(2.0)).unwrap();
        let b = vb.get_with_hints(4, "b", Init::Const(5.0)).unwrap();
        assert_eq!(a.to_vec1::<f32>().unwrap(), b.to_vec1::<f32>().unwrap());
        assert!(vb.get_with_hints(5, "b", Init::Const(0.0)).is_err());
    }
}
