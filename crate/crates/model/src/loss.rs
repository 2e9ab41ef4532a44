//! Differentiable MTP loss over a batch of raw head outputs.
//!
//! The supervised mode is chosen outside the graph with
//! [`opdd_core::select_mode`] on the decoded trajectories and then enters
//! the tensor computation as a constant one-hot mask.

use candle_core::{DType, Tensor, D};
use opdd_core::prediction::{decode_point, split_raw};
use opdd_core::{select_mode, EgoTrajectory, LossBreakdown, LossConfig, OutputLayout};

use crate::error::ModelError;
use crate::planner::split_raw_tensor;

#[derive(Debug)]
pub struct BatchLoss {
    /// Mean of the per-sample totals; the value to differentiate.
    pub total: Tensor,
    pub per_sample: Vec<LossBreakdown>,
}

impl BatchLoss {
    /// Batch means of the three loss terms.
    pub fn mean_breakdown(&self) -> (f64, f64, f64) {
        let n = self.per_sample.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| self.per_sample.iter().map(f).sum::<f64>() / n;
        (sum(|b| b.total), sum(|b| b.regression), sum(|b| b.classification))
    }
}

fn sinh(v: &Tensor) -> candle_core::Result<Tensor> {
    (v.exp()? - v.neg()?.exp()?)? * 0.5
}

/// Smooth-L1 with transition `beta`, elementwise: quadratic below `beta`,
/// linear above.
fn smooth_l1(d: &Tensor, beta: f64) -> candle_core::Result<Tensor> {
    let a = d.abs()?;
    let m = (&a - (&a - beta)?.relu()?)?;
    (m.sqr()? * (0.5 / beta))? + (a - m)?
}

/// `relu(z) - z*y + log(1 + exp(-|z|))`, stable for large `|z|`.
fn bce_with_logits(z: &Tensor, y: &Tensor) -> candle_core::Result<Tensor> {
    let soft = (z.abs()?.neg()?.exp()? + 1.0)?.log()?;
    (z.relu()? - (z * y)?)? + soft
}

pub fn mtp_loss_batch(
    raw: &Tensor,
    gts: &[&EgoTrajectory],
    layout: OutputLayout,
    cfg: &LossConfig,
) -> Result<BatchLoss, ModelError> {
    cfg.validate()?;
    let (b, d) = raw.dims2()?;
    if d != layout.dim() || b != gts.len() {
        return Err(ModelError::Shape(format!(
            "raw output ({b}, {d}) vs {} ground truths of layout dim {}",
            gts.len(),
            layout.dim()
        )));
    }
    if let Some(g) = gts.iter().find(|g| g.len() != layout.points) {
        return Err(ModelError::Shape(format!(
            "ground truth has {} points, layout expects {}",
            g.len(),
            layout.points
        )));
    }
    let dtype = raw.dtype();
    let device = raw.device();

    let rows: Vec<Vec<f64>> = raw.detach().to_dtype(DType::F64)?.to_vec2()?;
    let mut selected = Vec::with_capacity(b);
    for (row, gt) in rows.iter().zip(gts) {
        let (coords, _) = split_raw(row, layout)?;
        let decoded: Vec<Vec<[f64; 3]>> = coords
            .iter()
            .map(|m| m.iter().map(|&c| decode_point(c)).collect())
            .collect();
        selected.push(select_mode(&decoded, &gt.to_arrays(), cfg.selection));
    }
    let mut one_hot = vec![0f64; b * layout.modes];
    for (i, &m) in selected.iter().enumerate() {
        one_hot[i * layout.modes + m] = 1.0;
    }
    let one_hot = Tensor::from_vec(one_hot, (b, layout.modes), device)?.to_dtype(dtype)?;
    let gt_values: Vec<f64> = gts.iter().flat_map(|g| g.to_arrays()).flatten().collect();
    let gt = Tensor::from_vec(gt_values, (b, layout.points, 3), device)?.to_dtype(dtype)?;

    let (coords, logits) = split_raw_tensor(raw, layout)?;
    let mask = one_hot.reshape((b, layout.modes, 1, 1))?;
    let chosen = coords.broadcast_mul(&mask)?.sum(1)?;
    let decoded = Tensor::cat(
        &[
            chosen.narrow(D::Minus1, 0, 1)?.exp()?,
            sinh(&chosen.narrow(D::Minus1, 1, 1)?)?,
            chosen.narrow(D::Minus1, 2, 1)?,
        ],
        D::Minus1,
    )?;
    let regression = smooth_l1(&(decoded - gt)?, cfg.smooth_l1_beta)?
        .flatten_from(1)?
        .mean(1)?;
    let classification = bce_with_logits(&logits, &one_hot)?.mean(1)?;
    let per_total = (&regression + (&classification * cfg.alpha)?)?;
    let total = per_total.mean(0)?;

    let reg: Vec<f64> = regression.to_dtype(DType::F64)?.to_vec1()?;
    let cls: Vec<f64> = classification.to_dtype(DType::F64)?.to_vec1()?;
    let per_sample = reg
        .iter()
        .zip(&cls)
        .zip(&selected)
        .map(|((&r, &c), &m)| LossBreakdown {
            total: r + cfg.alpha * c,
            regression: r,
            classification: c,
            selected_mode: m,
        })
        .collect();
    Ok(BatchLoss { total, per_sample })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use opdd_core::{mtp_loss, AnchorSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(rng: &mut ChaCha8Rng, layout: OutputLayout, anchors: &AnchorSet) -> (Vec<f64>, EgoTrajectory) {
        let raw: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-1.5..3.0)).collect();
        let speed = rng.random_range(2.0..20.0);
        let curve = rng.random_range(-0.3..0.3);
        let pts = anchors
            .times()
            .iter()
            .map(|t| nalgebra::Vector3::new(speed * t + 0.1, curve * t * t, 0.05 * t))
            .collect();
        (raw, EgoTrajectory::new(anchors.clone(), pts).unwrap())
    }

    fn core_loss(raw: &[f64], gt: &EgoTrajectory, layout: OutputLayout, cfg: &LossConfig) -> LossBreakdown {
        let (coords, logits) = split_raw(raw, layout).unwrap();
        mtp_loss(&coords, &logits, &gt.to_arrays(), cfg).unwrap()
    }

    #[test]
    fn batch_loss_matches_scalar_reference() {
        let anchors = AnchorSet::nuscenes();
        let layout = OutputLayout { modes: 5, points: 10 };
        let cfg = LossConfig {
            alpha: 0.7,
            smooth_l1_beta: 0.5,
            ..LossConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cases: Vec<_> = (0..6).map(|_| random_case(&mut rng, layout, &anchors)).collect();
        let flat: Vec<f64> = cases.iter().flat_map(|(r, _)| r.clone()).collect();
        let raw = Tensor::from_vec(flat, (6, layout.dim()), &Device::Cpu).unwrap();
        let gts: Vec<&EgoTrajectory> = cases.iter().map(|(_, g)| g).collect();
        let loss = mtp_loss_batch(&raw, &gts, layout, &cfg).unwrap();
        let mut mean = 0.0;
        for ((r, g), got) in cases.iter().zip(&loss.per_sample) {
            let want = core_loss(r, g, layout, &cfg);
            assert_eq!(got.selected_mode, want.selected_mode);
            assert!((got.regression - want.regression).abs() < 1e-9);
            assert!((got.classification - want.classification).abs() < 1e-9);
            assert!((got.total - (got.regression + cfg.alpha * got.classification)).abs() < 1e-12);
            mean += want.total / 6.0;
        }
        assert!((loss.total.to_scalar::<f64>().unwrap() - mean).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_central_differences() {
        let anchors = AnchorSet::nuscenes();
        let layout = OutputLayout { modes: 3, points: 10 };
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut raw, gt) = random_case(&mut rng, layout, &anchors);
        // make mode 1 a clear winner so small perturbations keep the selection
        for (k, p) in gt.points().iter().enumerate() {
            let enc = opdd_core::prediction::encode_point([p.x * 1.1, p.y + 0.2, p.z]);
            raw[layout.mode_stride() + 3 * k..layout.mode_stride() + 3 * k + 3].copy_from_slice(&enc);
        }
        let var = Var::from_vec(raw.clone(), (1, layout.dim()), &Device::Cpu).unwrap();
        let loss = mtp_loss_batch(var.as_tensor(), &[&gt], layout, &cfg).unwrap();
        assert_eq!(loss.per_sample[0].selected_mode, 1);
        let grads = loss.total.backward().unwrap();
        let g: Vec<f64> = grads
            .get(var.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let eps = 1e-5;
        for i in 0..raw.len() {
            let mut plus = raw.clone();
            let mut minus = raw.clone();
            plus[i] += eps;
            minus[i] -= eps;
            let fd =
                (core_loss(&plus, &gt, layout, &cfg).total - core_loss(&minus, &gt, layout, &cfg).total) / (2.0 * eps);
            let scale = fd.abs().max(g[i].abs()).max(1e-6);
            assert!(
                (fd - g[i]).abs() / scale < 1e-4,
                "index {i}: fd {fd} vs autograd {}",
                g[i]
            );
        }
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let anchors = AnchorSet::comma();
        let layout = OutputLayout { modes: 2, points: 33 };
        let pts: Vec<_> = anchors
            .times()
            .iter()
            .map(|t| nalgebra::Vector3::new(10.0 * t + 0.5, 0.0, 0.0))
            .collect();
        let gt = EgoTrajectory::new(anchors, pts).unwrap();
        let mut raw = Vec::new();
        for (m, logit) in [(0, -20.0), (1, 20.0)] {
            for p in gt.points() {
                let q = if m == 1 { [p.x, p.y, p.z] } else { [1.0, -5.0, 0.0] };
                raw.extend(opdd_core::prediction::encode_point(q));
            }
            raw.push(logit);
        }
        let raw = Tensor::from_vec(raw, (1, layout.dim()), &Device::Cpu).unwrap();
        let loss = mtp_loss_batch(&raw, &[&gt], layout, &LossConfig::default()).unwrap();
        assert_eq!(loss.per_sample[0].selected_mode, 1);
        assert!(loss.per_sample[0].total < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// A row's loss does not depend on the rest of the batch.
        #[test]
        fn rows_are_scored_independently(seed in any::<u64>(), batch in 2usize..5) {
            let anchors = AnchorSet::nuscenes();
            let layout = OutputLayout { modes: 3, points: 10 };
            let cfg = LossConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cases: Vec<_> = (0..batch).map(|_| random_case(&mut rng, layout, &anchors)).collect();
            let flat: Vec<f64> = cases.iter().flat_map(|(r, _)| r.clone()).collect();
            let raw = Tensor::from_vec(flat, (batch, layout.dim()), &Device::Cpu).unwrap();
            let gts: Vec<&EgoTrajectory> = cases.iter().map(|(_, g)| g).collect();
            let joint = mtp_loss_batch(&raw, &gts, layout, &cfg).unwrap();
            for (i, (r, g)) in cases.iter().enumerate() {
                let row = Tensor::from_vec(r.clone(), (1, layout.dim()), &Device::Cpu).unwrap();
                let alone = mtp_loss_batch(&row, &[g], layout, &cfg).unwrap();
                prop_assert_eq!(alone.per_sample[0].selected_mode, joint.per_sample[i].selected_mode);
                prop_assert!((alone.per_sample[0].total - joint.per_sample[i].total).abs() < 1e-12);
            }
        }
    }
}
