//! Sequence-level train/validation split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::sequence::DataError;

/// Splits whole sequences into `(train, val)` with `round(ratio * n)`
/// training sequences (kept within `1..n`). Both halves preserve the input
/// order; the assignment depends only on `seed` and `n`.
pub fn split_dataset<T: Clone>(seqs: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::InvalidRatio(ratio));
    }
    let n = seqs.len();
    if n < 2 {
        return Err(DataError::TooFewSequences(n));
    }
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (item, train_side) in seqs.iter().zip(is_train) {
        if train_side {
            train.push(item.clone());
        } else {
            val.push(item.clone());
        }
    }
    Ok((train, val))
}
