//! Epoch assembly: inverse-frequency class weights, class-balanced index
//! draws, and length-bucketed batching.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Inverse-frequency class weights, normalized so the mean weight over
/// classes is 1. Two classes with counts (90, 10) get weights (0.2, 1.8).
pub fn compute_class_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        if y >= n_classes {
            return Err(Error::Config(format!(
                "label index {y} out of range for {n_classes} classes"
            )));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(c));
    }
    let raw: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
    let mean = raw.iter().sum::<f64>() / n_classes as f64;
    Ok(raw.iter().map(|w| w / mean).collect())
}

/// Draw `n_draws` dataset indices with replacement such that each class is
/// chosen with equal probability, then a member uniformly within the class.
/// Every class must have at least one sample.
pub fn balanced_sample_indices(
    labels: &[usize],
    n_classes: usize,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::Config(format!(
                "label index {y} out of range for {n_classes} classes"
            )));
        }
        per_class[y].push(i);
    }
    if let Some(c) = per_class.iter().position(|v| v.is_empty()) {
        return Err(Error::EmptyClass(c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let c = rng.random_range(0..n_classes);
        let members = &per_class[c];
        out.push(members[rng.random_range(0..members.len())]);
    }
    Ok(out)
}

/// Group indices into batches such that a batch never spans two length
/// buckets. Indices are sorted by length, cut into `n_buckets` quantile
/// chunks, shuffled within each chunk, and batched; finally the batch order
/// itself is shuffled. Every input index appears in exactly one batch.
pub fn bucket_batches(
    lengths: &[usize],
    batch_size: usize,
    n_buckets: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if n_buckets == 0 {
        return Err(Error::Config("n_buckets must be positive".into()));
    }
    let n = lengths.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    for b in 0..n_buckets {
        let lo = b * n / n_buckets;
        let hi = (b + 1) * n / n_buckets;
        if lo == hi {
            continue;
        }
        let mut bucket = order[lo..hi].to_vec();
        bucket.shuffle(&mut rng);
        for chunk in bucket.chunks(batch_size) {
            batches.push(chunk.to_vec());
        }
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Total padding waste of a batching: Σ over batches of Σ (T_max − T_i).
pub fn padding_waste(lengths: &[usize], batches: &[Vec<usize>]) -> usize {
    batches
        .iter()
        .map(|b| {
            let t_max = b.iter().map(|&i| lengths[i]).max().unwrap_or(0);
            b.iter().map(|&i| t_max - lengths[i]).sum::<usize>()
        })
        .sum()
}
