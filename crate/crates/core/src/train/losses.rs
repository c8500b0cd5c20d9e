//! Scalar loss helpers shared by the training loop and its tests.
//!
//! The differentiable versions live on [`crate::graph::Graph`]; these are the
//! pure evaluations used for frozen-value checks and metric reporting.

use crate::graph::{focal_term, log_sum_exp};

/// Weighted binary focal loss for a single logit.
///
/// With `p = sigmoid(logit)` and `p_t = p` when `target` else `1 - p`, this
/// evaluates `-weight * (1 - p_t)^gamma * ln(p_t)` in a saturation-safe form
/// (no explicit `p` is ever formed, so `|logit| = 100` stays finite).
pub fn focal_loss(logit: f64, target: bool, gamma: f64, weight: f64) -> f64 {
    weight * focal_term(logit, target, gamma)
}

/// Unweighted cross-entropy of one logit row against its true class:
/// `log_sum_exp(row) - row[label]`.
pub fn cross_entropy_row(row: &[f64], label: usize) -> f64 {
    assert!(label < row.len(), "label out of range");
    log_sum_exp(row) - row[label]
}
