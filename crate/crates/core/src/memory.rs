//! Per-class exemplar memory for feature refinement.
//!
//! Each class owns a bounded bank of unit-normalized feature vectors
//! harvested from confidently-correct training samples. A full bank absorbs
//! new features by momentum-updating its most similar slot instead of
//! evicting. Retrieval returns the top-k stored vectors by cosine
//! similarity; prototypes are normalized per-class slot means. The
//! [`AlphaSchedule`] gates the refinement loss so early epochs train the
//! classifier alone while the banks fill.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine, normalize};

/// Tunables for the exemplar banks.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    /// Maximum stored vectors per class.
    pub capacity: usize,
    /// How many neighbours retrieval returns.
    pub top_k: usize,
    /// Weight kept by the existing slot when a full bank absorbs a feature.
    pub momentum: f64,
    /// Minimum predicted-class probability for a sample to be stored.
    pub confidence_threshold: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            capacity: 50,
            top_k: 5,
            momentum: 0.9,
            confidence_threshold: 0.7,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::Config("memory capacity must be at least 1".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("memory top_k must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "memory momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config(format!(
                "confidence threshold must be in [0, 1], got {}",
                self.confidence_threshold
            )));
        }
        Ok(())
    }
}

/// Per-class banks of unit vectors with momentum absorption when full.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    cfg: MemoryConfig,
    dim: usize,
    slots: Vec<Vec<Vec<f64>>>,
    insert_counts: Vec<u64>,
}

impl MemoryBank {
    pub fn new(n_classes: usize, dim: usize, cfg: MemoryConfig) -> Result<Self> {
        cfg.validate()?;
        if n_classes == 0 || dim == 0 {
            return Err(Error::Config(
                "memory bank needs at least one class and one feature dimension".into(),
            ));
        }
        Ok(MemoryBank {
            cfg,
            dim,
            slots: vec![Vec::new(); n_classes],
            insert_counts: vec![0; n_classes],
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.cfg
    }

    pub fn n_classes(&self) -> usize {
        self.slots.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of vectors currently stored for `class`.
    pub fn class_len(&self, class: usize) -> usize {
        self.slots[class].len()
    }

    /// Total accepted insertions for `class`, including momentum merges.
    pub fn insert_count(&self, class: usize) -> u64 {
        self.insert_counts[class]
    }

    /// Stored vectors for `class`, in slot order (for serialization).
    pub fn class_slots(&self, class: usize) -> &[Vec<f64>] {
        &self.slots[class]
    }

    /// Reinstate one class's slots from a checkpoint. Vectors are
    /// re-normalized so a round trip through a lower-precision format cannot
    /// violate the unit-norm invariant.
    pub fn restore_class(&mut self, class: usize, vectors: Vec<Vec<f64>>, count: u64) -> Result<()> {
        if class >= self.slots.len() {
            return Err(Error::Config(format!(
                "class {class} out of range for {}-class memory bank",
                self.slots.len()
            )));
        }
        if vectors.len() > self.cfg.capacity {
            return Err(Error::Incompatible(format!(
                "class {class} restore holds {} vectors, capacity is {}",
                vectors.len(),
                self.cfg.capacity
            )));
        }
        let mut restored = Vec::with_capacity(vectors.len());
        for mut v in vectors {
            if v.len() != self.dim {
                return Err(Error::Incompatible(format!(
                    "class {class} restore vector has dim {}, bank expects {}",
                    v.len(),
                    self.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) || normalize(&mut v) == 0.0 {
                return Err(Error::NonFinite(format!(
                    "class {class} restore vector is not a finite non-zero vector"
                )));
            }
            restored.push(v);
        }
        self.slots[class] = restored;
        self.insert_counts[class] = count;
        Ok(())
    }

    /// Store `feature` under `true_class` iff the prediction was correct and
    /// confident. Returns whether the bank changed. A full bank folds the
    /// feature into its most similar slot:
    /// `slot <- normalize(momentum * slot + (1 - momentum) * feature)`.
    pub fn maybe_insert(
        &mut self,
        feature: &[f64],
        predicted_class: usize,
        true_class: usize,
        confidence: f64,
    ) -> Result<bool> {
        if predicted_class >= self.slots.len() || true_class >= self.slots.len() {
            return Err(Error::Config(format!(
                "class index out of range: predicted {predicted_class}, true {true_class}, bank has {}",
                self.slots.len()
            )));
        }
        if feature.len() != self.dim {
            return Err(Error::Shape(format!(
                "feature dim {} does not match bank dim {}",
                feature.len(),
                self.dim
            )));
        }
        if feature.iter().any(|x| !x.is_finite()) || !confidence.is_finite() {
            return Err(Error::NonFinite(
                "memory insertion requires finite feature and confidence".into(),
            ));
        }
        if predicted_class != true_class || confidence < self.cfg.confidence_threshold {
            return Ok(false);
        }

        let mut unit = feature.to_vec();
        if normalize(&mut unit) == 0.0 {
            return Err(Error::NonFinite(
                "cannot store an all-zero feature vector".into(),
            ));
        }

        let bank = &mut self.slots[true_class];
        if bank.len() < self.cfg.capacity {
            bank.push(unit);
        } else {
            // All slots and the query are unit vectors, so cosine is a dot
            // product; ties keep the earliest slot.
            let mut best = 0usize;
            let mut best_cos = f64::NEG_INFINITY;
            for (i, slot) in bank.iter().enumerate() {
                let c = cosine(slot, &unit);
                if c > best_cos {
                    best_cos = c;
                    best = i;
                }
            }
            let mu = self.cfg.momentum;
            let slot = &mut bank[best];
            for (s, f) in slot.iter_mut().zip(&unit) {
                *s = mu * *s + (1.0 - mu) * f;
            }
            if normalize(slot) == 0.0 {
                // Only reachable when feature == -momentum/(1-momentum) * slot;
                // refuse to keep a degenerate zero slot.
                return Err(Error::NonFinite(
                    "momentum update produced a zero vector".into(),
                ));
            }
        }
        self.insert_counts[true_class] += 1;
        Ok(true)
    }

    /// Slot indices of the `k` stored vectors of `class` most similar to
    /// `feature`, cosine-descending, earliest slot first on ties.
    pub fn topk_indices(&self, feature: &[f64], class: usize, k: usize) -> Vec<usize> {
        let bank = &self.slots[class];
        let mut scored: Vec<(usize, f64)> = bank
            .iter()
            .enumerate()
            .map(|(i, slot)| (i, cosine(slot, feature)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored.into_iter().map(|(i, _)| i).collect()
    }

    /// The stored vectors behind [`Self::topk_indices`], cloned for use as
    /// constants in a refinement pass. Empty when the class bank is empty.
    pub fn retrieve_topk(&self, feature: &[f64], class: usize, k: usize) -> Vec<Vec<f64>> {
        self.topk_indices(feature, class, k)
            .into_iter()
            .map(|i| self.slots[class][i].clone())
            .collect()
    }

    /// Normalized mean of each class's slots; `None` for empty banks.
    pub fn prototypes(&self) -> Vec<Option<Vec<f64>>> {
        self.slots
            .iter()
            .map(|bank| {
                if bank.is_empty() {
                    return None;
                }
                let mut mean = vec![0.0; self.dim];
                for slot in bank {
                    for (m, s) in mean.iter_mut().zip(slot) {
                        *m += s;
                    }
                }
                let inv = 1.0 / bank.len() as f64;
                for m in mean.iter_mut() {
                    *m *= inv;
                }
                if normalize(&mut mean) == 0.0 {
                    // Slots cancelled out exactly; no usable prototype.
                    return None;
                }
                Some(mean)
            })
            .collect()
    }

    /// L2 norm of each class's raw slot mean *before* normalization — 1.0
    /// means the bank has collapsed onto one direction, small values mean the
    /// slots disagree. `None` for empty banks.
    pub fn prototype_norms(&self) -> Vec<Option<f64>> {
        self.slots
            .iter()
            .map(|bank| {
                if bank.is_empty() {
                    return None;
                }
                let mut mean = vec![0.0; self.dim];
                for slot in bank {
                    for (m, s) in mean.iter_mut().zip(slot) {
                        *m += s;
                    }
                }
                let inv = 1.0 / bank.len() as f64;
                Some(crate::tensor::sq_norm(&mean).sqrt() * inv)
            })
            .collect()
    }
}

/// Two-stage weighting for the refinement loss: off while the banks fill,
/// then fully on.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AlphaSchedule {
    pub warmup_epochs: usize,
}

impl AlphaSchedule {
    /// Weight for the refinement loss at 0-indexed `epoch`.
    pub fn alpha(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            0.0
        } else {
            1.0
        }
    }
}

/// Combined objective. During warmup this returns `l_c` itself (same bits),
/// not `l_c + 0.0 * l_p`, so logs can assert exact equality.
pub fn total_loss(l_c: f64, l_p: f64, epoch: usize, schedule: &AlphaSchedule) -> f64 {
    let alpha = schedule.alpha(epoch);
    if alpha == 0.0 {
        l_c
    } else {
        l_c + alpha * l_p
    }
}
