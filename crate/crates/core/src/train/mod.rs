//! Training harness: configs, the epoch loops for both tasks, and shared
//! evaluation helpers.
//!
//! Everything is deterministic given [`TrainConfig::seed`]: per-purpose RNG
//! streams are derived from it via FNV-1a over (seed, purpose tag, epoch),
//! so sampling, bucketing, shuffling, and dropout never share state.

pub mod losses;
pub mod optim;
pub mod schedule;

pub use losses::{cross_entropy_row, focal_loss};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::{EarlyStop, Mode, PlateauScheduler, StopUpdate};

use serde::{Deserialize, Serialize};

use crate::data::sampling::{balanced_sample_indices, bucket_batches, compute_class_weights};
use crate::data::{pad_and_mask_batch, LoadedSample};
use crate::emotion::EmotionModel;
use crate::error::{Error, Result};
use crate::gesture::{argmax, GestureModel};
use crate::graph::{log_sum_exp, Graph};
use crate::memory::{AlphaSchedule, MemoryBank};
use crate::nn::{Ctx, Params};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Margin of the prototype alignment loss.
pub const REFINEMENT_MARGIN: f64 = 0.2;

/// Default learning rates when the config leaves `lr` unset.
pub const GESTURE_DEFAULT_LR: f64 = 1e-4;
pub const EMOTION_DEFAULT_LR: f64 = 1e-5;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    None,
    ReduceOnPlateau {
        #[serde(default = "default_plateau_factor")]
        factor: f64,
        #[serde(default = "default_plateau_patience")]
        patience: usize,
    },
}

fn default_plateau_factor() -> f64 {
    0.1
}

fn default_plateau_patience() -> usize {
    3
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::ReduceOnPlateau {
            factor: default_plateau_factor(),
            patience: default_plateau_patience(),
        }
    }
}

impl ScheduleConfig {
    fn build(&self, lr: f64) -> Option<PlateauScheduler> {
        match *self {
            ScheduleConfig::None => None,
            ScheduleConfig::ReduceOnPlateau { factor, patience } => {
                Some(PlateauScheduler::new(lr, factor, patience, 1e-6))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let ScheduleConfig::ReduceOnPlateau { factor, patience } = *self {
            if !(factor > 0.0 && factor < 1.0) {
                return Err(Error::Config("plateau factor must lie in (0,1)".into()));
            }
            if patience == 0 {
                return Err(Error::Config("plateau patience must be at least 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Unset means the task default: 1e-4 for gesture, 1e-5 for emotion.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub schedule: ScheduleConfig,
    pub early_stop_patience: usize,
    pub focal_gamma: f64,
    /// Weight each class inversely to its frequency in the training labels.
    pub class_weights: bool,
    /// Epochs with the prototype loss switched off (gesture only).
    pub warmup_epochs: usize,
    /// Length-quantile buckets for gesture batching.
    pub n_buckets: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: None,
            weight_decay: 1e-4,
            batch_size: 8,
            max_epochs: 20,
            schedule: ScheduleConfig::default(),
            early_stop_patience: 7,
            focal_gamma: 0.5,
            class_weights: false,
            warmup_epochs: 5,
            n_buckets: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(lr) = self.lr {
            // lr 0 is allowed: it turns an epoch into a pure diagnostic pass.
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config("lr must be finite and non-negative".into()));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be at least 1".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::Config("focal_gamma must be non-negative".into()));
        }
        if self.n_buckets == 0 {
            return Err(Error::Config("n_buckets must be at least 1".into()));
        }
        self.schedule.validate()
    }
}

/// One line of the training log. `lr` is the rate in effect after this
/// epoch's plateau adjustment (i.e. the rate the next epoch will train at).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub metric: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Classification component of `train_loss` (gesture runs only). During
    /// warmup it equals `train_loss` bit-for-bit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_c: Option<f64>,
    /// Prototype-alignment component of `train_loss` (gesture runs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_p: Option<f64>,
}

/// Outcome of a training run. On an early stop the model's parameters are
/// rolled back to the best epoch; `best_params` carries that snapshot either
/// way so callers can checkpoint it.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub best_params: Params,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub loss: f64,
    pub metric: f64,
    pub n: usize,
}

/// Derive an independent RNG seed for one purpose in one epoch (FNV-1a over
/// the base seed, the tag bytes, and the epoch).
pub fn derive_seed(base: u64, tag: &str, epoch: usize) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in base
        .to_le_bytes()
        .iter()
        .chain(tag.as_bytes())
        .chain((epoch as u64).to_le_bytes().iter())
    {
        h ^= *b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

fn check_labels(data: &[LoadedSample], n_classes: usize) -> Result<()> {
    for s in data {
        if s.label >= n_classes {
            return Err(Error::Config(format!(
                "sample {} has label {}, out of range for {n_classes} classes",
                s.id, s.label
            )));
        }
    }
    Ok(())
}

fn gesture_class_weights(cfg: &TrainConfig, labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    if cfg.class_weights {
        compute_class_weights(labels, n_classes)
    } else {
        Ok(vec![1.0; n_classes])
    }
}

/// Train the gesture classifier. `bank` must be `Some` exactly when the
/// model was built with memory enabled; it is updated in place and keeps its
/// final state even when early stopping rolls the parameters back.
pub fn fit_gesture(
    model: &mut GestureModel,
    mut bank: Option<&mut MemoryBank>,
    train: &[LoadedSample],
    val: Option<&[LoadedSample]>,
    cfg: &TrainConfig,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if model.config().use_memory != bank.is_some() {
        return Err(Error::Config(
            "memory bank must be supplied exactly when the model enables memory".into(),
        ));
    }
    let n_classes = model.config().n_classes;
    check_labels(train, n_classes)?;
    if let Some(v) = val {
        check_labels(v, n_classes)?;
    }
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let lens: Vec<usize> = train.iter().map(|s| s.len()).collect();
    let class_w = gesture_class_weights(cfg, &labels, n_classes)?;

    let lr0 = cfg.lr.unwrap_or(GESTURE_DEFAULT_LR);
    let mut opt = AdamW::new(AdamWConfig {
        lr: lr0,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    })?;
    let mut plateau = cfg.schedule.build(lr0.max(f64::MIN_POSITIVE));
    let mut early = EarlyStop::new(cfg.early_stop_patience, Mode::Max);
    let alpha_schedule = AlphaSchedule { warmup_epochs: cfg.warmup_epochs };

    let mut epochs = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_params = model.params.clone();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let alpha = alpha_schedule.alpha(epoch - 1);
        // Prototypes are frozen at epoch start; retrieval inside the forward
        // pass still sees the live bank as it fills.
        let protos = bank.as_deref().map(|b| b.prototypes());
        let use_proto_loss = alpha > 0.0
            && protos
                .as_ref()
                .is_some_and(|p| p.iter().any(|x| x.is_some()));

        let draw = balanced_sample_indices(
            &labels,
            n_classes,
            train.len(),
            derive_seed(cfg.seed, "sample", epoch),
        )?;
        let drawn_lens: Vec<usize> = draw.iter().map(|&i| lens[i]).collect();
        let batches = bucket_batches(
            &drawn_lens,
            cfg.batch_size,
            cfg.n_buckets,
            derive_seed(cfg.seed, "bucket", epoch),
        )?;

        let mut loss_sum = 0.0;
        let mut lc_sum = 0.0;
        let mut lp_sum = 0.0;
        let mut correct = 0usize;
        let mut n_seen = 0usize;
        for (batch_idx, positions) in batches.iter().enumerate() {
            let samples: Vec<&LoadedSample> =
                positions.iter().map(|&p| &train[draw[p]]).collect();
            let padded = pad_and_mask_batch(&samples)?;

            let mut g = Graph::new();
            let (loss, lc_val, lp_val, fused, pooled, grads_named) = {
                let mut cx = Ctx::new(&mut g, &model.params);
                let out = model.forward(&mut cx, &padded, bank.as_deref())?;
                let l_c = cx.g.cross_entropy(out.fused, &padded.labels, &class_w);
                let (total, lp_val) = if use_proto_loss {
                    let feats = out.refined.expect("memory model always refines");
                    let l_p = cx.g.refinement_loss(
                        feats,
                        &padded.labels,
                        protos.as_ref().expect("prototypes exist when loss is on"),
                        REFINEMENT_MARGIN,
                    );
                    (cx.g.add(l_c, l_p), cx.g.scalar(l_p))
                } else {
                    (l_c, 0.0)
                };
                let loss = cx.g.scalar(total);
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss became {loss} in epoch {epoch}, batch {batch_idx}"
                    )));
                }
                let lc_val = cx.g.scalar(l_c);
                let fused = cx.g.value(out.fused).clone();
                let pooled = out.pooled.map(|id| cx.g.value(id).clone());
                let grads = cx.g.backward(total);
                let named = cx.grads_by_name(&grads);
                (loss, lc_val, lp_val, fused, pooled, named)
            };
            opt.step(&mut model.params, &grads_named);

            for (i, &y) in padded.labels.iter().enumerate() {
                if argmax(fused.row(i)) == y {
                    correct += 1;
                }
            }
            loss_sum += loss * padded.batch as f64;
            lc_sum += lc_val * padded.batch as f64;
            lp_sum += lp_val * padded.batch as f64;
            n_seen += padded.batch;

            // Memory upkeep happens after the parameter step, using the
            // pooled (pre-refinement) features and the blended predictions
            // that were just computed.
            if let Some(b) = bank.as_deref_mut() {
                let pooled = pooled.as_ref().expect("memory models pool fused tokens");
                for (i, &y) in padded.labels.iter().enumerate() {
                    let row = fused.row(i);
                    let pred = argmax(row);
                    let conf = (row[pred] - log_sum_exp(row)).exp();
                    b.maybe_insert(pooled.row(i), pred, y, conf)?;
                }
            }
        }
        let train_loss = loss_sum / n_seen as f64;
        let train_metric = correct as f64 / n_seen as f64;

        let (val_loss, metric) = match val {
            Some(v) => {
                let ev = evaluate_gesture(model, bank.as_deref(), v, cfg.batch_size, &class_w)?;
                (ev.loss, ev.metric)
            }
            None => (train_loss, train_metric),
        };

        let lr_now = match plateau.as_mut() {
            Some(p) if lr0 > 0.0 => {
                let lr = p.step(val_loss);
                opt.set_lr(lr);
                lr
            }
            _ => opt.lr(),
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            metric,
            lr: lr_now,
            alpha: Some(alpha),
            l_c: Some(lc_sum / n_seen as f64),
            l_p: Some(lp_sum / n_seen as f64),
        });

        let update = early.update(metric);
        if update.improved {
            best_epoch = epoch;
            best_metric = metric;
            best_params = model.params.clone();
        }
        if update.stopped {
            stopped_early = true;
            model.params = best_params.clone();
            break;
        }
    }

    Ok(FitReport { epochs, stopped_early, best_epoch, best_metric, best_params })
}

/// Classification loss + top-1 accuracy of the gesture model over `data`,
/// batched in input order. The bank is read-only here: evaluation never
/// inserts. The reported loss is the cross-entropy component only, so the
/// plateau monitor stays comparable across the warmup boundary.
pub fn evaluate_gesture(
    model: &GestureModel,
    bank: Option<&MemoryBank>,
    data: &[LoadedSample],
    batch_size: usize,
    class_w: &[f64],
) -> Result<EvalSummary> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let n_classes = model.config().n_classes;
    check_labels(data, n_classes)?;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in data.chunks(batch_size) {
        let samples: Vec<&LoadedSample> = chunk.iter().collect();
        let padded = pad_and_mask_batch(&samples)?;
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &model.params);
        let out = model.forward(&mut cx, &padded, bank)?;
        let l_c = cx.g.cross_entropy(out.fused, &padded.labels, class_w);
        let loss = cx.g.scalar(l_c);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("evaluation loss became {loss}")));
        }
        let fused = cx.g.value(out.fused);
        for (i, &y) in padded.labels.iter().enumerate() {
            if argmax(fused.row(i)) == y {
                correct += 1;
            }
        }
        loss_sum += loss * padded.batch as f64;
    }
    Ok(EvalSummary {
        loss: loss_sum / data.len() as f64,
        metric: correct as f64 / data.len() as f64,
        n: data.len(),
    })
}

fn emotion_targets(data: &[LoadedSample]) -> Result<Vec<bool>> {
    data.iter()
        .map(|s| match s.label {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Config(format!(
                "sample {} has label {other}; binary task expects 0 or 1",
                s.id
            ))),
        })
        .collect()
}

/// Train the binary emotion classifier with focal loss.
pub fn fit_emotion(
    model: &mut EmotionModel,
    train: &[LoadedSample],
    val: Option<&[LoadedSample]>,
    cfg: &TrainConfig,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let targets = emotion_targets(train)?;
    if let Some(v) = val {
        emotion_targets(v)?;
    }
    let class_w: [f64; 2] = if cfg.class_weights {
        let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
        let w = compute_class_weights(&labels, 2)?;
        [w[0], w[1]]
    } else {
        [1.0, 1.0]
    };

    let lr0 = cfg.lr.unwrap_or(EMOTION_DEFAULT_LR);
    let mut opt = AdamW::new(AdamWConfig {
        lr: lr0,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    })?;
    let mut plateau = cfg.schedule.build(lr0.max(f64::MIN_POSITIVE));
    let mut early = EarlyStop::new(cfg.early_stop_patience, Mode::Min);

    let mut epochs = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_metric = f64::INFINITY;
    let mut best_params = model.params.clone();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", epoch));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout", epoch));

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&LoadedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch_targets: Vec<bool> = chunk.iter().map(|&i| targets[i]).collect();
            let padded = pad_and_mask_batch(&samples)?;

            let mut g = Graph::new();
            let (loss, logits, grads_named) = {
                let mut cx = Ctx::new(&mut g, &model.params);
                let out = model.forward(&mut cx, &padded, Some(&mut dropout_rng))?;
                let l = cx.g.focal_bce(out.logits, &batch_targets, cfg.focal_gamma, class_w);
                let loss = cx.g.scalar(l);
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss became {loss} in epoch {epoch}, batch {batch_idx}"
                    )));
                }
                let logits = cx.g.value(out.logits).clone();
                let grads = cx.g.backward(l);
                let named = cx.grads_by_name(&grads);
                (loss, logits, named)
            };
            opt.step(&mut model.params, &grads_named);

            for (i, &t) in batch_targets.iter().enumerate() {
                if (logits.get(i, 0) > 0.0) == t {
                    correct += 1;
                }
            }
            loss_sum += loss * padded.batch as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let train_metric = correct as f64 / train.len() as f64;

        let (val_loss, metric) = match val {
            Some(v) => {
                let ev = evaluate_emotion(model, v, cfg.batch_size, cfg.focal_gamma, class_w)?;
                (ev.loss, ev.metric)
            }
            None => (train_loss, train_metric),
        };

        let lr_now = match plateau.as_mut() {
            Some(p) if lr0 > 0.0 => {
                let lr = p.step(val_loss);
                opt.set_lr(lr);
                lr
            }
            _ => opt.lr(),
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            metric,
            lr: lr_now,
            alpha: None,
            l_c: None,
            l_p: None,
        });

        let update = early.update(val_loss);
        if update.improved {
            best_epoch = epoch;
            best_metric = val_loss;
            best_params = model.params.clone();
        }
        if update.stopped {
            stopped_early = true;
            model.params = best_params.clone();
            break;
        }
    }

    Ok(FitReport { epochs, stopped_early, best_epoch, best_metric, best_params })
}

/// Focal loss + binary accuracy of the emotion model over `data`, batched in
/// input order with dropout off.
pub fn evaluate_emotion(
    model: &EmotionModel,
    data: &[LoadedSample],
    batch_size: usize,
    gamma: f64,
    class_w: [f64; 2],
) -> Result<EvalSummary> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let targets = emotion_targets(data)?;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut offset = 0usize;
    for chunk in data.chunks(batch_size) {
        let samples: Vec<&LoadedSample> = chunk.iter().collect();
        let batch_targets = &targets[offset..offset + chunk.len()];
        offset += chunk.len();
        let padded = pad_and_mask_batch(&samples)?;
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &model.params);
        let out = model.forward(&mut cx, &padded, None)?;
        let l = cx.g.focal_bce(out.logits, batch_targets, gamma, class_w);
        let loss = cx.g.scalar(l);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("evaluation loss became {loss}")));
        }
        let logits = cx.g.value(out.logits);
        for (i, &t) in batch_targets.iter().enumerate() {
            if (logits.get(i, 0) > 0.0) == t {
                correct += 1;
            }
        }
        loss_sum += loss * padded.batch as f64;
    }
    Ok(EvalSummary {
        loss: loss_sum / data.len() as f64,
        metric: correct as f64 / data.len() as f64,
        n: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_dataset, SyntheticSpec};
    use crate::data::ModalityTag;
    use crate::gesture::{FusionKind, GestureConfig};
    use crate::memory::MemoryConfig;
    use std::collections::BTreeMap;

    fn gesture_data(n_classes: usize, n: usize, seed: u64) -> Vec<LoadedSample> {
        let spec = SyntheticSpec {
            n_classes,
            n_samples: n,
            t_min: 3,
            t_max: 6,
            streams: BTreeMap::from([(ModalityTag::Rgb, 12), (ModalityTag::Pose, 6)]),
            rho: 0.8,
            noise: 0.3,
            jitter: 1.0,
            active_fraction: 1.0,
            seed,
        };
        generate_synthetic_dataset(&spec).unwrap()
    }

    fn emotion_data(n: usize, seed: u64) -> Vec<LoadedSample> {
        let spec = SyntheticSpec {
            n_classes: 2,
            n_samples: n,
            t_min: 3,
            t_max: 5,
            streams: BTreeMap::from([(ModalityTag::Ctx, 10), (ModalityTag::Face, 7)]),
            rho: 0.7,
            noise: 0.3,
            jitter: 1.0,
            active_fraction: 1.0,
            seed,
        };
        generate_synthetic_dataset(&spec).unwrap()
    }

    fn tiny_gesture_model(n_classes: usize, use_memory: bool, seed: u64) -> GestureModel {
        let cfg = GestureConfig {
            d_rgb: 12,
            d_pose: 6,
            d_hidden: 8,
            n_heads: 2,
            n_classes,
            fusion: FusionKind::Cmtf,
            use_memory,
            refine_feeds_classifier: true,
            memory: MemoryConfig { capacity: 6, top_k: 3, ..MemoryConfig::default() },
        };
        GestureModel::new(cfg, seed).unwrap()
    }

    fn tiny_emotion_model(seed: u64) -> EmotionModel {
        let cfg = crate::emotion::EmotionConfig {
            d_ctx: 10,
            d_face: 7,
            d_hidden: 8,
            encoder_depth: 2,
            n_heads: 2,
            dropout: 0.2,
            ffn_mult: 2,
            bidirectional_gate: false,
            outer_residual: false,
        };
        EmotionModel::new(cfg, seed).unwrap()
    }

    fn quick_cfg(max_epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: Some(1e-3),
            max_epochs,
            warmup_epochs: 1,
            n_buckets: 2,
            batch_size: 4,
            schedule: ScheduleConfig::None,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn derived_seeds_separate_purposes_and_epochs() {
        let a = derive_seed(7, "sample", 1);
        assert_eq!(a, derive_seed(7, "sample", 1));
        assert_ne!(a, derive_seed(7, "bucket", 1));
        assert_ne!(a, derive_seed(7, "sample", 2));
        assert_ne!(a, derive_seed(8, "sample", 1));
    }

    #[test]
    fn gesture_training_is_deterministic_for_a_fixed_seed() {
        let data = gesture_data(2, 12, 5);
        let run = || {
            let mut model = tiny_gesture_model(2, true, 11);
            let mut bank = MemoryBank::new(2, 8, model.config().memory).unwrap();
            let report =
                fit_gesture(&mut model, Some(&mut bank), &data, None, &quick_cfg(3)).unwrap();
            serde_json::to_string(&report.epochs).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn emotion_training_is_deterministic_for_a_fixed_seed() {
        let data = emotion_data(10, 6);
        let run = || {
            let mut model = tiny_emotion_model(13);
            let report = fit_emotion(&mut model, &data, None, &quick_cfg(2)).unwrap();
            serde_json::to_string(&report.epochs).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let data = gesture_data(2, 8, 9);
        let mut model = tiny_gesture_model(2, false, 3);
        let before: Vec<(String, Vec<u64>)> = model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let cfg = TrainConfig { lr: Some(0.0), ..quick_cfg(1) };
        fit_gesture(&mut model, None, &data, None, &cfg).unwrap();
        let after: Vec<(String, Vec<u64>)> = model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn alpha_column_follows_the_warmup_schedule() {
        let data = gesture_data(2, 8, 21);
        let mut model = tiny_gesture_model(2, true, 4);
        let mut bank = MemoryBank::new(2, 8, model.config().memory).unwrap();
        let cfg = TrainConfig { warmup_epochs: 2, ..quick_cfg(3) };
        let report = fit_gesture(&mut model, Some(&mut bank), &data, None, &cfg).unwrap();
        let alphas: Vec<f64> = report.epochs.iter().map(|e| e.alpha.unwrap()).collect();
        assert_eq!(alphas, vec![0.0, 0.0, 1.0]);
        for rec in &report.epochs[..2] {
            assert_eq!(rec.train_loss.to_bits(), rec.l_c.unwrap().to_bits());
            assert_eq!(rec.l_p, Some(0.0));
        }
    }

    #[test]
    fn missing_validation_reuses_train_metrics() {
        let data = emotion_data(8, 30);
        let mut model = tiny_emotion_model(2);
        let report = fit_emotion(&mut model, &data, None, &quick_cfg(2)).unwrap();
        for rec in &report.epochs {
            assert_eq!(rec.train_loss.to_bits(), rec.val_loss.to_bits());
        }
    }

    #[test]
    fn non_finite_loss_reports_the_batch() {
        let data = gesture_data(2, 8, 40);
        let mut model = tiny_gesture_model(2, false, 5);
        model.params.get_mut("proj_rgb.w").set(0, 0, f64::INFINITY);
        let err = fit_gesture(&mut model, None, &data, None, &quick_cfg(1)).unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("batch"), "message: {msg}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn frozen_model_stops_early_and_restores_best_epoch() {
        // lr = 0 keeps the metric constant, so with patience 2 the stop
        // fires on epoch 4: one best epoch, two stale, one trigger.
        let data = gesture_data(2, 8, 50);
        let mut model = tiny_gesture_model(2, false, 6);
        let cfg = TrainConfig {
            lr: Some(0.0),
            early_stop_patience: 2,
            ..quick_cfg(10)
        };
        let report = fit_gesture(&mut model, None, &data, Some(&data), &cfg).unwrap();
        assert!(report.stopped_early);
        assert_eq!(report.best_epoch, 1);
        assert_eq!(report.epochs.len(), 4);
    }

    #[test]
    fn training_reduces_the_loss_on_easy_data() {
        let data = emotion_data(12, 60);
        let mut model = tiny_emotion_model(7);
        let cfg = TrainConfig { lr: Some(3e-3), ..quick_cfg(8) };
        let report = fit_emotion(&mut model, &data, None, &cfg).unwrap();
        let first = report.epochs.first().unwrap().train_loss;
        let last = report.epochs.last().unwrap().train_loss;
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn evaluation_is_deterministic_and_counts_samples() {
        let data = gesture_data(2, 10, 70);
        let model = tiny_gesture_model(2, false, 8);
        let a = evaluate_gesture(&model, None, &data, 4, &[1.0, 1.0]).unwrap();
        let b = evaluate_gesture(&model, None, &data, 4, &[1.0, 1.0]).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.n, 10);
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lr: Some(f64::NAN), ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            schedule: ScheduleConfig::ReduceOnPlateau { factor: 1.5, patience: 2 },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn train_config_json_round_trips_with_defaults() {
        let parsed: TrainConfig = serde_json::from_str(
            r#"{"lr": 0.001, "schedule": {"kind": "reduce_on_plateau"}, "seed": 3}"#,
        )
        .unwrap();
        assert_eq!(parsed.lr, Some(0.001));
        assert_eq!(
            parsed.schedule,
            ScheduleConfig::ReduceOnPlateau { factor: 0.1, patience: 3 }
        );
        assert_eq!(parsed.batch_size, 8);
        let err = serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.1}"#);
        assert!(err.is_err());
    }
}
