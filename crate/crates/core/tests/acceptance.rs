//! End-to-end acceptance checklist. Each test is one line of the checklist
//! and stands alone; together they certify the desk-scale build: the fusion
//! ablation ordering, overfit capacity, gradient correctness, the loss
//! schedule, memory-bank invariants, closed-form loss values, padding
//! invariance, and the scheduler/early-stop/reproducibility contracts.

use std::collections::BTreeMap;
use std::time::Instant;

use micromodal_core::data::synth::{generate_synthetic_dataset, SyntheticSpec};
use micromodal_core::data::{pad_and_mask_batch, LoadedSample, ModalityTag, PaddedBatch};
use micromodal_core::emotion::{EmotionConfig, EmotionModel};
use micromodal_core::gesture::{FusionKind, GestureConfig, GestureModel};
use micromodal_core::gradcheck::{
    all_module_names, negative_control, run_module, DEFAULT_EPS,
};
use micromodal_core::graph::Graph;
use micromodal_core::memory::{MemoryBank, MemoryConfig};
use micromodal_core::nn::Ctx;
use micromodal_core::tensor::Tensor;
use micromodal_core::train::{
    cross_entropy_row, derive_seed, fit_emotion, fit_gesture, focal_loss, EarlyStop, Mode,
    PlateauScheduler, ScheduleConfig, TrainConfig,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stratified holdout split: within each class, a seeded shuffle marks
/// `frac` of the samples (rounded, but never all of them) for validation.
fn stratified_split(
    samples: Vec<LoadedSample>,
    frac: f64,
    seed: u64,
) -> (Vec<LoadedSample>, Vec<LoadedSample>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut is_val = vec![false; samples.len()];
    for (class, mut idx) in by_class {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", class));
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * frac).round() as usize).min(idx.len() - 1);
        for &i in idx.iter().take(n_val) {
            is_val[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, s) in samples.into_iter().enumerate() {
        if is_val[i] {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

fn gesture_sample(
    rng: &mut ChaCha8Rng,
    id: &str,
    label: usize,
    steps: usize,
    d_rgb: usize,
    d_pose: usize,
) -> LoadedSample {
    let mut streams = BTreeMap::new();
    for (tag, d) in [(ModalityTag::Rgb, d_rgb), (ModalityTag::Pose, d_pose)] {
        let data: Vec<f32> = (0..steps * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        streams.insert(
            tag,
            micromodal_core::data::EmbeddingSequence::new(steps, d, data).unwrap(),
        );
    }
    LoadedSample::new(id.to_string(), label, streams).unwrap()
}

fn emotion_sample(
    rng: &mut ChaCha8Rng,
    id: &str,
    label: usize,
    steps: usize,
    d_ctx: usize,
    d_face: usize,
) -> LoadedSample {
    let mut streams = BTreeMap::new();
    for (tag, d) in [(ModalityTag::Ctx, d_ctx), (ModalityTag::Face, d_face)] {
        let data: Vec<f32> = (0..steps * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        streams.insert(
            tag,
            micromodal_core::data::EmbeddingSequence::new(steps, d, data).unwrap(),
        );
    }
    LoadedSample::new(id.to_string(), label, streams).unwrap()
}

/// 1. Full-scale corpus metrics are out of reach on a desk machine, so the
/// published operating point survives only as the default configuration;
/// this asserts those defaults and that the reduced stand-ins used by the
/// rest of this checklist instantiate the same architecture end to end.
#[test]
fn a1_reference_scale_is_encoded_in_defaults_and_checked_at_desk_scale() {
    let g = GestureConfig::default();
    assert_eq!(
        (g.d_rgb, g.d_pose, g.d_hidden, g.n_heads, g.n_classes),
        (768, 256, 512, 8, 32)
    );
    assert_eq!(g.fusion, FusionKind::Cmtf);
    assert!(g.use_memory);
    let m = MemoryConfig::default();
    assert_eq!((m.capacity, m.top_k), (50, 5));
    assert!((m.momentum - 0.9).abs() < 1e-15);
    assert!((m.confidence_threshold - 0.7).abs() < 1e-15);

    let e = EmotionConfig::default();
    assert_eq!(
        (e.d_ctx, e.d_face, e.d_hidden, e.encoder_depth, e.n_heads),
        (768, 512, 512, 8, 4)
    );
    assert!((e.dropout - 0.5).abs() < 1e-15);

    // The same architectures instantiate and run at desk scale, which is
    // what every other test in this file exercises.
    let small_g = GestureConfig {
        d_rgb: 12,
        d_pose: 6,
        d_hidden: 8,
        n_heads: 2,
        n_classes: 4,
        ..GestureConfig::default()
    };
    GestureModel::new(small_g, 1).unwrap();
    let small_e = EmotionConfig {
        d_ctx: 10,
        d_face: 7,
        d_hidden: 8,
        encoder_depth: 2,
        ffn_mult: 2,
        ..EmotionConfig::default()
    };
    EmotionModel::new(small_e, 1).unwrap();
}

/// 2. Ablation ordering on a pinned sparse synthetic set: late fusion only
/// ≤ token fusion ≤ token fusion with memory refinement, mean validation
/// top-1 over three seeds, with the full model at least two points above
/// the late-fusion baseline.
#[test]
fn a2_fusion_ablation_ordering_holds_on_sparse_synthetic() {
    let started = Instant::now();
    let spec = SyntheticSpec {
        n_classes: 8,
        n_samples: 400,
        t_min: 24,
        t_max: 32,
        streams: BTreeMap::from([(ModalityTag::Rgb, 48), (ModalityTag::Pose, 24)]),
        rho: 0.6,
        noise: 1.75,
        jitter: 1.0,
        active_fraction: 0.15,
        seed: 42,
    };
    let all = generate_synthetic_dataset(&spec).unwrap();
    let (train, val) = stratified_split(all, 0.25, 42);
    assert_eq!((train.len(), val.len()), (296, 104));

    let variants = [
        (FusionKind::LateOnly, false),
        (FusionKind::Cmtf, false),
        (FusionKind::Cmtf, true),
    ];
    let mut means = Vec::new();
    for (fusion, use_memory) in variants {
        let mut accs = Vec::new();
        for seed in [1u64, 2, 3] {
            let cfg = GestureConfig {
                d_rgb: 48,
                d_pose: 24,
                d_hidden: 32,
                n_heads: 2,
                n_classes: 8,
                fusion,
                use_memory,
                refine_feeds_classifier: true,
                memory: MemoryConfig {
                    capacity: 20,
                    top_k: 5,
                    ..MemoryConfig::default()
                },
            };
            let mut model = GestureModel::new(cfg, seed).unwrap();
            let mut bank = use_memory
                .then(|| MemoryBank::new(8, 32, cfg.memory).unwrap());
            let tcfg = TrainConfig {
                lr: Some(1e-3),
                batch_size: 16,
                max_epochs: 40,
                warmup_epochs: 2,
                early_stop_patience: 10,
                n_buckets: 3,
                seed,
                ..TrainConfig::default()
            };
            let report =
                fit_gesture(&mut model, bank.as_mut(), &train, Some(val.as_slice()), &tcfg)
                    .unwrap();
            accs.push(report.best_metric);
        }
        means.push(accs.iter().sum::<f64>() / accs.len() as f64);
    }
    let (late, fused, refined) = (means[0], means[1], means[2]);
    assert!(
        late <= fused && fused <= refined,
        "accuracy must not drop as components are added: late {late:.4}, fused {fused:.4}, refined {refined:.4}"
    );
    assert!(
        refined - late >= 0.02,
        "full model must beat late fusion by ≥ 2 points: late {late:.4}, refined {refined:.4}"
    );
    assert!(
        started.elapsed().as_secs() < 900,
        "ablation must finish within 15 minutes"
    );
}

/// 3. Overfit capacity: a tiny 4-class gesture set and a tiny 2-class
/// emotion set are both driven past 95% training accuracy within 200
/// epochs, each in under five minutes.
#[test]
fn a3_tiny_datasets_overfit_past_95_percent() {
    let started = Instant::now();
    let gesture_spec = SyntheticSpec {
        n_classes: 4,
        n_samples: 80,
        t_min: 6,
        t_max: 10,
        streams: BTreeMap::from([(ModalityTag::Rgb, 12), (ModalityTag::Pose, 6)]),
        rho: 0.7,
        noise: 0.3,
        jitter: 0.5,
        active_fraction: 1.0,
        seed: 7,
    };
    let gesture_data = generate_synthetic_dataset(&gesture_spec).unwrap();
    let gcfg = GestureConfig {
        d_rgb: 12,
        d_pose: 6,
        d_hidden: 16,
        n_heads: 2,
        n_classes: 4,
        fusion: FusionKind::Cmtf,
        use_memory: true,
        refine_feeds_classifier: true,
        memory: MemoryConfig {
            capacity: 10,
            top_k: 3,
            ..MemoryConfig::default()
        },
    };
    let mut model = GestureModel::new(gcfg, 7).unwrap();
    let mut bank = MemoryBank::new(4, 16, gcfg.memory).unwrap();
    let tcfg = TrainConfig {
        lr: Some(1e-3),
        batch_size: 8,
        max_epochs: 200,
        warmup_epochs: 3,
        early_stop_patience: 200,
        seed: 7,
        ..TrainConfig::default()
    };
    let report = fit_gesture(&mut model, Some(&mut bank), &gesture_data, None, &tcfg).unwrap();
    assert!(
        report.best_metric >= 0.95,
        "gesture train top-1 {:.4} after {} epochs",
        report.best_metric,
        report.epochs.len()
    );
    assert!(started.elapsed().as_secs() < 300, "gesture overfit must take < 5 min");

    let emotion_started = Instant::now();
    let emotion_spec = SyntheticSpec {
        n_classes: 2,
        n_samples: 60,
        t_min: 4,
        t_max: 8,
        streams: BTreeMap::from([(ModalityTag::Ctx, 10), (ModalityTag::Face, 7)]),
        rho: 0.7,
        noise: 0.3,
        jitter: 0.5,
        active_fraction: 1.0,
        seed: 9,
    };
    let emotion_data = generate_synthetic_dataset(&emotion_spec).unwrap();
    let ecfg = EmotionConfig {
        d_ctx: 10,
        d_face: 7,
        d_hidden: 16,
        encoder_depth: 2,
        n_heads: 2,
        dropout: 0.5,
        ffn_mult: 2,
        ..EmotionConfig::default()
    };
    let mut emodel = EmotionModel::new(ecfg, 9).unwrap();
    let etcfg = TrainConfig {
        lr: Some(1e-3),
        batch_size: 8,
        max_epochs: 200,
        early_stop_patience: 200,
        seed: 9,
        ..TrainConfig::default()
    };
    let ereport = fit_emotion(&mut emodel, &emotion_data, None, &etcfg).unwrap();
    let best_acc = ereport
        .epochs
        .iter()
        .map(|e| e.metric)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(
        best_acc >= 0.95,
        "emotion train accuracy {best_acc:.4} after {} epochs",
        ereport.epochs.len()
    );
    assert!(
        emotion_started.elapsed().as_secs() < 300,
        "emotion overfit must take < 5 min"
    );
}

/// 4. Gradient suite: every checkable module passes central-difference
/// validation at ≤ 1e-4 max relative error, and the deliberately doubled
/// gradient control reports an error of ≈ 0.5 instead of passing.
#[test]
fn a4_gradient_checks_pass_and_doubled_gradient_control_trips() {
    for &name in all_module_names() {
        let report = run_module(name, DEFAULT_EPS).unwrap();
        assert!(
            report.max_rel_err <= 1e-4,
            "module {name}: max relative error {}",
            report.max_rel_err
        );
        assert!(report.passed());
    }
    let control = negative_control(DEFAULT_EPS);
    assert!(
        (control.max_rel_err - 0.5).abs() < 0.05,
        "doubled gradients must score ≈ 0.5, got {}",
        control.max_rel_err
    );
    assert!(!control.passed());
}

/// 5. Loss schedule: during warmup the logged total loss is bit-for-bit the
/// classification term with a zero alignment term; afterwards the total is
/// the sum of both logged components.
#[test]
fn a5_training_log_shows_the_loss_composition_schedule() {
    let spec = SyntheticSpec {
        n_classes: 4,
        n_samples: 48,
        t_min: 4,
        t_max: 7,
        streams: BTreeMap::from([(ModalityTag::Rgb, 10), (ModalityTag::Pose, 6)]),
        rho: 0.8,
        noise: 0.2,
        jitter: 0.5,
        active_fraction: 1.0,
        seed: 11,
    };
    let data = generate_synthetic_dataset(&spec).unwrap();
    let cfg = GestureConfig {
        d_rgb: 10,
        d_pose: 6,
        d_hidden: 8,
        n_heads: 2,
        n_classes: 4,
        fusion: FusionKind::Cmtf,
        use_memory: true,
        refine_feeds_classifier: true,
        memory: MemoryConfig {
            capacity: 8,
            top_k: 3,
            confidence_threshold: 0.0,
            ..MemoryConfig::default()
        },
    };
    let mut model = GestureModel::new(cfg, 11).unwrap();
    let mut bank = MemoryBank::new(4, 8, cfg.memory).unwrap();
    let tcfg = TrainConfig {
        lr: Some(1e-3),
        batch_size: 8,
        max_epochs: 6,
        warmup_epochs: 2,
        early_stop_patience: 50,
        seed: 11,
        ..TrainConfig::default()
    };
    let report = fit_gesture(&mut model, Some(&mut bank), &data, None, &tcfg).unwrap();
    assert_eq!(report.epochs.len(), 6);

    let mut saw_live_alignment = false;
    for rec in &report.epochs {
        let alpha = rec.alpha.expect("gesture log always records the schedule");
        let l_c = rec.l_c.expect("gesture log records the classification term");
        let l_p = rec.l_p.expect("gesture log records the alignment term");
        if rec.epoch <= 2 {
            assert_eq!(alpha, 0.0);
            assert_eq!(
                rec.train_loss.to_bits(),
                l_c.to_bits(),
                "warmup total must be the classification term, bit for bit"
            );
            assert_eq!(l_p, 0.0);
        } else {
            assert_eq!(alpha, 1.0);
            let total = l_c + l_p;
            let rel = (rec.train_loss - total).abs() / rec.train_loss.abs().max(1e-12);
            assert!(
                rel <= 1e-9,
                "epoch {}: total {} vs components {}",
                rec.epoch,
                rec.train_loss,
                total
            );
            saw_live_alignment |= l_p > 0.0;
        }
    }
    assert!(
        saw_live_alignment,
        "the alignment term must actually engage after warmup"
    );
}

/// 6. Memory-bank invariants: per-class occupancy never exceeds capacity,
/// a full-bank insert momentum-merges the most similar slot exactly, and
/// top-5 retrieval matches a brute-force scan on 1000 random cases.
#[test]
fn a6_memory_bank_capacity_momentum_and_retrieval_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let dim = 16;

    // Capacity: 1000 random insert attempts across classes and confidences.
    let mut bank = MemoryBank::new(6, dim, MemoryConfig::default()).unwrap();
    let mut small = MemoryBank::new(
        6,
        dim,
        MemoryConfig {
            capacity: 5,
            ..MemoryConfig::default()
        },
    )
    .unwrap();
    for _ in 0..1000 {
        let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pred = rng.random_range(0..6);
        let truth = if rng.random::<f64>() < 0.8 { pred } else { rng.random_range(0..6) };
        let conf = rng.random::<f64>();
        bank.maybe_insert(&f, pred, truth, conf).unwrap();
        small.maybe_insert(&f, pred, truth, conf).unwrap();
        for c in 0..6 {
            assert!(bank.class_len(c) <= 50);
            assert!(small.class_len(c) <= 5);
        }
    }

    // Momentum merge: fill one class, then verify each further insert
    // rewrites exactly the most similar slot to normalize(0.9 m + 0.1 f).
    let mcfg = MemoryConfig {
        capacity: 6,
        ..MemoryConfig::default()
    };
    let mut mbank = MemoryBank::new(2, dim, mcfg).unwrap();
    while mbank.class_len(0) < 6 {
        let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        mbank.maybe_insert(&f, 0, 0, 1.0).unwrap();
    }
    for _ in 0..200 {
        let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        let unit: Vec<f64> = f.iter().map(|x| x / norm).collect();
        let before: Vec<Vec<f64>> = mbank.class_slots(0).to_vec();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let target = (0..6)
            .max_by(|&i, &j| cos(&before[i], &unit).partial_cmp(&cos(&before[j], &unit)).unwrap())
            .unwrap();
        mbank.maybe_insert(&f, 0, 0, 1.0).unwrap();
        let after = mbank.class_slots(0);
        for (i, slot) in after.iter().enumerate() {
            if i == target {
                let mut merged: Vec<f64> = before[i]
                    .iter()
                    .zip(&unit)
                    .map(|(m, f)| 0.9 * m + 0.1 * f)
                    .collect();
                let n = merged.iter().map(|x| x * x).sum::<f64>().sqrt();
                for x in &mut merged {
                    *x /= n;
                }
                for (got, want) in slot.iter().zip(&merged) {
                    assert!(
                        (got - want).abs() <= 1e-6,
                        "merged slot deviates: {got} vs {want}"
                    );
                }
            } else {
                assert_eq!(slot, &before[i], "an untouched slot changed");
            }
        }
    }

    // Retrieval: top-5 must equal a brute-force cosine scan, 1000 cases.
    let mut rbank = MemoryBank::new(4, dim, MemoryConfig::default()).unwrap();
    for case in 0..1000 {
        let class = case % 4;
        if case % 3 == 0 {
            let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            rbank.maybe_insert(&f, class, class, 1.0).unwrap();
        }
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = rbank.topk_indices(&q, class, 5);
        let slots = rbank.class_slots(class);
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut want: Vec<usize> = (0..slots.len()).collect();
        want.sort_by(|&i, &j| {
            cos(&slots[j], &q)
                .partial_cmp(&cos(&slots[i], &q))
                .unwrap()
                .then(i.cmp(&j))
        });
        want.truncate(5);
        assert_eq!(got, want, "retrieval disagrees with brute force in case {case}");
    }
}

/// 7. Closed-form loss identities: the focal loss at γ = 0 is binary cross
/// entropy; at an even split and γ = 0.5 it equals 0.490129; and the
/// cross entropy of uniform 32-way logits is ln 32.
#[test]
fn a7_focal_and_cross_entropy_match_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for _ in 0..1000 {
        let z: f64 = rng.random_range(-8.0..8.0);
        let target = rng.random::<f64>() < 0.5;
        let t = f64::from(target);
        // Numerically stable binary cross entropy reference.
        let bce = z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        let focal = focal_loss(z, target, 0.0, 1.0);
        assert!(
            (focal - bce).abs() <= 1e-7,
            "γ=0 focal {focal} vs bce {bce} at logit {z}"
        );
    }
    for target in [true, false] {
        let v = focal_loss(0.0, target, 0.5, 1.0);
        assert!((v - 0.490129).abs() <= 1e-6, "even-split focal loss {v}");
    }
    for label in [0usize, 13, 31] {
        let row = vec![7.25; 32];
        let ce = cross_entropy_row(&row, label);
        assert!(
            (ce - 32f64.ln()).abs() <= 1e-6,
            "uniform 32-way cross entropy {ce}"
        );
    }
}

/// 8. Padding suite: rewriting padded positions with arbitrary finite values
/// never moves either model's outputs (100 fuzz trials), gate activations
/// stay strictly inside (0, 1), and a closed gate leaves the context stream
/// untouched.
#[test]
fn a8_padding_rewrites_never_change_outputs_and_gates_stay_in_range() {
    let gcfg = GestureConfig {
        d_rgb: 9,
        d_pose: 5,
        d_hidden: 8,
        n_heads: 2,
        n_classes: 4,
        fusion: FusionKind::Cmtf,
        use_memory: true,
        refine_feeds_classifier: true,
        memory: MemoryConfig {
            capacity: 6,
            top_k: 3,
            ..MemoryConfig::default()
        },
    };
    let gmodel = GestureModel::new(gcfg, 81).unwrap();
    let mut gbank = MemoryBank::new(4, 8, gcfg.memory).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    for c in 0..4 {
        for _ in 0..3 {
            let f: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            gbank.maybe_insert(&f, c, c, 1.0).unwrap();
        }
    }

    let ecfg = EmotionConfig {
        d_ctx: 10,
        d_face: 7,
        d_hidden: 8,
        encoder_depth: 2,
        n_heads: 2,
        ffn_mult: 2,
        ..EmotionConfig::default()
    };
    let emodel = EmotionModel::new(ecfg, 83).unwrap();

    let poison = |batch: &PaddedBatch, rng: &mut ChaCha8Rng| {
        let mut bad = batch.clone();
        for t in bad.streams.values_mut() {
            let d = t.cols();
            for (row, &valid) in bad.mask.iter().enumerate() {
                if !valid {
                    for c in 0..d {
                        t.set(row, c, rng.random_range(-1e6..1e6));
                    }
                }
            }
        }
        bad
    };

    for trial in 0..100 {
        // Gesture: fused logits must not move.
        let a = gesture_sample(&mut rng, "a", trial % 4, 2 + trial % 5, 9, 5);
        let b = gesture_sample(&mut rng, "b", (trial + 1) % 4, 6, 9, 5);
        let clean = pad_and_mask_batch(&[&a, &b]).unwrap();
        let dirty = poison(&clean, &mut rng);
        let run = |batch: &PaddedBatch| {
            let mut g = Graph::new();
            let mut cx = Ctx::new(&mut g, &gmodel.params);
            let out = gmodel.forward(&mut cx, batch, Some(&gbank)).unwrap();
            g.value(out.fused).clone()
        };
        let (y0, y1) = (run(&clean), run(&dirty));
        for (a, b) in y0.data().iter().zip(y1.data()) {
            let rel = (a - b).abs() / a.abs().max(1e-12);
            assert!(rel <= 1e-5, "gesture logits moved by {rel} in trial {trial}");
        }

        // Emotion: logits must not move and gates stay strictly in (0,1).
        let c = emotion_sample(&mut rng, "c", trial % 2, 2 + trial % 4, 10, 7);
        let d = emotion_sample(&mut rng, "d", (trial + 1) % 2, 5, 10, 7);
        let clean = pad_and_mask_batch(&[&c, &d]).unwrap();
        let dirty = poison(&clean, &mut rng);
        let erun = |batch: &PaddedBatch| {
            let mut g = Graph::new();
            let mut cx = Ctx::new(&mut g, &emodel.params);
            let out = emodel.forward(&mut cx, batch, None).unwrap();
            let gates: Vec<f64> = out
                .gates
                .iter()
                .flat_map(|&n| g.value(n).data().to_vec())
                .collect();
            (g.value(out.logits).clone(), gates)
        };
        let ((l0, gates0), (l1, _)) = (erun(&clean), erun(&dirty));
        for (a, b) in l0.data().iter().zip(l1.data()) {
            let rel = (a - b).abs() / a.abs().max(1e-12);
            assert!(rel <= 1e-5, "emotion logits moved by {rel} in trial {trial}");
        }
        for v in gates0 {
            assert!(v > 0.0 && v < 1.0, "gate activation {v} escaped (0,1)");
        }
    }

    // Closed-gate limit: silence the first fusion gate and check the context
    // stream passes through unchanged.
    let mut closed = EmotionModel::new(ecfg, 84).unwrap();
    *closed.params.get_mut("if1.gate.w") = Tensor::zeros(16, 8);
    *closed.params.get_mut("if1.gate.b") = Tensor::from_fn(1, 8, |_, _| -40.0);
    let a = emotion_sample(&mut rng, "e", 0, 4, 10, 7);
    let batch = pad_and_mask_batch(&[&a]).unwrap();
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &closed.params);
    let (hc, hf) = closed.project_streams(&mut cx, &batch, None).unwrap();
    let (ctx_fused, _, gate) = closed.interfusion(&mut cx, closed.gate1(), hc, hf, &batch.mask);
    let before = g.value(hc).clone();
    let after = g.value(ctx_fused).clone();
    for (row, &valid) in batch.mask.iter().enumerate() {
        if !valid {
            continue;
        }
        for c in 0..8 {
            let rel = (after.get(row, c) - before.get(row, c)).abs()
                / before.get(row, c).abs().max(1e-12);
            assert!(rel <= 1e-12, "context leaked through a closed gate: {rel}");
        }
    }
    for v in g.value(gate).data() {
        assert!(*v > 0.0 && *v < 1.0);
    }
}

/// 9. Harness contracts: the plateau scheduler and early stopping replay
/// their pinned traces, and two same-seed training runs log identically.
#[test]
fn a9_scheduler_early_stop_and_same_seed_reproducibility() {
    // Flat validation loss, patience 2, factor 0.1: the rate drops on the
    // third flat epoch and again two epochs later.
    let lr0 = 0.3;
    let mut plateau = PlateauScheduler::new(lr0, 0.1, 2, 1e-6);
    let trace: Vec<f64> = (0..5).map(|_| plateau.step(1.0)).collect();
    let want = [lr0, lr0, 0.1 * lr0, 0.1 * lr0, 0.01 * lr0];
    for (got, want) in trace.iter().zip(want) {
        assert!((got - want).abs() <= 1e-12 * want.abs(), "trace {trace:?}");
    }
    // Strictly improving loss never reduces the rate.
    let mut improving = PlateauScheduler::new(lr0, 0.1, 2, 1e-6);
    for k in 0..10 {
        assert_eq!(improving.step(1.0 - 0.1 * k as f64), lr0);
    }

    // Constant metric, patience 7: one best epoch, seven stale epochs, then
    // the ninth update trips the stop.
    for mode in [Mode::Max, Mode::Min] {
        let mut stop = EarlyStop::new(7, mode);
        let mut stopped_at = None;
        for epoch in 1..=12 {
            if stop.update(0.5).stopped {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(9));
    }
    // A strictly improving metric never stops.
    let mut stop = EarlyStop::new(7, Mode::Max);
    for epoch in 0..50 {
        assert!(!stop.update(epoch as f64).stopped);
    }

    // Same-seed training runs must produce identical logs.
    let spec = SyntheticSpec {
        n_classes: 3,
        n_samples: 24,
        t_min: 3,
        t_max: 6,
        streams: BTreeMap::from([(ModalityTag::Rgb, 8), (ModalityTag::Pose, 5)]),
        rho: 0.7,
        noise: 0.4,
        jitter: 0.5,
        active_fraction: 0.6,
        seed: 91,
    };
    let data = generate_synthetic_dataset(&spec).unwrap();
    let cfg = GestureConfig {
        d_rgb: 8,
        d_pose: 5,
        d_hidden: 8,
        n_heads: 2,
        n_classes: 3,
        fusion: FusionKind::Cmtf,
        use_memory: true,
        refine_feeds_classifier: true,
        memory: MemoryConfig {
            capacity: 6,
            top_k: 3,
            confidence_threshold: 0.2,
            ..MemoryConfig::default()
        },
    };
    let tcfg = TrainConfig {
        lr: Some(1e-3),
        batch_size: 8,
        max_epochs: 4,
        warmup_epochs: 1,
        schedule: ScheduleConfig::default(),
        seed: 91,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = GestureModel::new(cfg, 91).unwrap();
        let mut bank = MemoryBank::new(3, 8, cfg.memory).unwrap();
        fit_gesture(&mut model, Some(&mut bank), &data, None, &tcfg).unwrap()
    };
    let (first, second) = (run(), run());
    assert_eq!(first.epochs, second.epochs);
    assert_eq!(first.best_epoch, second.best_epoch);
    let json_a = serde_json::to_string(&first.epochs).unwrap();
    let json_b = serde_json::to_string(&second.epochs).unwrap();
    assert_eq!(json_a, json_b);
}
