//! Finite-difference verification of every differentiable block.
//!
//! Each named module builds a tiny deterministic fixture, evaluates its loss
//! under coordinate-wise central differences, and compares against the
//! analytic gradients from the reverse-mode tape. The relative error uses
//! `|a - n| / max(|a|, |n|, 1e-8)` per coordinate; a healthy block stays at
//! or below 1e-4 in double precision.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{pad_and_mask_batch, EmbeddingSequence, LoadedSample, ModalityTag, PaddedBatch};
use crate::emotion::{EmotionConfig, EmotionModel};
use crate::error::{Error, Result};
use crate::gesture::{FusionKind, GestureConfig, GestureModel};
use crate::graph::Graph;
use crate::memory::{MemoryBank, MemoryConfig};
use crate::nn::{xavier_uniform, Ctx, Linear, Params, SeqShape};
use crate::tensor::Tensor;
use crate::train::REFINEMENT_MARGIN;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const PASS_THRESHOLD: f64 = 1e-4;

/// Per-parameter-group maxima of the relative gradient error.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub module: String,
    pub groups: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= PASS_THRESHOLD
    }
}

/// The checkable module names, in the order `all` runs them.
pub fn all_module_names() -> &'static [&'static str] {
    &[
        "cmtf",
        "late_fusion",
        "refine",
        "alpha_gate",
        "interfusion",
        "encoder",
        "focal",
        "ce32",
        "full_gesture",
        "full_emotion",
    ]
}

/// Compare analytic gradients against central differences of `loss_of` for
/// every coordinate of every parameter. Parameters the loss never reads get
/// an exact-zero difference and count as error 0.
pub fn finite_difference_report<F>(
    module: &str,
    params: &Params,
    analytic: &BTreeMap<String, Tensor>,
    loss_of: F,
    eps: f64,
) -> GradCheckReport
where
    F: Fn(&Params) -> f64,
{
    let mut groups = Vec::new();
    let mut max_rel_err = 0.0f64;
    for name in params.names() {
        let base = params.get(name).clone();
        let zeros = Tensor::zeros(base.rows(), base.cols());
        let ga = analytic.get(name).unwrap_or(&zeros);
        let mut worst = 0.0f64;
        for r in 0..base.rows() {
            for c in 0..base.cols() {
                let mut p = params.clone();
                p.get_mut(name).set(r, c, base.get(r, c) + eps);
                let up = loss_of(&p);
                p.get_mut(name).set(r, c, base.get(r, c) - eps);
                let down = loss_of(&p);
                let numeric = (up - down) / (2.0 * eps);
                let a = ga.get(r, c);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        max_rel_err = max_rel_err.max(worst);
        groups.push((name.clone(), worst));
    }
    GradCheckReport { module: module.to_string(), groups, max_rel_err }
}

/// Run the named module's check; `Err` on an unknown name.
pub fn run_module(name: &str, eps: f64) -> Result<GradCheckReport> {
    match name {
        "cmtf" => Ok(check_cmtf(eps)),
        "late_fusion" => Ok(check_late_fusion(eps)),
        "refine" => Ok(check_refine(eps)),
        "alpha_gate" => Ok(check_alpha_gate(eps)),
        "interfusion" => Ok(check_interfusion(eps)),
        "encoder" => Ok(check_encoder(eps)),
        "focal" => Ok(check_focal(eps)),
        "ce32" => Ok(check_ce32(eps)),
        "full_gesture" => Ok(check_full_gesture(eps)),
        "full_emotion" => Ok(check_full_emotion(eps)),
        other => Err(Error::Config(format!(
            "unknown gradient-check module `{other}`; expected one of {:?}",
            all_module_names()
        ))),
    }
}

/// Re-run the focal fixture with analytic gradients deliberately doubled.
/// A working comparator must flag this with a max error near 0.5.
pub fn negative_control(eps: f64) -> GradCheckReport {
    let (params, lin, x, targets) = focal_fixture();
    let loss_of = |p: &Params| focal_loss_of(p, &lin, &x, &targets).0;
    let (_, grads) = focal_loss_of(&params, &lin, &x, &targets);
    let doubled: BTreeMap<String, Tensor> = grads
        .into_iter()
        .map(|(name, t)| {
            let scaled = Tensor::from_fn(t.rows(), t.cols(), |r, c| 2.0 * t.get(r, c));
            (name, scaled)
        })
        .collect();
    finite_difference_report("negative_control", &params, &doubled, loss_of, eps)
}

fn rand_sample(
    rng: &mut ChaCha8Rng,
    id: &str,
    label: usize,
    steps: usize,
    dims: &[(ModalityTag, usize)],
) -> LoadedSample {
    let mut streams = BTreeMap::new();
    for &(tag, dim) in dims {
        let data: Vec<f32> = (0..steps * dim)
            .map(|_| rng.random_range(-1.0f64..1.0) as f32)
            .collect();
        streams.insert(tag, EmbeddingSequence::new(steps, dim, data).unwrap());
    }
    LoadedSample::new(id.to_string(), label, streams).unwrap()
}

fn gesture_batch(seed: u64, labels: &[usize], steps: &[usize]) -> PaddedBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [(ModalityTag::Rgb, 7), (ModalityTag::Pose, 5)];
    let samples: Vec<LoadedSample> = labels
        .iter()
        .zip(steps)
        .enumerate()
        .map(|(i, (&y, &t))| rand_sample(&mut rng, &format!("g{i}"), y, t, &dims))
        .collect();
    let refs: Vec<&LoadedSample> = samples.iter().collect();
    pad_and_mask_batch(&refs).unwrap()
}

fn emotion_batch(seed: u64, labels: &[usize], steps: &[usize]) -> PaddedBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [(ModalityTag::Ctx, 5), (ModalityTag::Face, 4)];
    let samples: Vec<LoadedSample> = labels
        .iter()
        .zip(steps)
        .enumerate()
        .map(|(i, (&y, &t))| rand_sample(&mut rng, &format!("e{i}"), y, t, &dims))
        .collect();
    let refs: Vec<&LoadedSample> = samples.iter().collect();
    pad_and_mask_batch(&refs).unwrap()
}

fn tiny_gesture_cfg(fusion: FusionKind, use_memory: bool) -> GestureConfig {
    GestureConfig {
        d_rgb: 7,
        d_pose: 5,
        d_hidden: 8,
        n_heads: 2,
        n_classes: 4,
        fusion,
        use_memory,
        refine_feeds_classifier: true,
        memory: MemoryConfig { capacity: 6, top_k: 3, ..MemoryConfig::default() },
    }
}

fn tiny_emotion_cfg() -> EmotionConfig {
    EmotionConfig {
        d_ctx: 5,
        d_face: 4,
        d_hidden: 6,
        encoder_depth: 2,
        n_heads: 2,
        dropout: 0.5,
        ffn_mult: 2,
        bidirectional_gate: false,
        outer_residual: false,
    }
}

/// Fresh models zero the refinement head's output projection so the residual
/// path starts silent; the finite-difference probe needs it live, otherwise
/// the head's query/key/value gradients vanish identically.
fn unsilence_refinement(model: &mut GestureModel, seed: u64) {
    let d = model.config().d_hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    *model.params.get_mut("refine.wo.w") = xavier_uniform(&mut rng, d, d);
}

fn prefilled_bank(model: &GestureModel, filled_classes: &[usize], seed: u64) -> MemoryBank {
    let cfg = model.config();
    let mut bank = MemoryBank::new(cfg.n_classes, cfg.d_hidden, cfg.memory).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &c in filled_classes {
        let vecs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..cfg.d_hidden).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        bank.restore_class(c, vecs, 3).unwrap();
    }
    bank
}

fn check_cmtf(eps: f64) -> GradCheckReport {
    let model = GestureModel::new(tiny_gesture_cfg(FusionKind::Cmtf, false), 31).unwrap();
    let batch = gesture_batch(32, &[1, 2], &[3, 2]);
    let pass = |p: &Params, want_grads: bool| {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, p);
        let out = model.forward(&mut cx, &batch, None).unwrap();
        let loss = cx.g.sum_squares(out.fused_tokens.expect("cmtf emits fused tokens"));
        let value = cx.g.scalar(loss);
        let grads = want_grads.then(|| {
            let raw = cx.g.backward(loss);
            cx.grads_by_name(&raw)
        });
        (value, grads)
    };
    let analytic = pass(&model.params, true).1.unwrap();
    finite_difference_report("cmtf", &model.params, &analytic, |p| pass(p, false).0, eps)
}

fn check_late_fusion(eps: f64) -> GradCheckReport {
    let model = GestureModel::new(tiny_gesture_cfg(FusionKind::LateOnly, false), 33).unwrap();
    let batch = gesture_batch(34, &[0, 3], &[2, 3]);
    let pass = |p: &Params, want_grads: bool| {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, p);
        let out = model.forward(&mut cx, &batch, None).unwrap();
        let loss = cx.g.sum_squares(out.fused);
        let value = cx.g.scalar(loss);
        let grads = want_grads.then(|| {
            let raw = cx.g.backward(loss);
            cx.grads_by_name(&raw)
        });
        (value, grads)
    };
    let analytic = pass(&model.params, true).1.unwrap();
    finite_difference_report("late_fusion", &model.params, &analytic, |p| pass(p, false).0, eps)
}

fn check_refine(eps: f64) -> GradCheckReport {
    let mut model = GestureModel::new(tiny_gesture_cfg(FusionKind::Cmtf, true), 35).unwrap();
    unsilence_refinement(&mut model, 38);
    let bank = prefilled_bank(&model, &[0, 1, 2, 3], 36);
    let batch = gesture_batch(37, &[1, 2], &[3, 2]);
    let pass = |p: &Params, want_grads: bool| {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, p);
        let out = model.forward(&mut cx, &batch, Some(&bank)).unwrap();
        let loss = cx.g.sum_squares(out.refined.expect("memory model refines"));
        let value = cx.g.scalar(loss);
        let grads = want_grads.then(|| {
            let raw = cx.g.backward(loss);
            cx.grads_by_name(&raw)
        });
        (value, grads)
    };
    let analytic = pass(&model.params, true).1.unwrap();
    finite_difference_report("refine", &model.params, &analytic, |p| pass(p, false).0, eps)
}

fn check_alpha_gate(eps: f64) -> GradCheckReport {
    let model = EmotionModel::new(tiny_emotion_cfg(), 41).unwrap();
    let batch = emotion_batch(42, &[0, 1], &[3, 2]);
    let pass = |p: &Params, want_grads: bool| {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, p);
        let (hc, hf) = model.project_streams(&mut cx, &batch, None).unwrap();
        let (_, _, gate) = model.interfusion(&mut cx, model.gate1(), hc, hf, &batch.mask);
        let loss = cx.g.sum_squares(gate);
        let value = cx.g.scalar(loss);
        let grads = want_grads.then(|| {
            let raw = cx.g.backward(loss);
            cx.grads_by_name(&raw)
        });
        (value, grads)
    };
    let analytic = pass(&model.params, true).1.unwrap();
    finite_difference_report("alpha_gate", &model.params, &analytic, |p| pass(p, false).0, eps)
}

fn check_interfusion(eps: f64) -> GradCheckReport {
    let model = EmotionModel::new(tiny_emotion_cfg(), 43).unwrap();
    let batch = emotion_batch(44, &[1, 0], &[2, 3]);
    let pass = |p: &Params, want_grads: bool| {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, p);
        let (hc, hf) = model.project_streams(&mut cx, &batch, None).unwrap();
        let (c2, f2, _) = model.interfusion(&mut cx, model.gate1(), hc, hf, &batch.mask);
        let sc = cx.g.sum_squares(c2);
        let sf = cx.g.sum_squares(f2);
        let loss = cx.g.add(sc, sf);
        let value = cx.g.scalar(loss);
        let grads = want_grads.then(|| {
            let raw = cx.g.backward(loss);
            cx.grads_by_name(&raw)
        });
        (value, grads)
    };
    let analytic = pass(&model.params, true).1.unwrap();
    finite_difference_report("interfusion", &model.params, &analytic, |p| pass(p, false).0, eps)
}

fn check_encoder(eps: f64) -> GradCheckReport {
    let model = EmotionModel::new(tiny_emotion_cfg(), 45).unwrap();
    let batch = emotion_batch(46, &[0, 1], &[3, 2]);
    let shape = SeqShape { batch: batch.batch, steps: batch.steps };
    let pass = |p: &Params, want_grads: bool| {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, p);
        let (hc, _) = model.project_streams(&mut cx, &batch, None).unwrap();
        let (layers, _) = model.encoder_layers();
        let out = layers[0].forward(&mut cx, hc, shape, &batch.mask);
        let loss = cx.g.sum_squares(out);
        let value = cx.g.scalar(loss);
        let grads = want_grads.then(|| {
            let raw = cx.g.backward(loss);
            cx.grads_by_name(&raw)
        });
        (value, grads)
    };
    let analytic = pass(&model.params, true).1.unwrap();
    finite_difference_report("encoder", &model.params, &analytic, |p| pass(p, false).0, eps)
}

type LinearFixture = (Params, Linear, Tensor, Vec<bool>);

fn focal_fixture() -> LinearFixture {
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let lin = Linear::new("lin");
    lin.register(&mut params, &mut rng, 5, 1);
    let x = Tensor::from_fn(4, 5, |_, _| rng.random_range(-1.0..1.0));
    let targets = vec![true, false, true, false];
    (params, lin, x, targets)
}

fn focal_loss_of(
    p: &Params,
    lin: &Linear,
    x: &Tensor,
    targets: &[bool],
) -> (f64, BTreeMap<String, Tensor>) {
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, p);
    let xin = cx.g.leaf(x.clone());
    let logits = lin.forward(&mut cx, xin);
    let loss = cx.g.focal_bce(logits, targets, 0.5, [1.3, 0.7]);
    let value = cx.g.scalar(loss);
    let raw = cx.g.backward(loss);
    let grads = cx.grads_by_name(&raw);
    (value, grads)
}

fn check_focal(eps: f64) -> GradCheckReport {
    let (params, lin, x, targets) = focal_fixture();
    let (_, analytic) = focal_loss_of(&params, &lin, &x, &targets);
    finite_difference_report(
        "focal",
        &params,
        &analytic,
        |p| focal_loss_of(p, &lin, &x, &targets).0,
        eps,
    )
}

fn check_ce32(eps: f64) -> GradCheckReport {
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let lin = Linear::new("lin");
    lin.register(&mut params, &mut rng, 6, 32);
    let x = Tensor::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
    let labels = [0usize, 13, 31];
    let class_w: Vec<f64> = (0..32).map(|c| 0.75 + 0.025 * c as f64).collect();
    let pass = |p: &Params, want_grads: bool| {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, p);
        let xin = cx.g.leaf(x.clone());
        let logits = lin.forward(&mut cx, xin);
        let loss = cx.g.cross_entropy(logits, &labels, &class_w);
        let value = cx.g.scalar(loss);
        let grads = want_grads.then(|| {
            let raw = cx.g.backward(loss);
            cx.grads_by_name(&raw)
        });
        (value, grads)
    };
    let analytic = pass(&params, true).1.unwrap();
    finite_difference_report("ce32", &params, &analytic, |p| pass(p, false).0, eps)
}

fn check_full_gesture(eps: f64) -> GradCheckReport {
    let mut model = GestureModel::new(tiny_gesture_cfg(FusionKind::Cmtf, true), 55).unwrap();
    unsilence_refinement(&mut model, 58);
    let bank = prefilled_bank(&model, &[0, 1, 2], 56);
    let protos = bank.prototypes();
    let batch = gesture_batch(57, &[1, 2, 3], &[3, 2, 3]);
    let class_w = vec![1.0; 4];
    let pass = |p: &Params, want_grads: bool| {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, p);
        let out = model.forward(&mut cx, &batch, Some(&bank)).unwrap();
        let l_c = cx.g.cross_entropy(out.fused, &batch.labels, &class_w);
        let feats = out.refined.expect("memory model refines");
        let l_p = cx.g.refinement_loss(feats, &batch.labels, &protos, REFINEMENT_MARGIN);
        let loss = cx.g.add(l_c, l_p);
        let value = cx.g.scalar(loss);
        let grads = want_grads.then(|| {
            let raw = cx.g.backward(loss);
            cx.grads_by_name(&raw)
        });
        (value, grads)
    };
    let analytic = pass(&model.params, true).1.unwrap();
    finite_difference_report("full_gesture", &model.params, &analytic, |p| pass(p, false).0, eps)
}

fn check_full_emotion(eps: f64) -> GradCheckReport {
    let model = EmotionModel::new(tiny_emotion_cfg(), 61).unwrap();
    let batch = emotion_batch(62, &[1, 0], &[3, 2]);
    let targets = [true, false];
    let pass = |p: &Params, want_grads: bool| {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, p);
        let out = model.forward(&mut cx, &batch, None).unwrap();
        let loss = cx.g.focal_bce(out.logits, &targets, 0.5, [1.0, 1.0]);
        let value = cx.g.scalar(loss);
        let grads = want_grads.then(|| {
            let raw = cx.g.backward(loss);
            cx.grads_by_name(&raw)
        });
        (value, grads)
    };
    let analytic = pass(&model.params, true).1.unwrap();
    finite_difference_report("full_emotion", &model.params, &analytic, |p| pass(p, false).0, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_quadratic_loss_is_exact_to_rounding() {
        // Central differences are exact for quadratics, so a pure linear map
        // under a sum-of-squares loss isolates the comparator's noise floor.
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let lin = Linear::new("lin");
        lin.register(&mut params, &mut rng, 3, 2);
        let x = Tensor::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let pass = |p: &Params, want_grads: bool| {
            let mut g = Graph::new();
            let mut cx = Ctx::new(&mut g, p);
            let xin = cx.g.leaf(x.clone());
            let y = lin.forward(&mut cx, xin);
            let loss = cx.g.sum_squares(y);
            let value = cx.g.scalar(loss);
            let grads = want_grads.then(|| {
                let raw = cx.g.backward(loss);
                cx.grads_by_name(&raw)
            });
            (value, grads)
        };
        let analytic = pass(&params, true).1.unwrap();
        let report =
            finite_difference_report("linear", &params, &analytic, |p| pass(p, false).0, 1e-5);
        assert!(report.max_rel_err <= 1e-10, "max err {}", report.max_rel_err);
    }

    #[test]
    fn focal_module_passes() {
        let report = run_module("focal", DEFAULT_EPS).unwrap();
        assert!(report.passed(), "max err {}", report.max_rel_err);
        assert!(!report.groups.is_empty());
    }

    #[test]
    fn ce32_module_passes() {
        let report = run_module("ce32", DEFAULT_EPS).unwrap();
        assert!(report.passed(), "max err {}", report.max_rel_err);
    }

    #[test]
    fn alpha_gate_module_passes() {
        let report = run_module("alpha_gate", DEFAULT_EPS).unwrap();
        assert!(report.passed(), "max err {}", report.max_rel_err);
    }

    #[test]
    fn doubled_gradients_are_flagged_near_half() {
        let report = negative_control(DEFAULT_EPS);
        assert!(
            (report.max_rel_err - 0.5).abs() < 0.05,
            "control error {}",
            report.max_rel_err
        );
        assert!(!report.passed());
    }

    #[test]
    fn unknown_module_is_rejected() {
        let err = run_module("nope", DEFAULT_EPS).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn module_list_matches_runner() {
        for name in all_module_names() {
            // Every listed module must at least resolve; the expensive ones
            // are exercised end-to-end in the integration suite.
            assert!(name.chars().all(|c| c.is_ascii_lowercase() || c == '_' || c.is_ascii_digit()));
        }
        assert_eq!(all_module_names().len(), 10);
    }
}
