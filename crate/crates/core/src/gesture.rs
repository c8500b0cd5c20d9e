//! Gesture classifier over paired RGB and pose token streams.
//!
//! Both streams are linearly projected to a shared width. The full model then
//! runs bidirectional multi-head cross-attention — RGB tokens querying pose
//! tokens and vice versa — merges the two attended streams per token with a
//! learned linear map, mean-pools over valid time steps, and feeds the pooled
//! feature to two classifier heads whose logits are blended by learned
//! softmax fusion weights. A reduced variant (`FusionKind::LateOnly`) skips
//! the cross-attention entirely and classifies each pooled stream separately,
//! serving as the ablation baseline.
//!
//! With `use_memory`, the pooled feature is refined before classification:
//! a preliminary prediction picks a class, the top-k most similar exemplars
//! of that class are retrieved from a [`MemoryBank`], and one residual
//! self-attention pass over `[feature, exemplars...]` produces the refined
//! feature. Retrieved exemplars enter the computation as constants, so
//! gradients never flow into stored memory.

use serde::{Deserialize, Serialize};

use crate::data::{ModalityTag, PaddedBatch};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::memory::{MemoryBank, MemoryConfig};
use crate::nn::{init_rng, mask_factors, Ctx, Linear, MhaBlock, Params, SeqShape};
use crate::tensor::Tensor;

/// Which fusion path the gesture model runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// No cross-attention: classify each pooled stream, then blend logits.
    LateOnly,
    /// Bidirectional cross-attention token fusion, then shared-feature heads.
    Cmtf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GestureConfig {
    pub d_rgb: usize,
    pub d_pose: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub n_classes: usize,
    pub fusion: FusionKind,
    pub use_memory: bool,
    /// When true (default), classifier heads consume the memory-refined
    /// feature; when false they consume the raw pooled feature and the
    /// refined feature only drives the refinement loss.
    pub refine_feeds_classifier: bool,
    pub memory: MemoryConfig,
}

impl Default for GestureConfig {
    fn default() -> Self {
        GestureConfig {
            d_rgb: 768,
            d_pose: 256,
            d_hidden: 512,
            n_heads: 8,
            n_classes: 32,
            fusion: FusionKind::Cmtf,
            use_memory: true,
            refine_feeds_classifier: true,
            memory: MemoryConfig::default(),
        }
    }
}

impl GestureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_rgb == 0 || self.d_pose == 0 || self.d_hidden == 0 {
            return Err(Error::Config("gesture dims must all be at least 1".into()));
        }
        if self.n_heads == 0 || !self.d_hidden.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_hidden {} must be divisible by n_heads {}",
                self.d_hidden, self.n_heads
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least 2 gesture classes".into()));
        }
        if self.use_memory && self.fusion != FusionKind::Cmtf {
            return Err(Error::Config(
                "memory refinement consumes the fused pooled feature; it requires fusion = cmtf"
                    .into(),
            ));
        }
        self.memory.validate()
    }
}

/// Node handles exposed by one forward pass. Cross-attention internals are
/// `None` on the late-only path; `refined` is `None` when memory is off.
pub struct GestureForward {
    /// RGB-query cross-attended tokens, `[batch*steps, d_hidden]`.
    pub attended_rgb: Option<NodeId>,
    /// Pose-query cross-attended tokens, `[batch*steps, d_hidden]`.
    pub attended_pose: Option<NodeId>,
    /// Merged token stream with padded rows zeroed, `[batch*steps, d_hidden]`.
    pub fused_tokens: Option<NodeId>,
    /// Pooled fused feature, `[batch, d_hidden]`.
    pub pooled: Option<NodeId>,
    /// Memory-refined feature, `[batch, d_hidden]`.
    pub refined: Option<NodeId>,
    /// Pose-head logits, `[batch, n_classes]`.
    pub y_pose: NodeId,
    /// RGB-head logits, `[batch, n_classes]`.
    pub y_rgb: NodeId,
    /// Blended logits, `[batch, n_classes]`.
    pub fused: NodeId,
    /// Class used for exemplar retrieval, per sample (empty when memory off).
    pub retrieval_classes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GestureModel {
    cfg: GestureConfig,
    pub params: Params,
    proj_rgb: Linear,
    proj_pose: Linear,
    xattn_rgb: MhaBlock,
    xattn_pose: MhaBlock,
    merge: Linear,
    clf_pose: Linear,
    clf_rgb: Linear,
    refine: MhaBlock,
}

/// Blend two logit sets with softmax(theta): `w0 * y_pose + w1 * y_rgb`.
pub fn weighted_late_fusion(g: &mut Graph, y_pose: NodeId, y_rgb: NodeId, theta: NodeId) -> NodeId {
    let w = g.softmax(theta);
    g.weighted_pair(y_pose, y_rgb, w)
}

/// Derived (w_pose, w_rgb) for a raw `[1, 2]` theta tensor.
pub fn fusion_weights(theta: &Tensor) -> (f64, f64) {
    assert_eq!(theta.shape(), (1, 2), "fusion theta must be [1, 2]");
    let (a, b) = (theta.get(0, 0), theta.get(0, 1));
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    (ea / (ea + eb), eb / (ea + eb))
}

impl GestureModel {
    /// Initialize parameters from `seed`. The refinement block's parameters
    /// are drawn last so every other parameter is bit-identical to a
    /// memory-free model built from the same seed.
    pub fn new(cfg: GestureConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut rng = init_rng(seed);
        let d = cfg.d_hidden;

        let proj_rgb = Linear::new("proj_rgb");
        proj_rgb.register(&mut params, &mut rng, cfg.d_rgb, d);
        let proj_pose = Linear::new("proj_pose");
        proj_pose.register(&mut params, &mut rng, cfg.d_pose, d);

        let xattn_rgb = MhaBlock::new("xattn_rgb", cfg.n_heads);
        let xattn_pose = MhaBlock::new("xattn_pose", cfg.n_heads);
        let merge = Linear::new("merge");
        if cfg.fusion == FusionKind::Cmtf {
            xattn_rgb.register(&mut params, &mut rng, d);
            xattn_pose.register(&mut params, &mut rng, d);
            merge.register(&mut params, &mut rng, 2 * d, d);
        }

        let clf_pose = Linear::new("clf_pose");
        clf_pose.register(&mut params, &mut rng, d, cfg.n_classes);
        let clf_rgb = Linear::new("clf_rgb");
        clf_rgb.register(&mut params, &mut rng, d, cfg.n_classes);

        params.insert(
            "fusion.theta",
            Tensor::from_vec(1, 2, vec![0.6f64.ln(), 0.4f64.ln()]),
        );

        let refine = MhaBlock::new("refine", cfg.n_heads);
        if cfg.use_memory {
            refine.register(&mut params, &mut rng, d);
            // The refinement head sits on a residual path; zeroing its output
            // projection makes a fresh model behave exactly like its
            // memory-free twin until training has learned a useful
            // correction. The projection is overwritten after registration so
            // the draw order (and every other parameter) stays unchanged.
            *params.get_mut("refine.wo.w") = Tensor::zeros(d, d);
        }

        Ok(GestureModel {
            cfg,
            params,
            proj_rgb,
            proj_pose,
            xattn_rgb,
            xattn_pose,
            merge,
            clf_pose,
            clf_rgb,
            refine,
        })
    }

    pub fn config(&self) -> &GestureConfig {
        &self.cfg
    }

    /// Run the model over a padded batch. `bank` must be `Some` iff the
    /// config enables memory; an empty bank degenerates to the plain fused
    /// path exactly.
    pub fn forward(
        &self,
        cx: &mut Ctx,
        batch: &PaddedBatch,
        bank: Option<&MemoryBank>,
    ) -> Result<GestureForward> {
        let rgb = batch.stream(ModalityTag::Rgb)?;
        let pose = batch.stream(ModalityTag::Pose)?;
        if rgb.cols() != self.cfg.d_rgb || pose.cols() != self.cfg.d_pose {
            return Err(Error::Incompatible(format!(
                "batch dims (rgb {}, pose {}) do not match model ({}, {})",
                rgb.cols(),
                pose.cols(),
                self.cfg.d_rgb,
                self.cfg.d_pose
            )));
        }
        match (self.cfg.use_memory, bank) {
            (true, None) => {
                return Err(Error::Config(
                    "memory-enabled gesture model requires a memory bank".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(Error::Config(
                    "gesture model built without memory was handed a bank".into(),
                ))
            }
            _ => {}
        }
        if let Some(b) = bank {
            if b.n_classes() != self.cfg.n_classes || b.dim() != self.cfg.d_hidden {
                return Err(Error::Incompatible(format!(
                    "bank ({} classes, dim {}) does not match model ({}, {})",
                    b.n_classes(),
                    b.dim(),
                    self.cfg.n_classes,
                    self.cfg.d_hidden
                )));
            }
        }

        let shape = SeqShape {
            batch: batch.batch,
            steps: batch.steps,
        };
        let keep = mask_factors(&batch.mask, self.cfg.d_hidden);

        let x_rgb = cx.g.leaf(rgb.clone());
        let x_pose = cx.g.leaf(pose.clone());
        let h_rgb = self.proj_rgb.forward(cx, x_rgb);
        let h_rgb = cx.g.scale_by(h_rgb, keep.clone());
        let h_pose = self.proj_pose.forward(cx, x_pose);
        let h_pose = cx.g.scale_by(h_pose, keep.clone());

        if self.cfg.fusion == FusionKind::LateOnly {
            let pooled_rgb = cx.g.masked_mean_rows(h_rgb, shape.batch, shape.steps, &batch.mask);
            let pooled_pose = cx.g.masked_mean_rows(h_pose, shape.batch, shape.steps, &batch.mask);
            let y_pose = self.clf_pose.forward(cx, pooled_pose);
            let y_rgb = self.clf_rgb.forward(cx, pooled_rgb);
            let theta = cx.p("fusion.theta");
            let fused = weighted_late_fusion(cx.g, y_pose, y_rgb, theta);
            return Ok(GestureForward {
                attended_rgb: None,
                attended_pose: None,
                fused_tokens: None,
                pooled: None,
                refined: None,
                y_pose,
                y_rgb,
                fused,
                retrieval_classes: Vec::new(),
            });
        }

        // Cross-modal token fusion: each stream queries the other; padded
        // key positions get exactly zero attention weight.
        let attended_rgb =
            self.xattn_rgb
                .forward(cx, h_rgb, h_pose, shape, shape.steps, &batch.mask);
        let attended_pose =
            self.xattn_pose
                .forward(cx, h_pose, h_rgb, shape, shape.steps, &batch.mask);
        let cat = cx.g.concat_cols(attended_rgb, attended_pose);
        let merged = self.merge.forward(cx, cat);
        let fused_tokens = cx.g.scale_by(merged, keep);
        let pooled = cx
            .g
            .masked_mean_rows(fused_tokens, shape.batch, shape.steps, &batch.mask);

        let (head_in, refined, retrieval_classes) = if let Some(bank) = bank {
            let (refined, classes) = self.refine_against_bank(cx, pooled, bank);
            let head_in = if self.cfg.refine_feeds_classifier {
                refined
            } else {
                pooled
            };
            (head_in, Some(refined), classes)
        } else {
            (pooled, None, Vec::new())
        };

        let y_pose = self.clf_pose.forward(cx, head_in);
        let y_rgb = self.clf_rgb.forward(cx, head_in);
        let theta = cx.p("fusion.theta");
        let fused = weighted_late_fusion(cx.g, y_pose, y_rgb, theta);

        Ok(GestureForward {
            attended_rgb: Some(attended_rgb),
            attended_pose: Some(attended_pose),
            fused_tokens: Some(fused_tokens),
            pooled: Some(pooled),
            refined,
            y_pose,
            y_rgb,
            fused,
            retrieval_classes,
        })
    }

    /// Preliminary classification on the raw pooled feature picks each
    /// sample's retrieval class; one residual self-attention pass over
    /// `[feature, exemplars...]` yields the refined feature. Samples whose
    /// class bank is empty pass through untouched, and a fully empty
    /// retrieval set short-circuits to the pooled node itself.
    fn refine_against_bank(
        &self,
        cx: &mut Ctx,
        pooled: NodeId,
        bank: &MemoryBank,
    ) -> (NodeId, Vec<usize>) {
        let y_pose = self.clf_pose.forward(cx, pooled);
        let y_rgb = self.clf_rgb.forward(cx, pooled);
        let theta = cx.p("fusion.theta");
        let preliminary = weighted_late_fusion(cx.g, y_pose, y_rgb, theta);

        let logits = cx.g.value(preliminary).clone();
        let feats = cx.g.value(pooled).clone();
        let classes: Vec<usize> = (0..logits.rows()).map(|b| argmax(logits.row(b))).collect();

        let retrievals: Vec<Vec<Vec<f64>>> = (0..feats.rows())
            .map(|b| bank.retrieve_topk(feats.row(b), classes[b], bank.config().top_k))
            .collect();
        if retrievals.iter().all(|r| r.is_empty()) {
            return (pooled, classes);
        }

        let d = self.cfg.d_hidden;
        let rows: Vec<NodeId> = retrievals
            .iter()
            .enumerate()
            .map(|(b, retrieved)| {
                let feat_row = cx.g.slice_rows(pooled, b, 1);
                if retrieved.is_empty() {
                    return feat_row;
                }
                let k = retrieved.len();
                let exemplars = cx.g.leaf(Tensor::from_fn(k, d, |i, j| retrieved[i][j]));
                let seq = cx.g.concat_rows(&[feat_row, exemplars]);
                let one = SeqShape {
                    batch: 1,
                    steps: k + 1,
                };
                let att = self
                    .refine
                    .forward(cx, seq, seq, one, k + 1, &vec![true; k + 1]);
                let res = cx.g.add(seq, att);
                cx.g.slice_rows(res, 0, 1)
            })
            .collect();
        (cx.g.concat_rows(&rows), classes)
    }
}

/// Index of the largest entry; earliest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
