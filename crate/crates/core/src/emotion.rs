//! Binary emotion classifier over paired context and face embedding streams.
//!
//! Each stream is projected to a shared width (with train-time inverted
//! dropout), run through its own pre-norm transformer encoder stack with
//! sinusoidal positions added once at entry, then the two streams exchange
//! information twice through gated fusion blocks separated by one extra
//! encoder layer per stream. Valid time steps are mean-pooled, concatenated,
//! and mapped to a single logit; `sigmoid(logit)` is the probability of the
//! positive class.
//!
//! The gate is one shared affine map over the concatenated features:
//! `g = sigmoid(W [ctx; face] + b)`, used as `ctx' = ctx + g .* face` and
//! `face' = face + (1 - g) .* ctx` (or `g` both ways with
//! `bidirectional_gate`). Because the gate is a sigmoid image it lies
//! strictly inside (0, 1), and masked positions are re-zeroed after every
//! fusion.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ModalityTag, PaddedBatch};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::nn::{
    dropout_factors, init_rng, mask_factors, sinusoidal_positions, Ctx, EncoderLayer, Linear,
    Params, SeqShape,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmotionConfig {
    pub d_ctx: usize,
    pub d_face: usize,
    pub d_hidden: usize,
    /// Total encoder layers per stream; the last one runs between the two
    /// fusion blocks, the rest run before the first fusion.
    pub encoder_depth: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub ffn_mult: usize,
    /// Use g for both directions instead of g and (1 - g).
    pub bidirectional_gate: bool,
    /// Add an extra skip connection around each whole fusion block
    /// (out = in + fused(in)) on top of the gated sum's own residual.
    pub outer_residual: bool,
}

impl Default for EmotionConfig {
    fn default() -> Self {
        EmotionConfig {
            d_ctx: 768,
            d_face: 512,
            d_hidden: 512,
            encoder_depth: 8,
            n_heads: 4,
            dropout: 0.5,
            ffn_mult: 4,
            bidirectional_gate: false,
            outer_residual: false,
        }
    }
}

impl EmotionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_ctx == 0 || self.d_face == 0 || self.d_hidden == 0 {
            return Err(Error::Config("emotion dims must all be at least 1".into()));
        }
        if self.n_heads == 0 || !self.d_hidden.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_hidden {} must be divisible by n_heads {}",
                self.d_hidden, self.n_heads
            )));
        }
        if self.encoder_depth == 0 {
            return Err(Error::Config("encoder_depth must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be at least 1".into()));
        }
        Ok(())
    }
}

/// Node handles from one forward pass.
pub struct EmotionForward {
    /// `[batch, 1]` classification logits.
    pub logits: NodeId,
    /// Gate activations of the two fusion blocks, `[batch*steps, d_hidden]`.
    pub gates: [NodeId; 2],
    /// Pooled per-stream features, `[batch, d_hidden]` each.
    pub pooled_ctx: NodeId,
    pub pooled_face: NodeId,
}

#[derive(Clone, Debug)]
pub struct EmotionModel {
    cfg: EmotionConfig,
    pub params: Params,
    proj_ctx: Linear,
    proj_face: Linear,
    enc_ctx: Vec<EncoderLayer>,
    enc_face: Vec<EncoderLayer>,
    gate1: Linear,
    gate2: Linear,
    head: Linear,
}

impl EmotionModel {
    pub fn new(cfg: EmotionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut rng = init_rng(seed);
        let d = cfg.d_hidden;

        let proj_ctx = Linear::new("proj_ctx");
        proj_ctx.register(&mut params, &mut rng, cfg.d_ctx, d);
        let proj_face = Linear::new("proj_face");
        proj_face.register(&mut params, &mut rng, cfg.d_face, d);

        let mut enc_ctx = Vec::new();
        let mut enc_face = Vec::new();
        for i in 0..cfg.encoder_depth {
            let lc = EncoderLayer::new(&format!("enc_ctx.{i}"), cfg.n_heads);
            lc.register(&mut params, &mut rng, d, cfg.ffn_mult);
            enc_ctx.push(lc);
            let lf = EncoderLayer::new(&format!("enc_face.{i}"), cfg.n_heads);
            lf.register(&mut params, &mut rng, d, cfg.ffn_mult);
            enc_face.push(lf);
        }

        let gate1 = Linear::new("if1.gate");
        gate1.register(&mut params, &mut rng, 2 * d, d);
        let gate2 = Linear::new("if2.gate");
        gate2.register(&mut params, &mut rng, 2 * d, d);
        let head = Linear::new("head");
        head.register(&mut params, &mut rng, 2 * d, 1);

        Ok(EmotionModel {
            cfg,
            params,
            proj_ctx,
            proj_face,
            enc_ctx,
            enc_face,
            gate1,
            gate2,
            head,
        })
    }

    pub fn config(&self) -> &EmotionConfig {
        &self.cfg
    }

    /// Gate maps of the two fusion blocks, for driving
    /// [`Self::interfusion`] directly.
    pub fn gate1(&self) -> &Linear {
        &self.gate1
    }

    pub fn gate2(&self) -> &Linear {
        &self.gate2
    }

    /// Per-stream encoder stacks (ctx, face).
    pub fn encoder_layers(&self) -> (&[EncoderLayer], &[EncoderLayer]) {
        (&self.enc_ctx, &self.enc_face)
    }

    /// Project both streams to d_hidden and zero padded rows. With an RNG,
    /// applies inverted dropout (train mode); without, the pass is
    /// deterministic (eval mode).
    pub fn project_streams(
        &self,
        cx: &mut Ctx,
        batch: &PaddedBatch,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, NodeId)> {
        let ctx_t = batch.stream(ModalityTag::Ctx)?;
        let face_t = batch.stream(ModalityTag::Face)?;
        if ctx_t.cols() != self.cfg.d_ctx || face_t.cols() != self.cfg.d_face {
            return Err(Error::Incompatible(format!(
                "batch dims (ctx {}, face {}) do not match model ({}, {})",
                ctx_t.cols(),
                face_t.cols(),
                self.cfg.d_ctx,
                self.cfg.d_face
            )));
        }
        let keep = mask_factors(&batch.mask, self.cfg.d_hidden);
        let rows = batch.batch * batch.steps;

        let x_ctx = cx.g.leaf(ctx_t.clone());
        let x_face = cx.g.leaf(face_t.clone());
        let mut h_ctx = self.proj_ctx.forward(cx, x_ctx);
        let mut h_face = self.proj_face.forward(cx, x_face);
        if let Some(rng) = dropout_rng {
            if self.cfg.dropout > 0.0 {
                let f_ctx = dropout_factors(rng, rows, self.cfg.d_hidden, self.cfg.dropout);
                let f_face = dropout_factors(rng, rows, self.cfg.d_hidden, self.cfg.dropout);
                h_ctx = cx.g.scale_by(h_ctx, f_ctx);
                h_face = cx.g.scale_by(h_face, f_face);
            }
        }
        let h_ctx = cx.g.scale_by(h_ctx, keep.clone());
        let h_face = cx.g.scale_by(h_face, keep);
        Ok((h_ctx, h_face))
    }

    /// Run `layers` encoder layers over `x`, adding sinusoidal positions
    /// first when `add_positions`. Zero layers with positions is exactly
    /// x + positions at valid rows.
    pub fn encode_stream(
        &self,
        cx: &mut Ctx,
        x: NodeId,
        layers: &[EncoderLayer],
        shape: SeqShape,
        mask: &[bool],
        add_positions: bool,
    ) -> NodeId {
        let mut h = x;
        if add_positions {
            let pe = sinusoidal_positions(shape.batch, shape.steps, self.cfg.d_hidden);
            let keep = mask_factors(mask, self.cfg.d_hidden);
            let pe_node = cx.g.leaf(pe);
            let pe_masked = cx.g.scale_by(pe_node, keep);
            h = cx.g.add(h, pe_masked);
        }
        for layer in layers {
            h = layer.forward(cx, h, shape, mask);
        }
        h
    }

    /// Shared-gate fusion of two aligned streams. Returns (ctx', face', g).
    pub fn interfusion(
        &self,
        cx: &mut Ctx,
        gate: &Linear,
        h_ctx: NodeId,
        h_face: NodeId,
        mask: &[bool],
    ) -> (NodeId, NodeId, NodeId) {
        let cat = cx.g.concat_cols(h_ctx, h_face);
        let pre = gate.forward(cx, cat);
        let g = cx.g.sigmoid_op(pre);

        let from_face = cx.g.mul(g, h_face);
        let ctx_fused = cx.g.add(h_ctx, from_face);
        let back_gate = if self.cfg.bidirectional_gate {
            g
        } else {
            cx.g.affine(g, -1.0, 1.0)
        };
        let from_ctx = cx.g.mul(back_gate, h_ctx);
        let face_fused = cx.g.add(h_face, from_ctx);

        let (mut ctx_out, mut face_out) = (ctx_fused, face_fused);
        if self.cfg.outer_residual {
            ctx_out = cx.g.add(h_ctx, ctx_out);
            face_out = cx.g.add(h_face, face_out);
        }
        let keep = mask_factors(mask, self.cfg.d_hidden);
        let ctx_out = cx.g.scale_by(ctx_out, keep.clone());
        let face_out = cx.g.scale_by(face_out, keep);
        (ctx_out, face_out, g)
    }

    /// Full pipeline. Pass a dropout RNG for train mode, `None` for eval.
    pub fn forward(
        &self,
        cx: &mut Ctx,
        batch: &PaddedBatch,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EmotionForward> {
        let shape = SeqShape {
            batch: batch.batch,
            steps: batch.steps,
        };
        let (h_ctx, h_face) = self.project_streams(cx, batch, dropout_rng)?;

        // Stage 1: everything but the last layer, positions added once.
        let depth = self.cfg.encoder_depth;
        let stage2 = 1.min(depth);
        let stage1 = depth - stage2;
        let e_ctx = self.encode_stream(cx, h_ctx, &self.enc_ctx[..stage1], shape, &batch.mask, true);
        let e_face =
            self.encode_stream(cx, h_face, &self.enc_face[..stage1], shape, &batch.mask, true);

        let (f_ctx, f_face, g1) = self.interfusion(cx, &self.gate1, e_ctx, e_face, &batch.mask);

        // Stage 2: one more layer per stream, no position re-injection.
        let s_ctx =
            self.encode_stream(cx, f_ctx, &self.enc_ctx[stage1..], shape, &batch.mask, false);
        let s_face =
            self.encode_stream(cx, f_face, &self.enc_face[stage1..], shape, &batch.mask, false);

        let (r_ctx, r_face, g2) = self.interfusion(cx, &self.gate2, s_ctx, s_face, &batch.mask);

        let pooled_ctx = cx
            .g
            .masked_mean_rows(r_ctx, shape.batch, shape.steps, &batch.mask);
        let pooled_face = cx
            .g
            .masked_mean_rows(r_face, shape.batch, shape.steps, &batch.mask);
        let cat = cx.g.concat_cols(pooled_ctx, pooled_face);
        let logits = self.head.forward(cx, cat);

        Ok(EmotionForward {
            logits,
            gates: [g1, g2],
            pooled_ctx,
            pooled_face,
        })
    }
}
