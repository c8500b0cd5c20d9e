//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] is an append-only list of nodes; every operation evaluates
//! eagerly and records what it needs for the backward pass. Node inputs always
//! have smaller ids than the node itself, so [`Graph::backward`] is a single
//! reverse sweep over the tape.
//!
//! The op set is deliberately small: dense matmul plus the handful of fused
//! blocks (masked attention, layer norm, the loss heads) that are easier to
//! differentiate by hand than to compose out of primitives. Each hand-written
//! backward rule is checked against central differences in the tests below.

// Index loops mirror the backward formulas; iterator rewrites obscure them.
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

use crate::tensor::{dot, Tensor};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

enum Op {
    Leaf,
    /// C = A·B, A: [m,k], B: [k,n].
    MatMul { a: NodeId, b: NodeId },
    /// y = x + bias broadcast over rows; bias: [1,n].
    AddBias { x: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Element-wise product of equal shapes.
    Mul { a: NodeId, b: NodeId },
    /// y = scale·x + shift (scalar constants).
    Affine { x: NodeId, scale: f64 },
    Sigmoid { x: NodeId },
    /// tanh-form GELU; smooth everywhere, which keeps finite differences honest.
    Gelu { x: NodeId },
    /// Row-wise softmax.
    Softmax { x: NodeId },
    /// Row-wise layer norm with learned gain/bias ([1,d] each).
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    /// Scaled dot-product attention over flattened [batch*T, d] operands with
    /// per-key validity masking. Softmax weights are cached for the backward.
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        t_q: usize,
        t_k: usize,
        heads: usize,
        key_mask: Vec<bool>,
        attn: Vec<f64>,
    },
    ConcatCols { a: NodeId, b: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize },
    /// Mean over valid steps of each sequence: [batch*steps, d] → [batch, d].
    MaskedMeanRows { x: NodeId, batch: usize, steps: usize, mask: Vec<bool> },
    /// Element-wise product with a constant tensor (dropout masks, padding zeroing).
    ScaleBy { x: NodeId, factors: Tensor },
    /// out = w₀·a + w₁·b with w a differentiable [1,2] node.
    WeightedPair { a: NodeId, b: NodeId, w: NodeId },
    SumSquares { x: NodeId },
    /// Weighted mean cross-entropy over rows of logits.
    CrossEntropy { logits: NodeId, labels: Vec<usize>, class_w: Vec<f64> },
    /// Binary focal loss on single-logit rows.
    FocalBce { logits: NodeId, targets: Vec<bool>, gamma: f64, class_w: [f64; 2] },
    /// Prototype alignment + margin loss over feature rows (see memory module).
    RefinementLoss {
        feats: NodeId,
        labels: Vec<usize>,
        protos: Vec<Option<Vec<f64>>>,
        margin: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`]. Intermediate node
/// gradients are consumed during the sweep; leaf gradients survive.
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.0.get(id).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Value of a [1,1] node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let t = self.value(id);
        assert_eq!(t.shape(), (1, 1), "scalar() expects a [1,1] node");
        t.get(0, 0)
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul { a, b })
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (xb, bb) = (self.value(x), self.value(bias));
        assert_eq!(bb.rows(), 1, "bias must be [1,n]");
        assert_eq!(xb.cols(), bb.cols(), "bias width must match");
        let mut v = xb.clone();
        for i in 0..v.rows() {
            for j in 0..v.cols() {
                let b = bb.get(0, j);
                v.set(i, j, v.get(i, j) + b);
            }
        }
        self.push(v, Op::AddBias { x, bias })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes must agree");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes must agree");
        let (ta, tb) = (self.value(a), self.value(b));
        let v = Tensor::from_fn(ta.rows(), ta.cols(), |i, j| ta.get(i, j) * tb.get(i, j));
        self.push(v, Op::Mul { a, b })
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let t = self.value(x);
        let v = Tensor::from_fn(t.rows(), t.cols(), |i, j| scale * t.get(i, j) + shift);
        self.push(v, Op::Affine { x, scale })
    }

    pub fn sigmoid_op(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let v = Tensor::from_fn(t.rows(), t.cols(), |i, j| sigmoid(t.get(i, j)));
        self.push(v, Op::Sigmoid { x })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let v = Tensor::from_fn(t.rows(), t.cols(), |i, j| {
            let u = t.get(i, j);
            0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
        });
        self.push(v, Op::Gelu { x })
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let mut v = t.clone();
        for i in 0..v.rows() {
            softmax_row_inplace(v.row_mut(i));
        }
        self.push(v, Op::Softmax { x })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(tg.shape(), (1, tx.cols()), "layer norm gain must be [1,d]");
        assert_eq!(tb.shape(), (1, tx.cols()), "layer norm bias must be [1,d]");
        let d = tx.cols();
        let mut v = Tensor::zeros(tx.rows(), d);
        for i in 0..tx.rows() {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                v.set(i, j, tg.get(0, j) * (row[j] - mean) * inv + tb.get(0, j));
            }
        }
        self.push(v, Op::LayerNorm { x, gain, bias })
    }

    /// Multi-head scaled dot-product attention. `q` is [batch*t_q, d] and
    /// `k`/`v` are [batch*t_k, d]; `key_mask` flags valid keys per flattened
    /// (batch, step). Masked keys receive exactly zero attention. Every
    /// sequence must have at least one valid key.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        t_q: usize,
        t_k: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> NodeId {
        let d = self.value(q).cols();
        assert_eq!(self.value(q).rows(), batch * t_q, "q rows must be batch*t_q");
        assert_eq!(self.value(k).rows(), batch * t_k, "k rows must be batch*t_k");
        assert_eq!(self.value(k).shape(), self.value(v).shape(), "k and v must match");
        assert_eq!(self.value(k).cols(), d, "q/k width must match");
        assert_eq!(key_mask.len(), batch * t_k, "key mask must cover batch*t_k");
        assert_eq!(d % heads, 0, "width must divide evenly into heads");
        for b in 0..batch {
            assert!(
                key_mask[b * t_k..(b + 1) * t_k].iter().any(|&m| m),
                "attention requires at least one valid key per sequence"
            );
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq_, tk_, tv_) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(batch * t_q, d);
        let mut attn = vec![0.0; batch * heads * t_q * t_k];
        for b in 0..batch {
            for h in 0..heads {
                let hoff = h * dh;
                for i in 0..t_q {
                    let qrow = &tq_.row(b * t_q + i)[hoff..hoff + dh];
                    let arow =
                        &mut attn[((b * heads + h) * t_q + i) * t_k..][..t_k];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..t_k {
                        if key_mask[b * t_k + j] {
                            let krow = &tk_.row(b * t_k + j)[hoff..hoff + dh];
                            let s = scale * dot(qrow, krow);
                            arow[j] = s;
                            mx = mx.max(s);
                        }
                    }
                    let mut z = 0.0;
                    for j in 0..t_k {
                        if key_mask[b * t_k + j] {
                            arow[j] = (arow[j] - mx).exp();
                            z += arow[j];
                        } else {
                            arow[j] = 0.0;
                        }
                    }
                    for a in arow.iter_mut() {
                        *a /= z;
                    }
                    let orow = &mut out.row_mut(b * t_q + i)[hoff..hoff + dh];
                    for j in 0..t_k {
                        let a = arow[j];
                        if a == 0.0 {
                            continue;
                        }
                        let vrow = &tv_.row(b * t_k + j)[hoff..hoff + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += a * vv;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention { q, k, v, batch, t_q, t_k, heads, key_mask: key_mask.to_vec(), attn },
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows(), tb.rows(), "concat_cols row counts must agree");
        let v = Tensor::from_fn(ta.rows(), ta.cols() + tb.cols(), |i, j| {
            if j < ta.cols() {
                ta.get(i, j)
            } else {
                tb.get(i, j - ta.cols())
            }
        });
        self.push(v, Op::ConcatCols { a, b })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows widths must agree");
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let t = self.value(x);
        assert!(start + len <= t.rows(), "slice_rows out of range");
        let v = Tensor::from_fn(len, t.cols(), |i, j| t.get(start + i, j));
        self.push(v, Op::SliceRows { x, start })
    }

    pub fn masked_mean_rows(
        &mut self,
        x: NodeId,
        batch: usize,
        steps: usize,
        mask: &[bool],
    ) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.rows(), batch * steps, "masked_mean_rows rows must be batch*steps");
        assert_eq!(mask.len(), batch * steps, "mask must cover batch*steps");
        let d = t.cols();
        let mut v = Tensor::zeros(batch, d);
        for b in 0..batch {
            let n = mask[b * steps..(b + 1) * steps].iter().filter(|&&m| m).count();
            assert!(n > 0, "masked mean requires at least one valid step per sequence");
            for s in 0..steps {
                if mask[b * steps + s] {
                    for j in 0..d {
                        v.set(b, j, v.get(b, j) + t.get(b * steps + s, j) / n as f64);
                    }
                }
            }
        }
        self.push(v, Op::MaskedMeanRows { x, batch, steps, mask: mask.to_vec() })
    }

    pub fn scale_by(&mut self, x: NodeId, factors: Tensor) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.shape(), factors.shape(), "scale_by factor shape must match");
        let v = Tensor::from_fn(t.rows(), t.cols(), |i, j| t.get(i, j) * factors.get(i, j));
        self.push(v, Op::ScaleBy { x, factors })
    }

    pub fn weighted_pair(&mut self, a: NodeId, b: NodeId, w: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "weighted_pair shapes");
        assert_eq!(self.value(w).shape(), (1, 2), "weighted_pair expects w as [1,2]");
        let (ta, tb, tw) = (self.value(a), self.value(b), self.value(w));
        let (w0, w1) = (tw.get(0, 0), tw.get(0, 1));
        let v = Tensor::from_fn(ta.rows(), ta.cols(), |i, j| {
            w0 * ta.get(i, j) + w1 * tb.get(i, j)
        });
        self.push(v, Op::WeightedPair { a, b, w })
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::SumSquares { x })
    }

    /// Mean over rows of `class_w[label] · (logsumexp(row) − row[label])`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize], class_w: &[f64]) -> NodeId {
        let t = self.value(logits);
        assert_eq!(t.rows(), labels.len(), "one label per logit row");
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < t.cols(), "label out of range");
            let row = t.row(i);
            total += class_w[y] * (log_sum_exp(row) - row[y]);
        }
        let v = Tensor::from_vec(1, 1, vec![total / labels.len() as f64]);
        self.push(
            v,
            Op::CrossEntropy { logits, labels: labels.to_vec(), class_w: class_w.to_vec() },
        )
    }

    /// Mean binary focal loss over [n,1] logits; `class_w` indexes by target.
    pub fn focal_bce(
        &mut self,
        logits: NodeId,
        targets: &[bool],
        gamma: f64,
        class_w: [f64; 2],
    ) -> NodeId {
        let t = self.value(logits);
        assert_eq!(t.shape(), (targets.len(), 1), "focal expects [n,1] logits");
        let mut total = 0.0;
        for (i, &tgt) in targets.iter().enumerate() {
            let w = class_w[tgt as usize];
            total += w * focal_term(t.get(i, 0), tgt, gamma);
        }
        let v = Tensor::from_vec(1, 1, vec![total / targets.len() as f64]);
        self.push(v, Op::FocalBce { logits, targets: targets.to_vec(), gamma, class_w })
    }

    /// Mean over rows whose class has a prototype of
    /// `(1 − cos(f, μ_y)) + max(0, margin + max_{c≠y} cos(f, μ_c) − cos(f, μ_y))`.
    pub fn refinement_loss(
        &mut self,
        feats: NodeId,
        labels: &[usize],
        protos: &[Option<Vec<f64>>],
        margin: f64,
    ) -> NodeId {
        let t = self.value(feats);
        assert_eq!(t.rows(), labels.len(), "one label per feature row");
        let val = refinement_loss_value(t, labels, protos, margin);
        self.push(
            Tensor::from_vec(1, 1, vec![val]),
            Op::RefinementLoss {
                feats,
                labels: labels.to_vec(),
                protos: protos.to_vec(),
                margin,
            },
        )
    }

    /// Reverse sweep from a scalar loss node. Returns per-node gradients;
    /// only leaf gradients are retained after the sweep.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        for id in (0..=loss).rev() {
            let g = match &self.nodes[id].op {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(id, &g, &mut grads);
        }
        Grads(grads)
    }

    fn backward_node(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let da = g.matmul_nt(self.value(*b));
                let db = self.value(*a).matmul_tn(g);
                add_grad(grads, *a, da);
                add_grad(grads, *b, db);
            }
            Op::AddBias { x, bias } => {
                let mut db = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        db.set(0, j, db.get(0, j) + g.get(i, j));
                    }
                }
                add_grad(grads, *x, g.clone());
                add_grad(grads, *bias, db);
            }
            Op::Add { a, b } => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = Tensor::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * tb.get(i, j));
                let db = Tensor::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * ta.get(i, j));
                add_grad(grads, *a, da);
                add_grad(grads, *b, db);
            }
            Op::Affine { x, scale } => {
                let mut dx = g.clone();
                dx.scale(*scale);
                add_grad(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let y = self.value(id);
                let dx = Tensor::from_fn(g.rows(), g.cols(), |i, j| {
                    let s = y.get(i, j);
                    g.get(i, j) * s * (1.0 - s)
                });
                add_grad(grads, *x, dx);
            }
            Op::Gelu { x } => {
                let t = self.value(*x);
                let dx = Tensor::from_fn(g.rows(), g.cols(), |i, j| {
                    let u = t.get(i, j);
                    let inner = GELU_C * (u + GELU_A * u * u * u);
                    let th = inner.tanh();
                    let d = 0.5 * (1.0 + th)
                        + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * u * u);
                    g.get(i, j) * d
                });
                add_grad(grads, *x, dx);
            }
            Op::Softmax { x } => {
                let y = self.value(id);
                let mut dx = Tensor::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let dotp: f64 = (0..g.cols()).map(|j| g.get(i, j) * y.get(i, j)).sum();
                    for j in 0..g.cols() {
                        dx.set(i, j, y.get(i, j) * (g.get(i, j) - dotp));
                    }
                }
                add_grad(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let d = tx.cols();
                let mut dx = Tensor::zeros(tx.rows(), d);
                let mut dgain = Tensor::zeros(1, d);
                let mut dbias = Tensor::zeros(1, d);
                for i in 0..tx.rows() {
                    let row = tx.row(i);
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let mut m_gd = 0.0; // mean of gain·dy
                    let mut m_gdx = 0.0; // mean of gain·dy·x̂
                    for j in 0..d {
                        let xh = (row[j] - mean) * inv;
                        let gd = tg.get(0, j) * g.get(i, j);
                        m_gd += gd;
                        m_gdx += gd * xh;
                        dgain.set(0, j, dgain.get(0, j) + g.get(i, j) * xh);
                        dbias.set(0, j, dbias.get(0, j) + g.get(i, j));
                    }
                    m_gd /= d as f64;
                    m_gdx /= d as f64;
                    for j in 0..d {
                        let xh = (row[j] - mean) * inv;
                        let gd = tg.get(0, j) * g.get(i, j);
                        dx.set(i, j, inv * (gd - m_gd - xh * m_gdx));
                    }
                }
                add_grad(grads, *x, dx);
                add_grad(grads, *gain, dgain);
                add_grad(grads, *bias, dbias);
            }
            Op::Attention { q, k, v, batch, t_q, t_k, heads, key_mask, attn } => {
                let (tq_, tk_, tv_) = (self.value(*q), self.value(*k), self.value(*v));
                let d = tq_.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(tq_.rows(), d);
                let mut dk = Tensor::zeros(tk_.rows(), d);
                let mut dv = Tensor::zeros(tv_.rows(), d);
                let mut da = vec![0.0; *t_k];
                for b in 0..*batch {
                    for h in 0..*heads {
                        let hoff = h * dh;
                        for i in 0..*t_q {
                            let gout = &g.row(b * t_q + i)[hoff..hoff + dh];
                            let arow = &attn[((b * heads + h) * t_q + i) * t_k..][..*t_k];
                            // dA_ij = dOut · V_j, then softmax backward to scores.
                            let mut row_dot = 0.0;
                            for j in 0..*t_k {
                                if arow[j] != 0.0 {
                                    let vrow = &tv_.row(b * t_k + j)[hoff..hoff + dh];
                                    da[j] = dot(gout, vrow);
                                    row_dot += arow[j] * da[j];
                                }
                            }
                            let qrow = &tq_.row(b * t_q + i)[hoff..hoff + dh];
                            for j in 0..*t_k {
                                if !key_mask[b * t_k + j] {
                                    continue;
                                }
                                let a = arow[j];
                                let ds = a * (da[j] - row_dot) * scale;
                                let krow = &tk_.row(b * t_k + j)[hoff..hoff + dh];
                                let dqrow = &mut dq.row_mut(b * t_q + i)[hoff..hoff + dh];
                                for (dst, &kk) in dqrow.iter_mut().zip(krow) {
                                    *dst += ds * kk;
                                }
                                let dkrow = &mut dk.row_mut(b * t_k + j)[hoff..hoff + dh];
                                for (dst, &qq) in dkrow.iter_mut().zip(qrow) {
                                    *dst += ds * qq;
                                }
                                if a != 0.0 {
                                    let dvrow = &mut dv.row_mut(b * t_k + j)[hoff..hoff + dh];
                                    for (dst, &go) in dvrow.iter_mut().zip(gout) {
                                        *dst += a * go;
                                    }
                                }
                            }
                        }
                    }
                }
                add_grad(grads, *q, dq);
                add_grad(grads, *k, dk);
                add_grad(grads, *v, dv);
            }
            Op::ConcatCols { a, b } => {
                let ca = self.value(*a).cols();
                let da = Tensor::from_fn(g.rows(), ca, |i, j| g.get(i, j));
                let db = Tensor::from_fn(g.rows(), g.cols() - ca, |i, j| g.get(i, ca + j));
                add_grad(grads, *a, da);
                add_grad(grads, *b, db);
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let dp = Tensor::from_fn(r, g.cols(), |i, j| g.get(start + i, j));
                    add_grad(grads, p, dp);
                    start += r;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        dx.set(start + i, j, g.get(i, j));
                    }
                }
                add_grad(grads, *x, dx);
            }
            Op::MaskedMeanRows { x, batch, steps, mask } => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                for b in 0..*batch {
                    let n = mask[b * steps..(b + 1) * steps].iter().filter(|&&m| m).count();
                    for s in 0..*steps {
                        if mask[b * steps + s] {
                            for j in 0..tx.cols() {
                                dx.set(b * steps + s, j, g.get(b, j) / n as f64);
                            }
                        }
                    }
                }
                add_grad(grads, *x, dx);
            }
            Op::ScaleBy { x, factors } => {
                let dx =
                    Tensor::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * factors.get(i, j));
                add_grad(grads, *x, dx);
            }
            Op::WeightedPair { a, b, w } => {
                let (ta, tb, tw) = (self.value(*a), self.value(*b), self.value(*w));
                let (w0, w1) = (tw.get(0, 0), tw.get(0, 1));
                let mut da = g.clone();
                da.scale(w0);
                let mut db = g.clone();
                db.scale(w1);
                let mut dw = Tensor::zeros(1, 2);
                let mut acc0 = 0.0;
                let mut acc1 = 0.0;
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        acc0 += g.get(i, j) * ta.get(i, j);
                        acc1 += g.get(i, j) * tb.get(i, j);
                    }
                }
                dw.set(0, 0, acc0);
                dw.set(0, 1, acc1);
                add_grad(grads, *a, da);
                add_grad(grads, *b, db);
                add_grad(grads, *w, dw);
            }
            Op::SumSquares { x } => {
                let tx = self.value(*x);
                let s = g.get(0, 0);
                let dx = Tensor::from_fn(tx.rows(), tx.cols(), |i, j| 2.0 * tx.get(i, j) * s);
                add_grad(grads, *x, dx);
            }
            Op::CrossEntropy { logits, labels, class_w } => {
                let t = self.value(*logits);
                let gs = g.get(0, 0) / labels.len() as f64;
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                for (i, &y) in labels.iter().enumerate() {
                    let row = t.row(i);
                    let lse = log_sum_exp(row);
                    for j in 0..t.cols() {
                        let p = (row[j] - lse).exp();
                        let ind = if j == y { 1.0 } else { 0.0 };
                        dx.set(i, j, class_w[y] * (p - ind) * gs);
                    }
                }
                add_grad(grads, *logits, dx);
            }
            Op::FocalBce { logits, targets, gamma, class_w } => {
                let t = self.value(*logits);
                let gs = g.get(0, 0) / targets.len() as f64;
                let mut dx = Tensor::zeros(t.rows(), 1);
                for (i, &tgt) in targets.iter().enumerate() {
                    let w = class_w[tgt as usize];
                    dx.set(i, 0, w * focal_term_dlogit(t.get(i, 0), tgt, *gamma) * gs);
                }
                add_grad(grads, *logits, dx);
            }
            Op::RefinementLoss { feats, labels, protos, margin } => {
                let t = self.value(*feats);
                let dx = refinement_loss_grad(t, labels, protos, *margin);
                let mut dx = dx;
                dx.scale(g.get(0, 0));
                add_grad(grads, *feats, dx);
            }
        }
    }
}

fn add_grad(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot => *slot = Some(delta),
    }
}

fn softmax_row_inplace(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// One focal term, −(1−p_t)^γ·ln(p_t), computed entirely from softplus so it
/// stays finite at extreme logits.
pub fn focal_term(logit: f64, target: bool, gamma: f64) -> f64 {
    let zt = if target { logit } else { -logit };
    // ln(p_t) = −softplus(−z_t); ln(1−p_t) = −softplus(z_t)
    (-gamma * softplus(zt)).exp() * softplus(-zt)
}

/// d(focal term)/d(logit).
fn focal_term_dlogit(logit: f64, target: bool, gamma: f64) -> f64 {
    let zt = if target { logit } else { -logit };
    let pt = sigmoid(zt);
    let ln_pt = -softplus(-zt);
    let pow_g = (-gamma * softplus(zt)).exp(); // (1−p_t)^γ
    let pow_g1 = (-(gamma + 1.0) * softplus(zt)).exp(); // (1−p_t)^(γ+1)
    let sign = if target { 1.0 } else { -1.0 };
    sign * (gamma * pt * pow_g * ln_pt - pow_g1)
}

/// Value of the prototype refinement loss (shared by the tape op and the
/// plain-number path used for logging checks).
pub fn refinement_loss_value(
    feats: &Tensor,
    labels: &[usize],
    protos: &[Option<Vec<f64>>],
    margin: f64,
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if protos.get(y).is_none_or(|p| p.is_none()) {
            continue;
        }
        n += 1;
        let (cos_y, best_neg) = proto_cosines(feats.row(i), y, protos);
        total += 1.0 - cos_y;
        if let Some(cn) = best_neg {
            total += (margin + cn - cos_y).max(0.0);
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

fn refinement_loss_grad(
    feats: &Tensor,
    labels: &[usize],
    protos: &[Option<Vec<f64>>],
    margin: f64,
) -> Tensor {
    let d = feats.cols();
    let mut dx = Tensor::zeros(feats.rows(), d);
    let n = labels
        .iter()
        .filter(|&&y| protos.get(y).is_some_and(|p| p.is_some()))
        .count();
    if n == 0 {
        return dx;
    }
    for (i, &y) in labels.iter().enumerate() {
        let proto_y = match protos.get(y).and_then(|p| p.as_ref()) {
            Some(p) => p,
            None => continue,
        };
        let f = feats.row(i);
        let r = crate::tensor::sq_norm(f).sqrt().max(1e-12);
        let u: Vec<f64> = f.iter().map(|x| x / r).collect();
        let (cos_y, best_neg) = proto_cosines(f, y, protos);
        let mut neg_proto: Option<&Vec<f64>> = None;
        let mut hinge_active = false;
        if let Some(cn) = best_neg {
            if margin + cn - cos_y > 0.0 {
                hinge_active = true;
                // recover which negative achieved the max (first index on ties)
                let mut best = f64::NEG_INFINITY;
                for (c, p) in protos.iter().enumerate() {
                    if c == y {
                        continue;
                    }
                    if let Some(p) = p {
                        let cc = dot(&u, p);
                        if cc > best {
                            best = cc;
                            neg_proto = Some(p);
                        }
                    }
                }
            }
        }
        // d cos(f, μ)/df = (μ − cos·u)/r
        let coef_y = -(1.0 + if hinge_active { 1.0 } else { 0.0 });
        let row = dx.row_mut(i);
        for j in 0..d {
            row[j] += coef_y * (proto_y[j] - cos_y * u[j]) / r;
        }
        if let (true, Some(pn)) = (hinge_active, neg_proto) {
            let cn = best_neg.unwrap();
            for j in 0..d {
                row[j] += (pn[j] - cn * u[j]) / r;
            }
        }
        for v in dx.row_mut(i) {
            *v /= n as f64;
        }
    }
    dx
}

/// Cosine of a feature row against its own prototype and the best other-class
/// prototype (ties resolved toward the lowest class index).
fn proto_cosines(f: &[f64], y: usize, protos: &[Option<Vec<f64>>]) -> (f64, Option<f64>) {
    let r = crate::tensor::sq_norm(f).sqrt().max(1e-12);
    let u: Vec<f64> = f.iter().map(|x| x / r).collect();
    let cos_y = dot(&u, protos[y].as_ref().expect("own prototype must exist"));
    let mut best: Option<f64> = None;
    for (c, p) in protos.iter().enumerate() {
        if c == y {
            continue;
        }
        if let Some(p) = p {
            let cc = dot(&u, p);
            if best.is_none_or(|b| cc > b) {
                best = Some(cc);
            }
        }
    }
    (cos_y, best)
}
