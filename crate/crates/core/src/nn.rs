//! Named parameters and the small set of layers shared by both models.
//!
//! Parameters live in a [`Params`] map keyed by dotted path
//! (`"enc_ctx.0.attn.wq.w"`). A forward pass binds each parameter it touches
//! onto the tape through [`Ctx::p`], and [`Ctx::grads_by_name`] routes the
//! gradients back to their names for the optimizer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Grads, NodeId};
use crate::tensor::Tensor;

/// Ordered name → tensor map holding every trainable value of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), t).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Replace the value of every parameter with the same-named tensor from
    /// `other`, requiring the name sets and shapes to match exactly.
    pub fn load_from(&mut self, other: Params) -> Result<()> {
        if self.map.len() != other.map.len() {
            return Err(Error::Incompatible(format!(
                "parameter count mismatch: expected {}, found {}",
                self.map.len(),
                other.map.len()
            )));
        }
        for (name, value) in other.map {
            let slot = self.map.get_mut(&name).ok_or_else(|| {
                Error::Incompatible(format!("unexpected parameter {name}"))
            })?;
            if slot.shape() != value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(())
    }
}

/// Ties a [`Graph`] to a [`Params`] map for one forward pass, remembering
/// which node each parameter was bound to.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    params: &'a Params,
    bound: BTreeMap<String, NodeId>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, params: &'a Params) -> Self {
        Ctx { g, params, bound: BTreeMap::new() }
    }

    /// Bind a named parameter onto the tape (memoized per name).
    pub fn p(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let id = self.g.leaf(self.params.get(name).clone());
        self.bound.insert(name.to_string(), id);
        id
    }

    /// Collect gradients for every bound parameter. Parameters that did not
    /// reach the loss get zero gradients of the right shape.
    pub fn grads_by_name(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .map(|(name, &id)| {
                let g = grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| {
                        let (r, c) = self.params.get(name).shape();
                        Tensor::zeros(r, c)
                    });
                (name.clone(), g)
            })
            .collect()
    }
}

/// Deterministic RNG for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Xavier/Glorot uniform init for a [fan_in, fan_out] matrix.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * limit)
}

/// Affine map y = xW + b with named parameters. `new_no_bias` drops b for
/// positions where a bias is provably inert (attention key projections: a
/// constant added to every key shifts each query's scores uniformly, which
/// softmax cancels, so such a bias can never receive gradient).
#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: Option<String>,
}

impl Linear {
    pub fn new(prefix: &str) -> Self {
        Linear {
            w: format!("{prefix}.w"),
            b: Some(format!("{prefix}.b")),
        }
    }

    pub fn new_no_bias(prefix: &str) -> Self {
        Linear {
            w: format!("{prefix}.w"),
            b: None,
        }
    }

    pub fn register(&self, params: &mut Params, rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) {
        params.insert(&self.w, xavier_uniform(rng, d_in, d_out));
        if let Some(b) = &self.b {
            params.insert(b, Tensor::zeros(1, d_out));
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: NodeId) -> NodeId {
        let w = cx.p(&self.w);
        let xw = cx.g.matmul(x, w);
        match &self.b {
            Some(b) => {
                let b = cx.p(b);
                cx.g.add_bias(xw, b)
            }
            None => xw,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.b.as_deref()
    }
}

/// Layer norm with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNormP {
    g: String,
    b: String,
}

impl LayerNormP {
    pub fn new(prefix: &str) -> Self {
        LayerNormP { g: format!("{prefix}.g"), b: format!("{prefix}.b") }
    }

    pub fn register(&self, params: &mut Params, d: usize) {
        params.insert(&self.g, Tensor::from_fn(1, d, |_, _| 1.0));
        params.insert(&self.b, Tensor::zeros(1, d));
    }

    pub fn forward(&self, cx: &mut Ctx, x: NodeId) -> NodeId {
        let g = cx.p(&self.g);
        let b = cx.p(&self.b);
        cx.g.layer_norm(x, g, b)
    }
}

/// Shape bookkeeping for a flattened sequence batch on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SeqShape {
    pub batch: usize,
    pub steps: usize,
}

/// Full multi-head attention block: q/k/v projections, scaled dot-product
/// attention with key masking, and an output projection.
#[derive(Clone, Debug)]
pub struct MhaBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MhaBlock {
    pub fn new(prefix: &str, heads: usize) -> Self {
        MhaBlock {
            wq: Linear::new(&format!("{prefix}.wq")),
            wk: Linear::new_no_bias(&format!("{prefix}.wk")),
            wv: Linear::new(&format!("{prefix}.wv")),
            wo: Linear::new(&format!("{prefix}.wo")),
            heads,
        }
    }

    pub fn register(&self, params: &mut Params, rng: &mut ChaCha8Rng, d: usize) {
        self.wq.register(params, rng, d, d);
        self.wk.register(params, rng, d, d);
        self.wv.register(params, rng, d, d);
        self.wo.register(params, rng, d, d);
    }

    /// Queries from `q_in`, keys/values from `kv_in` (pass the same node for
    /// self-attention). Both are flattened [batch*steps, d].
    pub fn forward(
        &self,
        cx: &mut Ctx,
        q_in: NodeId,
        kv_in: NodeId,
        q_shape: SeqShape,
        kv_steps: usize,
        key_mask: &[bool],
    ) -> NodeId {
        let q = self.wq.forward(cx, q_in);
        let k = self.wk.forward(cx, kv_in);
        let v = self.wv.forward(cx, kv_in);
        let att = cx.g.attention(
            q,
            k,
            v,
            q_shape.batch,
            q_shape.steps,
            kv_steps,
            self.heads,
            key_mask,
        );
        self.wo.forward(cx, att)
    }
}

/// Pre-norm transformer encoder layer:
/// x ← x + attn(ln1(x)); x ← x + ffn(ln2(x)) with a GELU hidden layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNormP,
    pub attn: MhaBlock,
    pub ln2: LayerNormP,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl EncoderLayer {
    pub fn new(prefix: &str, heads: usize) -> Self {
        EncoderLayer {
            ln1: LayerNormP::new(&format!("{prefix}.ln1")),
            attn: MhaBlock::new(&format!("{prefix}.attn"), heads),
            ln2: LayerNormP::new(&format!("{prefix}.ln2")),
            ff1: Linear::new(&format!("{prefix}.ff1")),
            ff2: Linear::new(&format!("{prefix}.ff2")),
        }
    }

    pub fn register(&self, params: &mut Params, rng: &mut ChaCha8Rng, d: usize, ffn_mult: usize) {
        self.ln1.register(params, d);
        self.attn.register(params, rng, d);
        self.ln2.register(params, d);
        self.ff1.register(params, rng, d, d * ffn_mult);
        self.ff2.register(params, rng, d * ffn_mult, d);
    }

    pub fn forward(&self, cx: &mut Ctx, x: NodeId, shape: SeqShape, mask: &[bool]) -> NodeId {
        let h = self.ln1.forward(cx, x);
        let a = self.attn.forward(cx, h, h, shape, shape.steps, mask);
        let x1 = cx.g.add(x, a);
        let h2 = self.ln2.forward(cx, x1);
        let f1 = self.ff1.forward(cx, h2);
        let f1 = cx.g.gelu(f1);
        let f2 = self.ff2.forward(cx, f1);
        cx.g.add(x1, f2)
    }
}

/// Classic sinusoidal position table for `steps` positions of width `d`,
/// tiled over a batch: row b*steps + t holds the encoding of position t.
pub fn sinusoidal_positions(batch: usize, steps: usize, d: usize) -> Tensor {
    Tensor::from_fn(batch * steps, d, |row, j| {
        let t = (row % steps) as f64;
        let pair = (j / 2) as f64;
        let freq = 1.0 / 10_000f64.powf(2.0 * pair / d as f64);
        if j % 2 == 0 {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

/// Expand a per-step validity mask into a [batch*steps, d] tensor of 0/1
/// factors, used to zero padded rows.
pub fn mask_factors(mask: &[bool], d: usize) -> Tensor {
    Tensor::from_fn(mask.len(), d, |i, _| if mask[i] { 1.0 } else { 0.0 })
}

/// Inverted-dropout factor tensor: entries are 0 with probability `p`, else
/// 1/(1−p), so the expected value of the masked activations is unchanged.
pub fn dropout_factors(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Tensor {
    assert!((0.0..1.0).contains(&p), "dropout probability must be in [0,1)");
    if p == 0.0 {
        return Tensor::from_fn(rows, cols, |_, _| 1.0);
    }
    let keep = 1.0 - p;
    Tensor::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            1.0 / keep
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_roundtrip_load_checks_names_and_shapes() {
        let mut a = Params::new();
        a.insert("x", Tensor::zeros(2, 3));
        a.insert("y", Tensor::zeros(1, 1));
        let mut b = Params::new();
        b.insert("x", Tensor::from_fn(2, 3, |i, j| (i + j) as f64));
        b.insert("y", Tensor::from_vec(1, 1, vec![7.0]));
        a.load_from(b.clone()).unwrap();
        assert_eq!(a.get("y").get(0, 0), 7.0);

        let mut wrong = Params::new();
        wrong.insert("x", Tensor::zeros(3, 2));
        wrong.insert("y", Tensor::zeros(1, 1));
        assert!(a.load_from(wrong).is_err(), "shape mismatch must be rejected");

        let mut missing = Params::new();
        missing.insert("x", Tensor::zeros(2, 3));
        assert!(a.load_from(missing).is_err(), "missing name must be rejected");
    }

    #[test]
    fn xavier_uniform_respects_its_limit() {
        let mut rng = init_rng(1);
        let t = xavier_uniform(&mut rng, 64, 64);
        let limit = (6.0 / 128.0f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= limit));
        // not all identical
        assert!(t.data().iter().any(|&v| v != t.get(0, 0)));
    }

    #[test]
    fn sinusoidal_positions_start_at_zero_phase() {
        let pe = sinusoidal_positions(2, 3, 4);
        // position 0: sin(0)=0, cos(0)=1 across all frequencies
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        // the table repeats per batch element
        assert_eq!(pe.row(0), pe.row(3));
        assert_eq!(pe.row(1), pe.row(4));
        // position 1, pair 0: sin(1), cos(1)
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(1, 1) - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn dropout_factors_are_zero_or_inverse_keep() {
        let mut rng = init_rng(2);
        let f = dropout_factors(&mut rng, 20, 20, 0.5);
        for &v in f.data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-15);
        }
        let zeros = f.data().iter().filter(|&&v| v == 0.0).count();
        // 400 Bernoulli(0.5) draws: expect roughly half zeros
        assert!((100..300).contains(&zeros), "implausible dropout mask: {zeros} zeros");
    }

    #[test]
    fn encoder_layer_forward_keeps_shape() {
        let mut params = Params::new();
        let mut rng = init_rng(3);
        let layer = EncoderLayer::new("enc.0", 2);
        layer.register(&mut params, &mut rng, 8, 4);
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &params);
        let x = cx.g.leaf(Tensor::from_fn(6, 8, |i, j| ((i * 8 + j) as f64 * 0.1).sin()));
        let mask = vec![true, true, false, true, true, true];
        let y = layer.forward(&mut cx, x, SeqShape { batch: 2, steps: 3 }, &mask);
        assert_eq!(cx.g.value(y).shape(), (6, 8));
        assert!(cx.g.value(y).is_finite());
    }
}
