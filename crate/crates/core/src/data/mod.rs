//! Sample model: embedding sequences, manifests, and batch assembly.
//!
//! A sample is a labeled bundle of per-modality embedding sequences that all
//! share the same step count. Batches are right-padded to the longest sample
//! with an explicit validity mask; padded positions hold exactly 0.0 and are
//! excluded from attention and pooling downstream.

pub mod io;
pub mod sampling;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which modality a stream carries. Gesture samples use `rgb` + `pose`,
/// emotion samples use `ctx` + `face`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityTag {
    Rgb,
    Pose,
    Ctx,
    Face,
}

impl fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModalityTag::Rgb => "rgb",
            ModalityTag::Pose => "pose",
            ModalityTag::Ctx => "ctx",
            ModalityTag::Face => "face",
        };
        f.write_str(s)
    }
}

impl FromStr for ModalityTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(ModalityTag::Rgb),
            "pose" => Ok(ModalityTag::Pose),
            "ctx" => Ok(ModalityTag::Ctx),
            "face" => Ok(ModalityTag::Face),
            other => Err(Error::Config(format!("unknown modality tag {other:?}"))),
        }
    }
}

/// One stream of per-step embeddings, stored as the file stores them (f32).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    steps: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingSequence {
    /// Row-major [steps, dim] data; every value must be finite.
    pub fn new(steps: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if steps == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "embedding sequence needs positive shape, got [{steps}, {dim}]"
            )));
        }
        if data.len() != steps * dim {
            return Err(Error::Shape(format!(
                "embedding data holds {} values, expected {steps}*{dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "embedding value at flat index {pos}"
            )));
        }
        Ok(EmbeddingSequence { steps, dim, data })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn step(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// A hydrated sample: label index plus one embedding sequence per modality,
/// all with identical step counts.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub label: usize,
    pub streams: BTreeMap<ModalityTag, EmbeddingSequence>,
}

impl LoadedSample {
    pub fn new(
        id: impl Into<String>,
        label: usize,
        streams: BTreeMap<ModalityTag, EmbeddingSequence>,
    ) -> Result<Self> {
        if streams.is_empty() {
            return Err(Error::Config("sample needs at least one stream".into()));
        }
        let mut steps = None;
        for (tag, seq) in &streams {
            match steps {
                None => steps = Some(seq.steps()),
                Some(s) if s != seq.steps() => {
                    return Err(Error::Shape(format!(
                        "stream {tag} has {} steps, expected {s}",
                        seq.steps()
                    )))
                }
                _ => {}
            }
        }
        Ok(LoadedSample { id: id.into(), label, streams })
    }

    pub fn len(&self) -> usize {
        self.streams.values().next().map(|s| s.steps()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Map a raw manifest label to an internal class index. The gesture corpus
/// uses 99 as its final catch-all class, which lands on index 31.
pub fn map_raw_label(raw: u32, n_classes: usize) -> Result<usize> {
    let idx = if raw == 99 { 31 } else { raw as usize };
    if idx >= n_classes {
        return Err(Error::Config(format!(
            "label {raw} maps to index {idx}, out of range for {n_classes} classes"
        )));
    }
    Ok(idx)
}

/// A right-padded batch: per-modality [batch*steps, dim] tensors (row
/// `b*steps + t`), a shared validity mask, and per-sample labels/lengths.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    pub streams: BTreeMap<ModalityTag, Tensor>,
    pub mask: Vec<bool>,
    pub labels: Vec<usize>,
    pub lens: Vec<usize>,
    pub batch: usize,
    pub steps: usize,
}

impl PaddedBatch {
    pub fn stream(&self, tag: ModalityTag) -> Result<&Tensor> {
        self.streams
            .get(&tag)
            .ok_or_else(|| Error::Config(format!("batch has no {tag} stream")))
    }
}

/// Assemble samples into a [`PaddedBatch`]. All samples must carry the same
/// modality set with matching dims; padded positions are exactly 0.0.
pub fn pad_and_mask_batch(samples: &[&LoadedSample]) -> Result<PaddedBatch> {
    if samples.is_empty() {
        return Err(Error::Config("cannot batch zero samples".into()));
    }
    let tags: Vec<ModalityTag> = samples[0].streams.keys().copied().collect();
    for s in samples {
        let stags: Vec<ModalityTag> = s.streams.keys().copied().collect();
        if stags != tags {
            return Err(Error::Shape(format!(
                "sample {} has streams {stags:?}, expected {tags:?}",
                s.id
            )));
        }
    }
    let steps = samples.iter().map(|s| s.len()).max().unwrap();
    let batch = samples.len();
    let mut streams = BTreeMap::new();
    for &tag in &tags {
        let dim = samples[0].streams[&tag].dim();
        let mut t = Tensor::zeros(batch * steps, dim);
        for (b, s) in samples.iter().enumerate() {
            let seq = &s.streams[&tag];
            if seq.dim() != dim {
                return Err(Error::Shape(format!(
                    "sample {} stream {tag} has dim {}, expected {dim}",
                    s.id,
                    seq.dim()
                )));
            }
            for step in 0..seq.steps() {
                let row = t.row_mut(b * steps + step);
                for (dst, &src) in row.iter_mut().zip(seq.step(step)) {
                    *dst = src as f64;
                }
            }
        }
        streams.insert(tag, t);
    }
    let mut mask = vec![false; batch * steps];
    let mut lens = Vec::with_capacity(batch);
    for (b, s) in samples.iter().enumerate() {
        lens.push(s.len());
        for t in 0..s.len() {
            mask[b * steps + t] = true;
        }
    }
    Ok(PaddedBatch {
        streams,
        mask,
        labels: samples.iter().map(|s| s.label).collect(),
        lens,
        batch,
        steps,
    })
}
