//! Synthetic dataset generator with a closed-form sanity oracle.
//!
//! Each class owns, per modality, a private unit direction plus the embedding
//! of a class signal shared across modalities. A sample tiles those
//! directions over its steps with jittered non-negative amplitudes — the
//! shared component's amplitude is drawn once per step and reused by every
//! modality, which is what couples the streams — and adds isotropic noise:
//!
//! `x[m,t] = g_t·(√ρ·b_t·v[c,m] + √(1−ρ)·a[m,t]·u[c,m]) + noise·ε/√D`
//!
//! `g_t ∈ {0, 1}` is a per-step activity gate shared across modalities
//! (`active_fraction` = probability of 1, default 1 = every step active).
//! Small fractions mimic brief events inside longer sequences: most steps
//! are pure noise and only the gated steps carry the class signal.
//!
//! With `rho = 1` and `noise = 0` every step lies on its class direction, so
//! a nearest-centroid classifier over mean-pooled features is exact — that
//! oracle is exposed here and reported by the CLI generator.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::io::{write_embedding_file, write_manifest, ManifestEntry};
use super::{EmbeddingSequence, LoadedSample, ModalityTag};
use crate::error::{Error, Result};
use crate::tensor::{cosine, normalize};

fn default_jitter() -> f64 {
    0.1
}

fn default_active_fraction() -> f64 {
    1.0
}

/// Recipe for one synthetic dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_samples: usize,
    pub t_min: usize,
    pub t_max: usize,
    /// Modality tag → embedding width.
    pub streams: BTreeMap<ModalityTag, usize>,
    /// Cross-modal coupling in [0,1]: 0 = independent class signals per
    /// modality, 1 = fully shared signal.
    pub rho: f64,
    /// Expected norm of the additive noise per step.
    pub noise: f64,
    /// Relative spread of the per-step signal amplitudes.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Probability that a step carries the class signal at all (the gate is
    /// shared across modalities). 1 = every step active; small values bury
    /// a few informative steps among pure-noise ones. At least one step per
    /// sample is always kept active.
    #[serde(default = "default_active_fraction")]
    pub active_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return Err(Error::Config(format!(
                "length range [{}, {}] is invalid",
                self.t_min, self.t_max
            )));
        }
        if self.streams.is_empty() {
            return Err(Error::Config("at least one stream is required".into()));
        }
        if self.streams.values().any(|&d| d == 0) {
            return Err(Error::Config("stream dims must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} must lie in [0,1]", self.rho)));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise {} must be non-negative", self.noise)));
        }
        if self.jitter < 0.0 || !self.jitter.is_finite() {
            return Err(Error::Config(format!("jitter {} must be non-negative", self.jitter)));
        }
        if !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "active_fraction {} must lie in (0, 1]",
                self.active_fraction
            )));
        }
        Ok(())
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    while normalize(&mut v) == 0.0 {
        // astronomically unlikely; redraw rather than divide by zero
        v = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    }
    v
}

/// Generate the dataset in memory. Labels cycle round-robin over classes so
/// every class is populated whenever `n_samples ≥ n_classes`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<LoadedSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // per-class directions, drawn in a fixed order
    let mut shared: Vec<BTreeMap<ModalityTag, Vec<f64>>> = Vec::new();
    let mut private: Vec<BTreeMap<ModalityTag, Vec<f64>>> = Vec::new();
    for _ in 0..spec.n_classes {
        let mut vs = BTreeMap::new();
        let mut us = BTreeMap::new();
        for (&tag, &d) in &spec.streams {
            vs.insert(tag, unit_direction(&mut rng, d));
            us.insert(tag, unit_direction(&mut rng, d));
        }
        shared.push(vs);
        private.push(us);
    }
    let w_shared = spec.rho.sqrt();
    let w_priv = (1.0 - spec.rho).sqrt();
    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let label = i % spec.n_classes;
        let t = rng.random_range(spec.t_min..=spec.t_max);
        let shared_amp: Vec<f64> = (0..t)
            .map(|_| (1.0 + spec.jitter * rng.sample::<f64, _>(StandardNormal)).max(0.0))
            .collect();
        // Per-step activity gates, shared across modalities so that the
        // same steps are informative in both. The RNG is only touched when
        // the feature is on, preserving streams generated before it existed.
        let gates: Vec<f64> = if spec.active_fraction < 1.0 {
            let mut g: Vec<f64> = (0..t)
                .map(|_| f64::from(rng.random::<f64>() < spec.active_fraction))
                .collect();
            if !g.iter().any(|&x| x > 0.0) {
                g[rng.random_range(0..t)] = 1.0;
            }
            g
        } else {
            vec![1.0; t]
        };
        let mut streams = BTreeMap::new();
        for (&tag, &d) in &spec.streams {
            let v = &shared[label][&tag];
            let u = &private[label][&tag];
            let noise_el = spec.noise / (d as f64).sqrt();
            let mut data = Vec::with_capacity(t * d);
            for (&b, &gate) in shared_amp.iter().zip(&gates) {
                let a =
                    (1.0 + spec.jitter * rng.sample::<f64, _>(StandardNormal)).max(0.0);
                for j in 0..d {
                    let eps: f64 = rng.sample(StandardNormal);
                    let x = gate * (w_shared * b * v[j] + w_priv * a * u[j]) + noise_el * eps;
                    data.push(x as f32);
                }
            }
            streams.insert(tag, EmbeddingSequence::new(t, d, data)?);
        }
        samples.push(LoadedSample::new(format!("s{i:05}"), label, streams)?);
    }
    Ok(samples)
}

/// Generate and write a dataset under `dir`; returns the manifest path.
pub fn write_synthetic_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    let samples = generate_synthetic_dataset(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in &samples {
        let mut streams = BTreeMap::new();
        for (tag, seq) in &s.streams {
            let rel = format!("{}_{tag}.bin", s.id);
            write_embedding_file(&dir.join(&rel), seq)?;
            streams.insert(*tag, rel);
        }
        entries.push(ManifestEntry {
            id: s.id.clone(),
            label: s.label as u32,
            len: s.len(),
            streams,
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Mean-pooled concatenated features per sample.
fn pooled_features(samples: &[LoadedSample]) -> Vec<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let mut feat = Vec::new();
            for seq in s.streams.values() {
                let t = seq.steps();
                for j in 0..seq.dim() {
                    let mut acc = 0.0;
                    for step in 0..t {
                        acc += seq.step(step)[j] as f64;
                    }
                    feat.push(acc / t as f64);
                }
            }
            feat
        })
        .collect()
}

/// Accuracy of a nearest-class-centroid classifier (cosine similarity over
/// mean-pooled concatenated streams), fit and scored on the same samples.
pub fn centroid_oracle_accuracy(samples: &[LoadedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("oracle needs at least one sample".into()));
    }
    let n_classes = samples.iter().map(|s| s.label).max().unwrap() + 1;
    let feats = pooled_features(samples);
    let d = feats[0].len();
    let mut centroids = vec![vec![0.0f64; d]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (s, f) in samples.iter().zip(&feats) {
        counts[s.label] += 1;
        for (c, x) in centroids[s.label].iter_mut().zip(f) {
            *c += x;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n > 0 {
            for x in c.iter_mut() {
                *x /= n as f64;
            }
        }
    }
    let mut hits = 0usize;
    for (s, f) in samples.iter().zip(&feats) {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (c, centroid) in centroids.iter().enumerate() {
            if counts[c] == 0 {
                continue;
            }
            let sim = cosine(f, centroid);
            if sim > best.0 {
                best = (sim, c);
            }
        }
        if best.1 == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}
