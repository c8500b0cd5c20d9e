//! Model persistence: a `model.json` manifest plus one f32le tensor file
//! (with JSON sidecar) per named parameter group, mirroring the embedding
//! file convention. Memory banks serialize as per-class vector blocks.
//!
//! Layout of a checkpoint directory:
//!
//! ```text
//! dir/
//!   model.json            task tag, model config, shapes, memory metadata
//!   params/<name>.bin     row-major f32le values (+ .bin.json sidecar)
//!   memory/class_<c>.bin  stored vectors of class c, when non-empty
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::io::{load_embedding_file, write_embedding_file};
use crate::data::EmbeddingSequence;
use crate::emotion::{EmotionConfig, EmotionModel};
use crate::error::{Error, Result};
use crate::gesture::{GestureConfig, GestureModel};
use crate::memory::MemoryBank;
use crate::nn::Params;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MemoryMeta {
    n_classes: usize,
    dim: usize,
    /// Stored vectors per class; classes with zero entries have no file.
    lens: Vec<usize>,
    /// Lifetime insertion counters per class.
    counts: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
enum ModelMeta {
    Gesture {
        config: GestureConfig,
        params: BTreeMap<String, [usize; 2]>,
        memory: Option<MemoryMeta>,
    },
    Emotion {
        config: EmotionConfig,
        params: BTreeMap<String, [usize; 2]>,
    },
}

/// A checkpoint hydrated back into a model.
#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
pub enum LoadedModel {
    Gesture { model: GestureModel, bank: Option<MemoryBank> },
    Emotion { model: EmotionModel },
}

impl LoadedModel {
    pub fn task_name(&self) -> &'static str {
        match self {
            LoadedModel::Gesture { .. } => "gesture",
            LoadedModel::Emotion { .. } => "emotion",
        }
    }
}

fn meta_path(dir: &Path) -> PathBuf {
    dir.join("model.json")
}

fn param_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("params").join(format!("{name}.bin"))
}

fn class_path(dir: &Path, class: usize) -> PathBuf {
    dir.join("memory").join(format!("class_{class:03}.bin"))
}

fn tensor_to_block(t: &Tensor) -> Result<EmbeddingSequence> {
    let data: Vec<f32> = t.data().iter().map(|&v| v as f32).collect();
    EmbeddingSequence::new(t.rows(), t.cols(), data)
}

fn block_to_tensor(seq: &EmbeddingSequence) -> Tensor {
    Tensor::from_fn(seq.steps(), seq.dim(), |r, c| seq.step(r)[c] as f64)
}

fn write_params(dir: &Path, params: &Params) -> Result<BTreeMap<String, [usize; 2]>> {
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let mut shapes = BTreeMap::new();
    for (name, tensor) in params.iter() {
        let block = tensor_to_block(tensor)?;
        write_embedding_file(&param_path(dir, name), &block)?;
        shapes.insert(name.clone(), [tensor.rows(), tensor.cols()]);
    }
    Ok(shapes)
}

fn read_params(dir: &Path, shapes: &BTreeMap<String, [usize; 2]>) -> Result<Params> {
    let mut params = Params::new();
    for (name, &[rows, cols]) in shapes {
        let path = param_path(dir, name);
        let block = load_embedding_file(&path)?;
        if block.steps() != rows || block.dim() != cols {
            return Err(Error::Incompatible(format!(
                "parameter {name} file has shape [{}, {}], manifest says [{rows}, {cols}]",
                block.steps(),
                block.dim()
            )));
        }
        params.insert(name, block_to_tensor(&block));
    }
    Ok(params)
}

fn write_memory(dir: &Path, bank: &MemoryBank) -> Result<MemoryMeta> {
    let mdir = dir.join("memory");
    fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
    let mut lens = Vec::with_capacity(bank.n_classes());
    let mut counts = Vec::with_capacity(bank.n_classes());
    for c in 0..bank.n_classes() {
        let slots = bank.class_slots(c);
        lens.push(slots.len());
        counts.push(bank.insert_count(c));
        if slots.is_empty() {
            continue;
        }
        let mut data = Vec::with_capacity(slots.len() * bank.dim());
        for v in slots {
            data.extend(v.iter().map(|&x| x as f32));
        }
        let block = EmbeddingSequence::new(slots.len(), bank.dim(), data)?;
        write_embedding_file(&class_path(dir, c), &block)?;
    }
    Ok(MemoryMeta { n_classes: bank.n_classes(), dim: bank.dim(), lens, counts })
}

fn read_memory(dir: &Path, meta: &MemoryMeta, bank: &mut MemoryBank) -> Result<()> {
    if meta.n_classes != bank.n_classes() || meta.dim != bank.dim() {
        return Err(Error::Incompatible(format!(
            "stored memory is {} classes of dim {}, model needs {} of dim {}",
            meta.n_classes,
            meta.dim,
            bank.n_classes(),
            bank.dim()
        )));
    }
    if meta.lens.len() != meta.n_classes || meta.counts.len() != meta.n_classes {
        return Err(Error::Incompatible(
            "memory metadata arrays do not cover every class".into(),
        ));
    }
    for c in 0..meta.n_classes {
        if meta.lens[c] == 0 {
            bank.restore_class(c, Vec::new(), meta.counts[c])?;
            continue;
        }
        let block = load_embedding_file(&class_path(dir, c))?;
        if block.steps() != meta.lens[c] || block.dim() != meta.dim {
            return Err(Error::Incompatible(format!(
                "memory class {c} file has shape [{}, {}], metadata says [{}, {}]",
                block.steps(),
                block.dim(),
                meta.lens[c],
                meta.dim
            )));
        }
        let vectors: Vec<Vec<f64>> = (0..block.steps())
            .map(|r| block.step(r).iter().map(|&v| v as f64).collect())
            .collect();
        bank.restore_class(c, vectors, meta.counts[c])?;
    }
    Ok(())
}

fn write_meta(dir: &Path, meta: &ModelMeta) -> Result<()> {
    let path = meta_path(dir);
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::format(&path, format!("manifest encode failed: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Persist a gesture model (and its memory bank when it has one) to `dir`.
pub fn save_gesture(dir: &Path, model: &GestureModel, bank: Option<&MemoryBank>) -> Result<()> {
    if model.config().use_memory != bank.is_some() {
        return Err(Error::Config(
            "memory bank must be supplied exactly when the model enables memory".into(),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let shapes = write_params(dir, &model.params)?;
    let memory = bank.map(|b| write_memory(dir, b)).transpose()?;
    write_meta(dir, &ModelMeta::Gesture { config: *model.config(), params: shapes, memory })
}

/// Persist an emotion model to `dir`.
pub fn save_emotion(dir: &Path, model: &EmotionModel) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let shapes = write_params(dir, &model.params)?;
    write_meta(dir, &ModelMeta::Emotion { config: *model.config(), params: shapes })
}

/// Hydrate whichever model a checkpoint directory holds. Any disagreement
/// between manifest, sidecars, and model dimensions is an error.
pub fn load(dir: &Path) -> Result<LoadedModel> {
    let path = meta_path(dir);
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: ModelMeta = serde_json::from_str(&raw)
        .map_err(|e| Error::format(&path, format!("bad model manifest: {e}")))?;
    match meta {
        ModelMeta::Gesture { config, params, memory } => {
            if config.use_memory != memory.is_some() {
                return Err(Error::Incompatible(
                    "manifest memory section disagrees with the model config".into(),
                ));
            }
            let mut model = GestureModel::new(config, 0)?;
            model.params.load_from(read_params(dir, &params)?)?;
            let bank = match memory {
                Some(m) => {
                    let mut bank =
                        MemoryBank::new(config.n_classes, config.d_hidden, config.memory)?;
                    read_memory(dir, &m, &mut bank)?;
                    Some(bank)
                }
                None => None,
            };
            Ok(LoadedModel::Gesture { model, bank })
        }
        ModelMeta::Emotion { config, params } => {
            let mut model = EmotionModel::new(config, 0)?;
            model.params.load_from(read_params(dir, &params)?)?;
            Ok(LoadedModel::Emotion { model })
        }
    }
}
