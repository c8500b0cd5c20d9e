//! Command-line front end for the micromodal crates.
//!
//! Subcommands: `gen-synth` (write a synthetic embedding dataset),
//! `train` (fit a model, writing checkpoints and a JSON-lines log),
//! `eval` (score a checkpoint on a manifest), `grad-check` (compare
//! analytic gradients against central differences), and `inspect-memory`
//! (dump a gesture checkpoint's memory-bank statistics).
//!
//! All output is JSON or JSON-lines. Exit codes: 0 on success, 2 for
//! configuration or usage problems, 3 for runtime numeric failures
//! (non-finite losses, gradient checks over threshold).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;

use micromodal_core::checkpoint::{self, LoadedModel};
use micromodal_core::data::io::load_manifest;
use micromodal_core::data::synth::{
    centroid_oracle_accuracy, generate_synthetic_dataset, write_synthetic_dataset, SyntheticSpec,
};
use micromodal_core::data::{LoadedSample, ModalityTag};
use micromodal_core::emotion::{EmotionConfig, EmotionModel};
use micromodal_core::gesture::{GestureConfig, GestureModel};
use micromodal_core::gradcheck;
use micromodal_core::memory::MemoryBank;
use micromodal_core::train::{
    derive_seed, evaluate_emotion, evaluate_gesture, fit_emotion, fit_gesture, FitReport,
    TrainConfig,
};
use micromodal_core::{Error, Result};

#[derive(Parser)]
#[command(name = "micromodal", version, about = "Multimodal sequence classifiers", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic embedding dataset; prints the manifest path and
    /// the nearest-centroid oracle accuracy.
    GenSynth {
        /// JSON run configuration (needs `data.synthetic` and `output`).
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model; writes `train_log.jsonl` plus best/final checkpoints
    /// into the configured run directory.
    Train {
        /// JSON run configuration (needs `data`, `model`, and `output`).
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a manifest; prints {"metric", "n"}.
    Eval {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON-lines manifest of the evaluation samples.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Compare analytic gradients with central differences for one module,
    /// or for every module with `all`.
    GradCheck {
        /// Module name (`micromodal grad-check --help` lists them) or `all`.
        module: String,
        /// Central-difference step size.
        #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
        eps: f64,
    },
    /// Print a gesture checkpoint's per-class bank sizes, prototype norms,
    /// and insert counters as JSON.
    InspectMemory {
        /// Checkpoint directory of a memory-enabled gesture model.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::GenSynth { config } => cmd_gen_synth(&config),
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Eval { checkpoint, manifest, batch_size } => {
            cmd_eval(&checkpoint, &manifest, batch_size)
        }
        Cmd::GradCheck { module, eps } => cmd_grad_check(&module, eps),
        Cmd::InspectMemory { checkpoint } => cmd_inspect_memory(&checkpoint),
    }
}

// ---------------------------------------------------------------------------
// Run configuration file
// ---------------------------------------------------------------------------

/// The `--config` JSON document. Sections are optional so one file can serve
/// both `gen-synth` and `train`; each command checks for what it needs.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    #[serde(default)]
    data: Option<DataSection>,
    #[serde(default)]
    model: Option<ModelSection>,
    #[serde(default)]
    train: Option<TrainConfig>,
    output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    /// Generate data in-process instead of reading manifests.
    #[serde(default)]
    synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    train_manifest: Option<PathBuf>,
    #[serde(default)]
    val_manifest: Option<PathBuf>,
    /// Stratified holdout fraction applied to synthetic data; 0 disables
    /// the validation split.
    #[serde(default = "default_val_fraction")]
    val_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Debug, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
enum ModelSection {
    Gesture {
        #[serde(default)]
        config: GestureConfig,
        /// Parameter-initialization seed (independent of `train.seed`).
        #[serde(default)]
        init_seed: u64,
    },
    Emotion {
        #[serde(default)]
        config: EmotionConfig,
        #[serde(default)]
        init_seed: u64,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    run_dir: PathBuf,
}

impl RunConfigFile {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    fn data(&self) -> Result<&DataSection> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::Config("config has no `data` section".into()))
    }

    fn model(&self) -> Result<&ModelSection> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::Config("config has no `model` section".into()))
    }
}

impl DataSection {
    /// Reject contradictory sources and missing files before any compute.
    fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.train_manifest) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config(
                    "data section needs exactly one of `synthetic` or `train_manifest`".into(),
                ))
            }
            _ => {}
        }
        if self.val_manifest.is_some() && self.train_manifest.is_none() {
            return Err(Error::Config(
                "`val_manifest` is only meaningful together with `train_manifest`".into(),
            ));
        }
        for path in [&self.train_manifest, &self.val_manifest].into_iter().flatten() {
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "manifest not found: {}",
                    path.display()
                )));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if let Some(spec) = &self.synthetic {
            spec.validate()?;
        }
        Ok(())
    }

    /// Produce (train, val) sample sets. Synthetic data is split with a
    /// seeded stratified holdout; manifest data is used as provided.
    fn load(&self, n_classes: usize, seed: u64) -> Result<(Vec<LoadedSample>, Option<Vec<LoadedSample>>)> {
        self.validate()?;
        if let Some(spec) = &self.synthetic {
            if spec.n_classes != n_classes {
                return Err(Error::Config(format!(
                    "synthetic data has {} classes but the model expects {n_classes}",
                    spec.n_classes
                )));
            }
            let samples = generate_synthetic_dataset(spec)?;
            return Ok(stratified_split(samples, self.val_fraction, seed));
        }
        let train = load_manifest(self.train_manifest.as_ref().unwrap(), n_classes)?;
        let val = self
            .val_manifest
            .as_ref()
            .map(|vm| load_manifest(vm, n_classes))
            .transpose()?;
        Ok((train, val))
    }
}

/// Split off `frac` of each class (seeded shuffle, at least one training
/// sample kept per class). Returns `None` for the holdout when it is empty.
fn stratified_split(
    samples: Vec<LoadedSample>,
    frac: f64,
    seed: u64,
) -> (Vec<LoadedSample>, Option<Vec<LoadedSample>>) {
    if frac <= 0.0 {
        return (samples, None);
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut is_val = vec![false; samples.len()];
    for (class, mut idx) in by_class {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", class));
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * frac).round() as usize).min(idx.len().saturating_sub(1));
        for &i in idx.iter().take(n_val) {
            is_val[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.into_iter().enumerate() {
        if is_val[i] {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    if val.is_empty() {
        (train, None)
    } else {
        (train, Some(val))
    }
}

/// Check that every sample carries the streams the model consumes, at the
/// widths it expects, so mismatches fail with a data-level message instead
/// of a mid-batch shape error.
fn check_stream_dims(data: &[LoadedSample], wanted: &[(ModalityTag, usize)]) -> Result<()> {
    for s in data {
        for &(tag, dim) in wanted {
            match s.streams.get(&tag) {
                None => {
                    return Err(Error::Config(format!(
                        "sample {} has no {tag} stream",
                        s.id
                    )))
                }
                Some(seq) if seq.dim() != dim => {
                    return Err(Error::Config(format!(
                        "sample {}: {tag} stream is {}-dimensional, model expects {dim}",
                        s.id,
                        seq.dim()
                    )))
                }
                Some(_) => {}
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_synth(config_path: &Path) -> Result<ExitCode> {
    let cfg = RunConfigFile::load(config_path)?;
    let data = cfg.data()?;
    let spec = data.synthetic.as_ref().ok_or_else(|| {
        Error::Config("gen-synth needs a `data.synthetic` section".into())
    })?;
    spec.validate()?;
    let samples = generate_synthetic_dataset(spec)?;
    let oracle = centroid_oracle_accuracy(&samples)?;
    let manifest = write_synthetic_dataset(spec, &cfg.output.run_dir)?;
    println!(
        "{}",
        json!({
            "manifest": manifest,
            "n_samples": samples.len(),
            "oracle_accuracy": oracle,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(config_path: &Path) -> Result<ExitCode> {
    let cfg = RunConfigFile::load(config_path)?;
    let data = cfg.data()?;
    data.validate()?;
    let train_cfg = cfg.train.clone().unwrap_or_default();
    train_cfg.validate()?;
    let run_dir = &cfg.output.run_dir;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;

    let report = match cfg.model()? {
        ModelSection::Gesture { config, init_seed } => {
            config.validate()?;
            let (train_set, val_set) = data.load(config.n_classes, train_cfg.seed)?;
            let wanted = [(ModalityTag::Rgb, config.d_rgb), (ModalityTag::Pose, config.d_pose)];
            check_stream_dims(&train_set, &wanted)?;
            if let Some(v) = &val_set {
                check_stream_dims(v, &wanted)?;
            }
            let mut model = GestureModel::new(*config, *init_seed)?;
            let mut bank = if config.use_memory {
                Some(MemoryBank::new(config.n_classes, config.d_hidden, config.memory)?)
            } else {
                None
            };
            let report =
                fit_gesture(&mut model, bank.as_mut(), &train_set, val_set.as_deref(), &train_cfg)?;
            checkpoint::save_gesture(&run_dir.join("checkpoints/final"), &model, bank.as_ref())?;
            model.params = report.best_params.clone();
            checkpoint::save_gesture(&run_dir.join("checkpoints/best"), &model, bank.as_ref())?;
            report
        }
        ModelSection::Emotion { config, init_seed } => {
            config.validate()?;
            let (train_set, val_set) = data.load(2, train_cfg.seed)?;
            let wanted = [(ModalityTag::Ctx, config.d_ctx), (ModalityTag::Face, config.d_face)];
            check_stream_dims(&train_set, &wanted)?;
            if let Some(v) = &val_set {
                check_stream_dims(v, &wanted)?;
            }
            let mut model = EmotionModel::new(*config, *init_seed)?;
            let report = fit_emotion(&mut model, &train_set, val_set.as_deref(), &train_cfg)?;
            checkpoint::save_emotion(&run_dir.join("checkpoints/final"), &model)?;
            model.params = report.best_params.clone();
            checkpoint::save_emotion(&run_dir.join("checkpoints/best"), &model)?;
            report
        }
    };

    let log_path = write_train_log(run_dir, &report)?;
    println!(
        "{}",
        json!({
            "run_dir": run_dir,
            "log": log_path,
            "best_checkpoint": run_dir.join("checkpoints/best"),
            "final_checkpoint": run_dir.join("checkpoints/final"),
            "epochs_run": report.epochs.len(),
            "stopped_early": report.stopped_early,
            "best_epoch": report.best_epoch,
            "best_metric": report.best_metric,
        })
    );
    Ok(ExitCode::SUCCESS)
}

/// One JSON object per epoch, then a run trailer.
fn write_train_log(run_dir: &Path, report: &FitReport) -> Result<PathBuf> {
    let path = run_dir.join("train_log.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for rec in &report.epochs {
        let line =
            serde_json::to_string(rec).map_err(|e| Error::format(&path, e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    let trailer = json!({
        "stopped_early": report.stopped_early,
        "best_epoch": report.best_epoch,
    });
    writeln!(f, "{trailer}").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn cmd_eval(checkpoint_dir: &Path, manifest: &Path, batch_size: usize) -> Result<ExitCode> {
    let summary = match checkpoint::load(checkpoint_dir)? {
        LoadedModel::Gesture { model, bank } => {
            let n_classes = model.config().n_classes;
            let data = load_manifest(manifest, n_classes)?;
            check_stream_dims(
                &data,
                &[
                    (ModalityTag::Rgb, model.config().d_rgb),
                    (ModalityTag::Pose, model.config().d_pose),
                ],
            )?;
            evaluate_gesture(&model, bank.as_ref(), &data, batch_size, &vec![1.0; n_classes])?
        }
        LoadedModel::Emotion { model } => {
            let data = load_manifest(manifest, 2)?;
            check_stream_dims(
                &data,
                &[
                    (ModalityTag::Ctx, model.config().d_ctx),
                    (ModalityTag::Face, model.config().d_face),
                ],
            )?;
            evaluate_emotion(&model, &data, batch_size, 0.0, [1.0, 1.0])?
        }
    };
    println!("{}", json!({ "metric": summary.metric, "n": summary.n }));
    Ok(ExitCode::SUCCESS)
}

fn cmd_grad_check(module: &str, eps: f64) -> Result<ExitCode> {
    let names: Vec<&str> = if module == "all" {
        gradcheck::all_module_names().to_vec()
    } else {
        vec![module]
    };
    let mut all_passed = true;
    for name in names {
        let report = gradcheck::run_module(name, eps)?;
        all_passed &= report.passed();
        let groups: Vec<_> = report
            .groups
            .iter()
            .map(|(param, err)| json!({ "param": param, "max_rel_err": err }))
            .collect();
        println!(
            "{}",
            json!({
                "module": report.module,
                "groups": groups,
                "max_rel_err": report.max_rel_err,
                "passed": report.passed(),
            })
        );
    }
    if all_passed {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: gradient check exceeded the {} threshold", gradcheck::PASS_THRESHOLD);
        Ok(ExitCode::from(3))
    }
}

fn cmd_inspect_memory(checkpoint_dir: &Path) -> Result<ExitCode> {
    match checkpoint::load(checkpoint_dir)? {
        LoadedModel::Gesture { bank: Some(bank), .. } => {
            let classes: Vec<usize> = (0..bank.n_classes()).collect();
            let sizes: Vec<usize> = classes.iter().map(|&c| bank.class_len(c)).collect();
            let counts: Vec<u64> = classes.iter().map(|&c| bank.insert_count(c)).collect();
            println!(
                "{}",
                json!({
                    "class_sizes": sizes,
                    "prototype_norms": bank.prototype_norms(),
                    "insert_counts": counts,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        LoadedModel::Gesture { bank: None, .. } => Err(Error::Config(
            "checkpoint was trained without a memory bank".into(),
        )),
        LoadedModel::Emotion { .. } => Err(Error::Config(
            "emotion checkpoints carry no memory bank".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
