//! On-disk formats: raw little-endian f32 embedding files with JSON sidecars,
//! and JSON-lines manifests tying streams to samples.
//!
//! An embedding file `x.bin` holds `steps*dim` f32 values, row-major, little
//! endian; its sidecar `x.bin.json` declares `{"dtype":"f32le","shape":[T,D]}`.
//! A manifest line looks like
//! `{"id":"s0","label":3,"len":17,"streams":{"rgb":"s0_rgb.bin",...}}`
//! with stream paths resolved relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{map_raw_label, EmbeddingSequence, LoadedSample, ModalityTag};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dtype: String,
    shape: [usize; 2],
}

fn sidecar_path(data_path: &Path) -> PathBuf {
    let mut os = data_path.as_os_str().to_os_string();
    os.push(".json");
    PathBuf::from(os)
}

/// Write `seq` as raw f32le plus its JSON sidecar.
pub fn write_embedding_file(path: &Path, seq: &EmbeddingSequence) -> Result<()> {
    let mut bytes = Vec::with_capacity(seq.data().len() * 4);
    for v in seq.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let side = Sidecar { dtype: "f32le".into(), shape: [seq.steps(), seq.dim()] };
    let sp = sidecar_path(path);
    let json = serde_json::to_string(&side)
        .map_err(|e| Error::format(&sp, format!("sidecar encode failed: {e}")))?;
    fs::write(&sp, json).map_err(|e| Error::io(&sp, e))?;
    Ok(())
}

/// Load an embedding file, validating dtype, byte length against the sidecar
/// shape, and finiteness of every value.
pub fn load_embedding_file(path: &Path) -> Result<EmbeddingSequence> {
    let sp = sidecar_path(path);
    let side_raw = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: Sidecar = serde_json::from_str(&side_raw)
        .map_err(|e| Error::format(&sp, format!("bad sidecar: {e}")))?;
    if side.dtype != "f32le" {
        return Err(Error::format(&sp, format!("unsupported dtype {:?}", side.dtype)));
    }
    let [steps, dim] = side.shape;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expect = steps * dim * 4;
    if bytes.len() != expect {
        return Err(Error::format(
            path,
            format!("file holds {} bytes, sidecar shape needs {expect}", bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    EmbeddingSequence::new(steps, dim, data).map_err(|e| match e {
        Error::NonFinite(what) => Error::format(path, format!("non-finite value: {what}")),
        other => other,
    })
}

/// One manifest line as written to disk.
#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: u32,
    pub len: usize,
    pub streams: BTreeMap<ModalityTag, String>,
}

/// Append-style manifest writer (one JSON object per line).
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e)
            .map_err(|err| Error::format(path, format!("manifest encode failed: {err}")))?;
        writeln!(f, "{line}").map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

/// Load a manifest and hydrate every sample it references. Labels are mapped
/// to internal indices against `n_classes`; stream paths resolve relative to
/// the manifest's directory; each stream's step count must equal the entry's
/// declared `len`.
pub fn load_manifest(path: &Path, n_classes: usize) -> Result<Vec<LoadedSample>> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            Error::format(path, format!("line {}: {e}", lineno + 1))
        })?;
        let label = map_raw_label(entry.label, n_classes)?;
        let mut streams = BTreeMap::new();
        for (tag, rel) in &entry.streams {
            let sp = base.join(rel);
            let seq = load_embedding_file(&sp)?;
            if seq.steps() != entry.len {
                return Err(Error::Shape(format!(
                    "sample {}: stream {tag} has {} steps, manifest declares {}",
                    entry.id,
                    seq.steps(),
                    entry.len
                )));
            }
            streams.insert(*tag, seq);
        }
        samples.push(LoadedSample::new(entry.id, label, streams)?);
    }
    if samples.is_empty() {
        return Err(Error::Format { path: path.into(), reason: "manifest is empty".into() });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embedding_roundtrip_preserves_exact_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..1000).map(|_| (rng.random::<f32>() - 0.5) * 100.0).collect();
        let seq = EmbeddingSequence::new(100, 10, data.clone()).unwrap();
        let p = dir.path().join("x.bin");
        write_embedding_file(&p, &seq).unwrap();
        let back = load_embedding_file(&p).unwrap();
        assert_eq!(back.steps(), 100);
        assert_eq!(back.dim(), 10);
        for (a, b) in data.iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "roundtrip must be bit-exact");
        }
    }

    #[test]
    fn missing_sidecar_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("naked.bin");
        fs::write(&p, [0u8; 8]).unwrap();
        assert!(load_embedding_file(&p).is_err());
    }

    #[test]
    fn truncated_data_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let seq = EmbeddingSequence::new(2, 2, vec![1.0; 4]).unwrap();
        let p = dir.path().join("x.bin");
        write_embedding_file(&p, &seq).unwrap();
        fs::write(&p, [0u8; 12]).unwrap(); // 3 floats, sidecar says 4
        let err = load_embedding_file(&p);
        assert!(matches!(err, Err(Error::Format { .. })));
    }

    #[test]
    fn wrong_dtype_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let seq = EmbeddingSequence::new(1, 2, vec![1.0, 2.0]).unwrap();
        let p = dir.path().join("x.bin");
        write_embedding_file(&p, &seq).unwrap();
        fs::write(p.with_extension("bin.json"), r#"{"dtype":"f64le","shape":[1,2]}"#).unwrap();
        assert!(load_embedding_file(&p).is_err());
    }

    #[test]
    fn non_finite_payload_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let mut bytes = 1.0f32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        fs::write(sidecar_path(&p), r#"{"dtype":"f32le","shape":[1,2]}"#).unwrap();
        assert!(load_embedding_file(&p).is_err());
    }

    #[test]
    fn manifest_roundtrip_hydrates_samples_with_mapped_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = Vec::new();
        for raw in [2u32, 99] {
            let id = format!("s{raw}");
            let steps = 3;
            let seq = EmbeddingSequence::new(steps, 4, vec![raw as f32; steps * 4]).unwrap();
            let rel = format!("{id}_rgb.bin");
            write_embedding_file(&dir.path().join(&rel), &seq).unwrap();
            let mut streams = BTreeMap::new();
            streams.insert(ModalityTag::Rgb, rel);
            entries.push(ManifestEntry { id, label: raw, len: steps, streams });
        }
        let mp = dir.path().join("manifest.jsonl");
        write_manifest(&mp, &entries).unwrap();
        let samples = load_manifest(&mp, 32).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].label, 2);
        assert_eq!(samples[1].label, 31, "raw label 99 must land on the last class");
    }

    #[test]
    fn manifest_len_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let seq = EmbeddingSequence::new(3, 2, vec![0.5; 6]).unwrap();
        write_embedding_file(&dir.path().join("a.bin"), &seq).unwrap();
        let mut streams = BTreeMap::new();
        streams.insert(ModalityTag::Rgb, "a.bin".to_string());
        let entries =
            vec![ManifestEntry { id: "a".into(), label: 0, len: 4, streams }];
        let mp = dir.path().join("m.jsonl");
        write_manifest(&mp, &entries).unwrap();
        assert!(load_manifest(&mp, 8).is_err());
    }

    #[test]
    fn manifest_referencing_missing_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut streams = BTreeMap::new();
        streams.insert(ModalityTag::Rgb, "ghost.bin".to_string());
        let entries =
            vec![ManifestEntry { id: "a".into(), label: 0, len: 2, streams }];
        let mp = dir.path().join("m.jsonl");
        write_manifest(&mp, &entries).unwrap();
        assert!(load_manifest(&mp, 8).is_err());
    }
}
