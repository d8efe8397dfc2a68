//! On-disk artifacts: atomic writes, model checkpoints and soft prompts.
//!
//! Both binary formats are `MAGIC | u64 LE header length | JSON header |
//! f64 LE blob`, with a SHA-256 of the blob recorded in the header.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SoftPrompt, TransformerLM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MODEL_MAGIC: &[u8; 8] = b"MIAWLM01";
const PROMPT_MAGIC: &[u8; 8] = b"MIAWSP01";

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    config: ModelConfig,
    params: Vec<Entry>,
    blob_sha256: String,
}

fn frame(magic: &[u8; 8], header: &impl Serialize, blob: &[u8]) -> Result<Vec<u8>> {
    let h = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + h.len() + blob.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(blob);
    Ok(out)
}

fn unframe<'a>(path: &Path, magic: &[u8; 8], bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8])> {
    let corrupt = |reason: &str| Error::CorruptArtifact {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(corrupt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + hlen {
        return Err(corrupt("truncated header"));
    }
    Ok((&bytes[16..16 + hlen], &bytes[16 + hlen..]))
}

fn encode_f64<S: Scalar>(values: impl Iterator<Item = S>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
}

fn decode_f64<S: Scalar>(blob: &[u8]) -> Vec<S> {
    blob.chunks_exact(8)
        .map(|c| S::c(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect()
}

fn check_blob(path: &Path, blob: &[u8], sha: &str, expected_values: usize) -> Result<()> {
    let corrupt = |reason: String| Error::CorruptArtifact {
        path: path.to_path_buf(),
        reason,
    };
    if blob.len() != expected_values * 8 {
        return Err(corrupt(format!(
            "blob holds {} bytes, manifest needs {}",
            blob.len(),
            expected_values * 8
        )));
    }
    if sha256_hex(blob) != sha {
        return Err(corrupt("blob checksum mismatch".into()));
    }
    Ok(())
}

pub fn model_to_bytes<S: Scalar>(model: &TransformerLM<S>) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut params = Vec::new();
    let mut offset = 0;
    for (name, t) in model.named_params() {
        params.push(Entry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        encode_f64(t.values().iter().copied(), &mut blob);
    }
    let header = ModelHeader {
        config: model.config().clone(),
        params,
        blob_sha256: sha256_hex(&blob),
    };
    frame(MODEL_MAGIC, &header, &blob)
}

pub fn model_from_bytes<S: Scalar>(path: &Path, bytes: &[u8]) -> Result<TransformerLM<S>> {
    let (h, blob) = unframe(path, MODEL_MAGIC, bytes)?;
    let header: ModelHeader = serde_json::from_slice(h).map_err(|e| Error::CorruptArtifact {
        path: path.to_path_buf(),
        reason: format!("header: {e}"),
    })?;
    let mut model = TransformerLM::<S>::new(header.config)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    check_blob(path, blob, &header.blob_sha256, total)?;
    let values = decode_f64::<S>(blob);
    let mut tensors = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&header.params) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::CorruptArtifact {
                path: path.to_path_buf(),
                reason: format!("manifest entry {} {:?} does not match {name}", entry.name, entry.shape),
            });
        }
        let n: usize = shape.iter().product();
        let slice = values
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| Error::CorruptArtifact {
                path: path.to_path_buf(),
                reason: format!("offset of {name} out of range"),
            })?;
        tensors.push(Tensor::parameter(shape.clone(), slice.to_vec())?);
    }
    if header.params.len() != expected.len() {
        return Err(Error::CorruptArtifact {
            path: path.to_path_buf(),
            reason: "parameter count mismatch".into(),
        });
    }
    model.replace_params(tensors)?;
    Ok(model)
}

pub fn save_model<S: Scalar>(model: &TransformerLM<S>, path: &Path) -> Result<()> {
    write_atomic(path, &model_to_bytes(model)?)
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<TransformerLM<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(path, &bytes)
}

/// Identity of the model a soft prompt was tuned against.
pub fn config_hash(config: &ModelConfig) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptManifest {
    pub mode: String,
    pub n_p: usize,
    pub d_model: usize,
    pub model_config_hash: String,
    pub seed: u64,
    pub blob_sha256: String,
}

pub fn save_prompt<S: Scalar>(
    prompt: &SoftPrompt<S>,
    mode: &str,
    model: &ModelConfig,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let mut blob = Vec::new();
    encode_f64(prompt.values().iter().copied(), &mut blob);
    let manifest = PromptManifest {
        mode: mode.into(),
        n_p: prompt.len(),
        d_model: prompt.d_model(),
        model_config_hash: config_hash(model),
        seed,
        blob_sha256: sha256_hex(&blob),
    };
    write_atomic(path, &frame(PROMPT_MAGIC, &manifest, &blob)?)
}

/// Loads a soft prompt and checks it was tuned for a model with `model`'s config.
pub fn load_prompt<S: Scalar>(
    path: &Path,
    model: &ModelConfig,
) -> Result<(SoftPrompt<S>, PromptManifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, blob) = unframe(path, PROMPT_MAGIC, &bytes)?;
    let m: PromptManifest = serde_json::from_slice(h).map_err(|e| Error::CorruptArtifact {
        path: path.to_path_buf(),
        reason: format!("manifest: {e}"),
    })?;
    check_blob(path, blob, &m.blob_sha256, m.n_p * m.d_model)?;
    if m.model_config_hash != config_hash(model) || m.d_model != model.d_model {
        return Err(Error::Invalid(format!(
            "soft prompt {} was tuned for a different model",
            path.display()
        )));
    }
    let prompt = SoftPrompt::from_values(m.n_p, m.d_model, decode_f64(blob))?;
    Ok((prompt, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::trace;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
            context_length: 32,
            seed: 5,
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = TransformerLM::<f64>::new(cfg()).unwrap();
        save_model(&m, &p).unwrap();
        let back: TransformerLM<f64> = load_model(&p).unwrap();
        assert_eq!(m, back);
        assert_eq!(trace(&m, None, b"hi").unwrap(), trace(&back, None, b"hi").unwrap());
    }

    #[test]
    fn corrupted_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = TransformerLM::<f64>::new(cfg()).unwrap();
        let mut bytes = model_to_bytes(&m).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&p, &bytes).unwrap();
        let err = load_model::<f64>(&p).unwrap_err();
        assert_eq!(err.class(), "corrupt_artifact");
        let missing = load_model::<f64>(&dir.path().join("nope")).unwrap_err();
        assert_eq!(missing.class(), "missing_artifact");
    }

    #[test]
    fn prompt_roundtrip_and_model_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.bin");
        let sp = SoftPrompt::<f64>::init(3, 8, 2);
        save_prompt(&sp, "unaligned", &cfg(), 2, &p).unwrap();
        let (back, man) = load_prompt::<f64>(&p, &cfg()).unwrap();
        assert_eq!(back, sp);
        assert_eq!(man.mode, "unaligned");
        let mut other = cfg();
        other.seed = 6;
        assert!(load_prompt::<f64>(&p, &other).is_err());
    }
}
