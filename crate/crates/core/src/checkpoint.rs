//! Tensor checkpoints: a JSON manifest next to one raw blob of
//! little-endian `f64` values stored in manifest order.
//!
//! `<stem>.json` lists every tensor's name, shape, byte offset and element
//! count plus free-form metadata; `<stem>.bin` holds the data back to back.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diffcore::Tensor;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{PaintError, Result};
use crate::prompt_memory::{PromptEntry, PromptMemory};

pub const FORMAT: &str = "paint-tensors/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Number of `f64` elements.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub blob: String,
    pub tensors: Vec<TensorRecord>,
    pub metadata: Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PaintError + '_ {
    move |source| PaintError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`, creating `dir`.
pub fn write_tensors(
    dir: &Path,
    stem: &str,
    tensors: &[(String, &Tensor)],
    metadata: Value,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let blob_name = format!("{stem}.bin");
    let mut blob = Vec::new();
    let mut records = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        records.push(TensorRecord {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            length: t.numel(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        dtype: "f64-le".to_string(),
        blob: blob_name.clone(),
        tensors: records,
        metadata,
    };
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    let mpath = manifest_path(dir, stem);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&mpath, text).map_err(io_err(&mpath))?;
    Ok(mpath)
}

/// Reads a manifest and its blob back into named tensors.
pub fn read_tensors(manifest: &Path) -> Result<(Vec<(String, Tensor)>, Value)> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT || m.dtype != "f64-le" {
        return Err(PaintError::Checkpoint(format!(
            "unsupported format {}/{} in {}",
            m.format,
            m.dtype,
            manifest.display()
        )));
    }
    let blob_path = manifest.parent().unwrap_or(Path::new(".")).join(&m.blob);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    let mut expected_offset = 0;
    let mut out = Vec::with_capacity(m.tensors.len());
    for rec in &m.tensors {
        if rec.offset != expected_offset || rec.shape.iter().product::<usize>() != rec.length {
            return Err(PaintError::Checkpoint(format!(
                "inconsistent record for `{}`",
                rec.name
            )));
        }
        let end = rec.offset + rec.length * 8;
        let bytes = blob
            .get(rec.offset..end)
            .ok_or_else(|| PaintError::Checkpoint(format!("blob too short for `{}`", rec.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.push((rec.name.clone(), Tensor::new(rec.shape.clone(), data)?));
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(PaintError::Checkpoint(format!(
            "blob has {} trailing bytes",
            blob.len() - expected_offset
        )));
    }
    Ok((out, m.metadata))
}

pub fn save_encoder(params: &EncoderParams, dir: &Path, stem: &str) -> Result<PathBuf> {
    let meta = json!({
        "kind": "encoder",
        "config": params.config,
        "trainable_blocks": params.trainable_blocks,
    });
    write_tensors(dir, stem, &params.named_tensors(), meta)
}

pub fn load_encoder(manifest: &Path) -> Result<EncoderParams> {
    let (tensors, meta) = read_tensors(manifest)?;
    if meta.get("kind").and_then(Value::as_str) != Some("encoder") {
        return Err(PaintError::Checkpoint(format!(
            "{} is not an encoder checkpoint",
            manifest.display()
        )));
    }
    let config: EncoderConfig = serde_json::from_value(meta["config"].clone())?;
    let trainable_blocks = meta["trainable_blocks"]
        .as_u64()
        .ok_or_else(|| PaintError::Checkpoint("missing trainable_blocks".into()))?
        as usize;
    let mut params = EncoderParams::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    params.trainable_blocks = trainable_blocks;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != tensors.len() {
        return Err(PaintError::Checkpoint(format!(
            "expected {} tensors, found {}",
            names.len(),
            tensors.len()
        )));
    }
    for ((slot, name), (found, t)) in params.tensors_mut().into_iter().zip(&names).zip(tensors) {
        if *name != found || slot.shape() != t.shape() {
            return Err(PaintError::Checkpoint(format!(
                "tensor `{found}` {:?} does not match expected `{name}` {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(params)
}

pub fn save_memory(memory: &PromptMemory, dir: &Path, stem: &str) -> Result<PathBuf> {
    let keys: Vec<Tensor> = memory
        .entries()
        .iter()
        .map(|e| Tensor::new(vec![e.key.len()], e.key.clone()))
        .collect::<std::result::Result<_, _>>()?;
    let mut named = Vec::new();
    for (j, (e, k)) in memory.entries().iter().zip(&keys).enumerate() {
        named.push((format!("entries.{j}.key"), k));
        named.push((format!("entries.{j}.value"), &e.value));
    }
    let entries: Vec<Value> = memory
        .entries()
        .iter()
        .map(|e| json!({ "created_at": e.created_at, "update_count": e.update_count }))
        .collect();
    write_tensors(
        dir,
        stem,
        &named,
        json!({ "kind": "prompt_memory", "entries": entries }),
    )
}

pub fn load_memory(manifest: &Path) -> Result<PromptMemory> {
    let (tensors, meta) = read_tensors(manifest)?;
    if meta.get("kind").and_then(Value::as_str) != Some("prompt_memory") {
        return Err(PaintError::Checkpoint(format!(
            "{} is not a prompt memory",
            manifest.display()
        )));
    }
    let entries = meta["entries"]
        .as_array()
        .ok_or_else(|| PaintError::Checkpoint("missing entry metadata".into()))?;
    if tensors.len() != 2 * entries.len() {
        return Err(PaintError::Checkpoint(
            "entry metadata and tensors disagree".into(),
        ));
    }
    let mut memory = PromptMemory::new();
    for (j, (pair, info)) in tensors.chunks_exact(2).zip(entries).enumerate() {
        let (kname, key) = &pair[0];
        let (vname, value) = &pair[1];
        if *kname != format!("entries.{j}.key") || *vname != format!("entries.{j}.value") {
            return Err(PaintError::Checkpoint(format!(
                "unexpected tensor names `{kname}`, `{vname}`"
            )));
        }
        let field = |f: &str| {
            info[f]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| PaintError::Checkpoint(format!("entry {j}: missing {f}")))
        };
        memory.push_entry(PromptEntry {
            key: key.data().to_vec(),
            value: value.clone(),
            created_at: field("created_at")?,
            update_count: field("update_count")?,
        });
    }
    Ok(memory)
}
