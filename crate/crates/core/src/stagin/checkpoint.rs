//! Binary containers for checkpoints (`STGN`) and attention dumps (`ATTN`).
//!
//! Both share one layout, all integers little-endian:
//!
//! | field        | type                          |
//! |--------------|-------------------------------|
//! | magic        | 4 bytes                       |
//! | version      | `u32` (= 1)                   |
//! | header_len   | `u32`                         |
//! | header       | `header_len` bytes of JSON    |
//! | payload      | tensors in header order       |
//!
//! Checkpoint payloads are `f32`; attention payloads are `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{RunningStats, Tensor};

use super::{AttentionRecord, ModelConfig, ModelError, ModelState, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STGN";
pub const ATTENTION_MAGIC: &[u8; 4] = b"ATTN";
pub const CONTAINER_VERSION: u32 = 1;

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

fn wrap(magic: &[u8; 4], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

fn unwrap<'a>(bytes: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<(&'a [u8], &'a [u8]), ModelError> {
    let fmt = |detail: String| ModelError::Format { what, detail };
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(fmt("bad magic".to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CONTAINER_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header = bytes
        .get(12..12 + len)
        .ok_or_else(|| fmt(format!("header of {len} bytes is truncated")))?;
    Ok((header, &bytes[12 + len..]))
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

fn entries(state: &ModelState) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out: Vec<_> = state
        .params
        .iter()
        .map(|(name, t)| (name.to_string(), t.shape().to_vec(), t.data().to_vec()))
        .collect();
    for (name, r) in &state.running {
        out.push((format!("{name}{RUNNING_MEAN}"), vec![r.mean.len()], r.mean.clone()));
        out.push((format!("{name}{RUNNING_VAR}"), vec![r.var.len()], r.var.clone()));
    }
    out
}

/// Serializes parameters and running statistics as `f32`, with free-form metadata in the header.
pub fn encode_checkpoint(state: &ModelState, meta: &BTreeMap<String, serde_json::Value>) -> Vec<u8> {
    let entries = entries(state);
    let header = CheckpointHeader {
        config: state.config.clone(),
        manifest: entries
            .iter()
            .map(|(name, shape, _)| ManifestEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut payload = Vec::new();
    for (_, _, data) in &entries {
        for &x in data {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    wrap(CHECKPOINT_MAGIC, &header, &payload)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelState, BTreeMap<String, serde_json::Value>), ModelError> {
    let what = "checkpoint";
    let fmt = |detail: String| ModelError::Format { what, detail };
    let (header, payload) = unwrap(bytes, CHECKPOINT_MAGIC, what)?;
    let header: CheckpointHeader = serde_json::from_slice(header).map_err(|e| fmt(e.to_string()))?;
    header.config.validate()?;
    let total: usize = header.manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != 4 * total {
        return Err(fmt(format!("expected {} payload bytes, found {}", 4 * total, payload.len())));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    let mut params = ParamSet::new();
    let mut running: BTreeMap<String, RunningStats> = BTreeMap::new();
    for entry in &header.manifest {
        let len = entry.shape.iter().product();
        let data: Vec<f64> = floats.by_ref().take(len).collect();
        if let Some(bn) = entry.name.strip_suffix(RUNNING_MEAN) {
            running.entry(bn.to_string()).or_insert_with(|| RunningStats::new(len)).mean = data;
        } else if let Some(bn) = entry.name.strip_suffix(RUNNING_VAR) {
            running.entry(bn.to_string()).or_insert_with(|| RunningStats::new(len)).var = data;
        } else {
            if params.position(&entry.name).is_some() {
                return Err(fmt(format!("duplicate entry {}", entry.name)));
            }
            params.insert(entry.name.clone(), Tensor::new(&entry.shape, data).map_err(|e| fmt(e.to_string()))?);
        }
    }

    // The manifest must describe exactly the parameters this configuration expects.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reference = ModelState::init(header.config.clone(), &mut rng);
    let expected: Vec<(&str, &[usize])> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
    let found: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
    if expected != found || reference.running.keys().ne(running.keys()) {
        return Err(fmt("parameter manifest does not match the model configuration".to_string()));
    }
    Ok((
        ModelState {
            config: header.config,
            params,
            running,
        },
        header.meta,
    ))
}

pub fn save_checkpoint(
    state: &ModelState,
    meta: &BTreeMap<String, serde_json::Value>,
    path: &Path,
) -> Result<(), ModelError> {
    fs::write(path, encode_checkpoint(state, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, BTreeMap<String, serde_json::Value>), ModelError> {
    decode_checkpoint(&fs::read(path)?)
}

/// One subject's attention record with its identifying information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub subject: String,
    pub label: Option<usize>,
    pub record: AttentionRecord,
}

#[derive(Serialize, Deserialize)]
struct AttentionMeta {
    subject: String,
    label: Option<usize>,
    n_layers: usize,
    n_steps: usize,
    n_nodes: usize,
    rep_len: usize,
}

#[derive(Serialize, Deserialize)]
struct AttentionHeader {
    entries: Vec<AttentionMeta>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

/// Serializes attention records; each payload block is `z_space`, `z_time`, `h_dyn` as `f64`.
pub fn encode_attention(entries: &[AttentionEntry], meta: &BTreeMap<String, serde_json::Value>) -> Vec<u8> {
    let header = AttentionHeader {
        entries: entries
            .iter()
            .map(|e| AttentionMeta {
                subject: e.subject.clone(),
                label: e.label,
                n_layers: e.record.n_layers,
                n_steps: e.record.n_steps,
                n_nodes: e.record.n_nodes,
                rep_len: e.record.h_dyn.len(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut payload = Vec::new();
    for e in entries {
        let r = &e.record;
        for &x in r.z_space.iter().chain(&r.z_time).chain(&r.h_dyn) {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    wrap(ATTENTION_MAGIC, &header, &payload)
}

pub fn decode_attention(bytes: &[u8]) -> Result<(Vec<AttentionEntry>, BTreeMap<String, serde_json::Value>), ModelError> {
    let what = "attention dump";
    let fmt = |detail: String| ModelError::Format { what, detail };
    let (header, payload) = unwrap(bytes, ATTENTION_MAGIC, what)?;
    let header: AttentionHeader = serde_json::from_slice(header).map_err(|e| fmt(e.to_string()))?;
    let sizes: Vec<(usize, usize, usize)> = header
        .entries
        .iter()
        .map(|m| {
            (
                m.n_layers * m.n_steps * m.n_nodes,
                m.n_layers * m.n_steps * m.n_steps,
                m.rep_len,
            )
        })
        .collect();
    let total: usize = sizes.iter().map(|(a, b, c)| a + b + c).sum();
    if payload.len() != 8 * total {
        return Err(fmt(format!("expected {} payload bytes, found {}", 8 * total, payload.len())));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let entries = header
        .entries
        .into_iter()
        .zip(sizes)
        .map(|(m, (ns, nt, nr))| AttentionEntry {
            subject: m.subject,
            label: m.label,
            record: AttentionRecord {
                n_layers: m.n_layers,
                n_steps: m.n_steps,
                n_nodes: m.n_nodes,
                z_space: values.by_ref().take(ns).collect(),
                z_time: values.by_ref().take(nt).collect(),
                h_dyn: values.by_ref().take(nr).collect(),
            },
        })
        .collect();
    Ok((entries, header.meta))
}

pub fn save_attention(
    entries: &[AttentionEntry],
    meta: &BTreeMap<String, serde_json::Value>,
    path: &Path,
) -> Result<(), ModelError> {
    fs::write(path, encode_attention(entries, meta))?;
    Ok(())
}

pub fn load_attention(path: &Path) -> Result<(Vec<AttentionEntry>, BTreeMap<String, serde_json::Value>), ModelError> {
    decode_attention(&fs::read(path)?)
}
