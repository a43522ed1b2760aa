//! Binary checkpoints: magic, header length, JSON header, raw payload.
//!
//! The payload is a contiguous run of little-endian f64 arrays (row-major);
//! the header's manifest gives each tensor's group, name, shape and byte
//! offset. Groups are `params`, the optional `adam.m` / `adam.v` moments and
//! the optional `reference` parameters of an RL run.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LacModel, ModelConfig};
use crate::numerics::{Adam, AdamConfig, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"LACCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset within the payload.
    pub offset: u64,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    /// `init`, `correction_warmup`, `full_generation` or `rl`.
    pub phase: String,
    /// Steps (SFT) or updates (RL) completed within `phase`.
    pub step: usize,
    pub config_hash: String,
    pub model: ModelConfig,
    pub adam: Option<AdamState>,
    /// Loop state that is neither a tensor nor optimizer state.
    pub extra: serde_json::Value,
    pub manifest: Vec<TensorEntry>,
    pub payload_bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
}

/// In-memory checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub phase: String,
    pub step: usize,
    pub config_hash: String,
    pub model: LacModel,
    pub adam: Option<Adam>,
    pub reference: Option<LacModel>,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn new(phase: &str, step: usize, config_hash: &str, model: LacModel) -> Self {
        Self {
            phase: phase.to_string(),
            step,
            config_hash: config_hash.to_string(),
            model,
            adam: None,
            reference: None,
            extra: serde_json::Value::Null,
        }
    }
}

fn push_group<'a>(
    manifest: &mut Vec<TensorEntry>,
    tensors: &mut Vec<&'a Tensor>,
    offset: &mut u64,
    group: &str,
    store: &ParamStore,
    values: impl Iterator<Item = &'a Tensor>,
) {
    for (e, t) in store.entries().iter().zip(values) {
        manifest.push(TensorEntry {
            group: group.to_string(),
            name: e.name.clone(),
            shape: [t.rows(), t.cols()],
            dtype: "f64le".to_string(),
            offset: *offset,
            frozen: e.frozen,
        });
        *offset += 8 * t.len() as u64;
        tensors.push(t);
    }
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let store = &ck.model.store;
    let mut manifest = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    push_group(&mut manifest, &mut tensors, &mut offset, "params", store, store.entries().iter().map(|e| &e.value));
    if let Some(adam) = &ck.adam {
        if adam.m.len() != store.len() {
            return Err(Error::Shape("optimizer state does not match parameter layout".into()));
        }
        push_group(&mut manifest, &mut tensors, &mut offset, "adam.m", store, adam.m.iter());
        push_group(&mut manifest, &mut tensors, &mut offset, "adam.v", store, adam.v.iter());
    }
    if let Some(r) = &ck.reference {
        push_group(&mut manifest, &mut tensors, &mut offset, "reference", &r.store, r.store.entries().iter().map(|e| &e.value));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        phase: ck.phase.clone(),
        step: ck.step,
        config_hash: ck.config_hash.clone(),
        model: ck.model.config.clone(),
        adam: ck.adam.as_ref().map(|a| AdamState { config: a.config, step: a.step }),
        extra: ck.extra.clone(),
        manifest,
        payload_bytes: offset,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    // write-then-rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Offsets must tile the payload exactly, in order.
pub fn check_manifest(header: &Header) -> Result<()> {
    let mut at = 0u64;
    for e in &header.manifest {
        if e.dtype != "f64le" {
            return Err(Error::Format(format!("tensor {}/{}: unsupported dtype {}", e.group, e.name, e.dtype)));
        }
        if e.offset != at {
            return Err(Error::Format(format!(
                "tensor {}/{} at offset {} but the previous tensor ends at {at}",
                e.group, e.name, e.offset
            )));
        }
        at += 8 * (e.shape[0] * e.shape[1]) as u64;
    }
    if at != header.payload_bytes {
        return Err(Error::Format(format!("manifest covers {at} bytes, payload has {}", header.payload_bytes)));
    }
    Ok(())
}

pub fn read_header(path: &Path) -> Result<(Header, Vec<u8>)> {
    let file = File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("checkpoint {}: {e}", path.display()))))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Format(format!("{}: not a checkpoint", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: bad checkpoint magic", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("checkpoint format {} is not supported", header.format_version)));
    }
    check_manifest(&header)?;
    let mut payload = Vec::with_capacity(header.payload_bytes as usize);
    r.read_to_end(&mut payload)?;
    if payload.len() as u64 != header.payload_bytes {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, header says {}",
            path.display(),
            payload.len(),
            header.payload_bytes
        )));
    }
    Ok((header, payload))
}

fn tensor_at(e: &TensorEntry, payload: &[u8]) -> Tensor {
    let start = e.offset as usize;
    let n = e.shape[0] * e.shape[1];
    let data = payload[start..start + 8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(e.shape[0], e.shape[1], data).expect("manifest shape matches its byte span")
}

fn group_store(header: &Header, payload: &[u8], group: &str) -> Option<ParamStore> {
    let mut store = ParamStore::new();
    let mut any = false;
    for e in header.manifest.iter().filter(|e| e.group == group) {
        store.add(e.name.clone(), tensor_at(e, payload), e.frozen);
        any = true;
    }
    any.then_some(store)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let (header, payload) = read_header(path)?;
    let store = group_store(&header, &payload, "params")
        .ok_or_else(|| Error::Format(format!("{}: no parameters", path.display())))?;
    let model = LacModel::from_store(header.model.clone(), store)?;
    let adam = match header.adam {
        Some(state) => {
            let m = group_store(&header, &payload, "adam.m");
            let v = group_store(&header, &payload, "adam.v");
            let (Some(m), Some(v)) = (m, v) else {
                return Err(Error::Format("optimizer state declared but moments missing".into()));
            };
            let take = |s: ParamStore| s.entries().iter().map(|e| e.value.clone()).collect::<Vec<_>>();
            let (m, v) = (take(m), take(v));
            if m.len() != model.store.len() || v.len() != model.store.len() {
                return Err(Error::Format("optimizer moments do not match the parameter layout".into()));
            }
            Some(Adam { config: state.config, step: state.step, m, v })
        }
        None => None,
    };
    let reference = match group_store(&header, &payload, "reference") {
        Some(s) => Some(LacModel::from_store(header.model.clone(), s)?),
        None => None,
    };
    Ok(Checkpoint {
        phase: header.phase,
        step: header.step,
        config_hash: header.config_hash,
        model,
        adam,
        reference,
        extra: header.extra,
    })
}

/// Load and compare the stored config hash with `expected_hash`, warning on
/// standard error when they differ.
pub fn load_checked(path: &Path, expected_hash: &str) -> Result<Checkpoint> {
    let ck = load(path)?;
    if ck.config_hash != expected_hash {
        eprintln!(
            "WARNING: checkpoint {} was written under config hash {} but the current config hashes to {}; \
             the checkpoint's own model section is used",
            path.display(),
            ck.config_hash,
            expected_hash
        );
    }
    Ok(ck)
}
