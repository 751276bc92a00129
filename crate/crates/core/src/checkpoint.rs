//! Versioned single-file checkpoints.
//!
//! Layout: the 8-byte magic `PSEGCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! every tensor's data as little-endian `f64` in manifest order. The
//! manifest records dimensions, group trainability, per-tensor metadata
//! and the complete run configuration.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{GroupPolicy, ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    /// Context length `N`.
    pub n: usize,
    /// Embedding width `C`.
    pub c: usize,
    /// Global feature width `D`.
    pub d: usize,
    /// Class count `K`.
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub group: ParamGroup,
    pub frozen: bool,
    pub shape: Vec<usize>,
    /// Offset in `f64` elements from the start of the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dims: Dims,
    pub step: usize,
    pub groups: BTreeMap<ParamGroup, GroupPolicy>,
    pub tensors: Vec<TensorRecord>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub store: ParamStore,
    pub step: usize,
}

impl Checkpoint {
    /// Model described by the stored configuration.
    pub fn model(&self) -> Result<crate::model::Model> {
        crate::model::Model::new(self.config.model.clone())
    }
}

pub fn save(path: &Path, config: &RunConfig, store: &ParamStore, step: usize) -> Result<()> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (name, p) in store.iter() {
        tensors.push(TensorRecord {
            name: name.clone(),
            group: p.group,
            frozen: p.frozen,
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.numel();
    }
    let m = &config.model;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dims: Dims {
            n: m.context_len,
            c: m.embed_dim,
            d: m.global_dim,
            k: m.num_classes,
        },
        step,
        groups: ParamGroup::ALL.iter().map(|&g| (g, store.policy(g))).collect(),
        tensors,
        config: config.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, p) in store.iter() {
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let err = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| err("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let data = &bytes[20 + len..];
    if data.len() % 8 != 0 {
        return Err(err("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut store = ParamStore::new();
    for (&g, &p) in &manifest.groups {
        store.set_policy(g, p);
    }
    for rec in &manifest.tensors {
        let n: usize = rec.shape.iter().product();
        let slice = values
            .get(rec.offset..rec.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{}' out of range", rec.name)))?;
        store.insert(
            rec.name.clone(),
            Tensor::new(rec.shape.clone(), slice.to_vec())?,
            rec.group,
        );
        store.set_frozen(&rec.name, rec.frozen)?;
    }
    Ok(Checkpoint {
        config: manifest.config,
        store,
        step: manifest.step,
    })
}
