//! Binary checkpoints: a versioned JSON header followed by a flat
//! little-endian f32 payload.
//!
//! Layout: `MAGIC`, `u32` format version, `u64` header length, header JSON,
//! then every parameter in manifest order. The header carries the full
//! config, so loading rebuilds the model skeleton and only overwrites values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{rng, Config, Stream};
use crate::data::{TaskKind, Vocab};
use crate::error::{Error, Result};
use crate::model::BidenModel;
use crate::numkit::Real;

pub const MAGIC: &[u8; 8] = b"BIDENCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config_hash: String,
    pub config: Config,
    pub task: TaskKind,
    pub vocab: Vocab,
    pub params: Vec<ManifestEntry>,
}

/// A model together with what is needed to run it on raw text.
pub struct Checkpoint<T: Real = f32> {
    pub config: Config,
    pub vocab: Vocab,
    pub model: BidenModel<T>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes `model` into `w`. Parameters are rounded to f32.
pub fn write_checkpoint<T: Real>(
    w: &mut impl Write,
    config: &Config,
    vocab: &Vocab,
    model: &BidenModel<T>,
) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config_hash: config.hash(),
        config: config.clone(),
        task: model.task,
        vocab: vocab.clone(),
        params: model
            .store
            .iter()
            .map(|(_, name, t)| ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + 4 * model.store.num_scalars());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, t) in model.store.iter() {
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| bad(e.to_string()))
}

/// Parses a checkpoint and rebuilds its model.
pub fn read_checkpoint<T: Real>(r: &mut impl Read) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| bad(e.to_string()))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    if header.config.hash() != header.config_hash {
        return Err(bad("config hash does not match the stored config"));
    }
    let payload = &body[hlen..];
    let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if payload.len() != 4 * expected {
        return Err(bad(format!(
            "payload has {} bytes, manifest needs {}",
            payload.len(),
            4 * expected
        )));
    }

    let cfg = header.config;
    let mut model = BidenModel::<T>::new(
        cfg.model.clone(),
        header.task,
        header.vocab.len(),
        &mut rng(cfg.seed, Stream::Init),
    )?;
    if model.store.len() != header.params.len() {
        return Err(bad(format!(
            "manifest lists {} tensors, the config builds {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for entry in &header.params {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| bad(format!("unknown parameter {}", entry.name)))?;
        let t = model.store.get_mut(id);
        if t.shape() != entry.shape.as_slice() {
            return Err(bad(format!(
                "{}: manifest shape {:?}, model shape {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        for (dst, v) in t.data_mut().iter_mut().zip(&mut floats) {
            *dst = T::from_f64(v as f64);
        }
    }
    Ok(Checkpoint {
        config: cfg,
        vocab: header.vocab,
        model,
    })
}

pub fn save<T: Real>(path: impl AsRef<Path>, config: &Config, vocab: &Vocab, model: &BidenModel<T>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(&mut f, config, vocab, model)
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f)
}
