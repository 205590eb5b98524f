//! Model persistence.
//!
//! A checkpoint is a JSON descriptor (architecture, seeds, schedule) next to
//! a binary weight blob. The blob format is deliberately dumb:
//!
//! ```text
//! magic  "MDWB"      4 bytes
//! version u32 LE     currently 1
//! count   u32 LE     number of tensors
//! per tensor:
//!   name_len u32 LE, name bytes (UTF-8)
//!   ndim     u32 LE, dims u32 LE each
//!   data     f32 LE, product(dims) values
//! ```
//!
//! Loading verifies that the blob carries exactly the tensors the rebuilt
//! model expects, matching by name with exact shapes; extra, missing, or
//! misshapen tensors are hard errors rather than warnings.

use crate::autoencoder::{Autoencoder, ModelError};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserError};
use crate::discrepancy::{DiscrepancyError, EnsembleModule, EnsembleTrainConfig, EnsembleRole};
use crate::nn::ParamStore;
use crate::schedule::ScheduleSpec;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"MDWB";
const BLOB_VERSION: u32 = 1;
const MAX_NAME_LEN: u32 = 4096;
const MAX_NDIM: u32 = 8;
const MAX_ELEMS: u64 = 1 << 31;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad descriptor {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0} is not a weight blob (bad magic)")]
    BadMagic(PathBuf),
    #[error("weight blob version {0} not supported")]
    UnsupportedVersion(u32),
    #[error("corrupt weight blob {path}: {reason}")]
    CorruptBlob { path: PathBuf, reason: String },
    #[error("blob tensor {name} has shape {got:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("model expects tensor {0} but the blob does not carry it")]
    MissingTensor(String),
    #[error("blob carries tensor {0} the model does not expect")]
    UnexpectedTensor(String),
    #[error("descriptor {path} has kind {got:?}, expected {expected:?}")]
    WrongKind {
        path: PathBuf,
        expected: String,
        got: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ensemble(#[from] DiscrepancyError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Weight blob

/// Writes every parameter of `store` (or several stores under distinct
/// prefixes) into one blob.
pub fn save_weights(path: &Path, parts: &[(&str, &ParamStore<f32>)]) -> Result<(), CheckpointError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let count: usize = parts.iter().map(|(_, s)| s.len()).sum();

    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(io_err(path));
    write(MAGIC)?;
    write(&BLOB_VERSION.to_le_bytes())?;
    write(&u32::try_from(count).expect("tensor count fits u32").to_le_bytes())?;
    for (prefix, store) in parts {
        for id in store.ids() {
            let name = format!("{prefix}{}", store.name(id));
            let value = store.value(id);
            let mut w2 = |bytes: &[u8]| w.write_all(bytes).map_err(io_err(path));
            w2(&u32::try_from(name.len()).expect("name fits u32").to_le_bytes())?;
            w2(name.as_bytes())?;
            w2(&u32::try_from(value.ndim()).expect("ndim fits u32").to_le_bytes())?;
            for &d in value.shape() {
                w2(&u32::try_from(d).expect("dim fits u32").to_le_bytes())?;
            }
            for &v in value.as_slice().expect("standard layout") {
                w2(&v.to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(io_err(path))
}

struct BlobTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn read_blob(path: &Path) -> Result<HashMap<String, BlobTensor>, CheckpointError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let corrupt = |reason: &str| CheckpointError::CorruptBlob {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    let mut u32_buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32, CheckpointError> {
        r.read_exact(&mut u32_buf)
            .map_err(|_| corrupt("truncated header field"))?;
        Ok(u32::from_le_bytes(u32_buf))
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt("shorter than the magic"))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(path.to_path_buf()));
    }
    let version = read_u32(&mut r)?;
    if version != BLOB_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)?;

    let mut tensors = HashMap::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)?;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(corrupt(&format!("tensor name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        r.read_exact(&mut name_bytes)
            .map_err(|_| corrupt("truncated tensor name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| corrupt("non-UTF-8 tensor name"))?;

        let ndim = read_u32(&mut r)?;
        if ndim > MAX_NDIM {
            return Err(corrupt(&format!("tensor {name} claims {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut elems: u64 = 1;
        for _ in 0..ndim {
            let d = read_u32(&mut r)? as u64;
            elems = elems.saturating_mul(d.max(1)).min(MAX_ELEMS + 1);
            shape.push(d as usize);
        }
        if elems > MAX_ELEMS {
            return Err(corrupt(&format!("tensor {name} is implausibly large")));
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0f32; n];
        let mut byte_buf = vec![0u8; n * 4];
        r.read_exact(&mut byte_buf)
            .map_err(|_| corrupt(&format!("truncated data for tensor {name}")))?;
        for (i, chunk) in byte_buf.chunks_exact(4).enumerate() {
            data[i] = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
        if tensors.insert(name.clone(), BlobTensor { shape, data }).is_some() {
            return Err(corrupt(&format!("duplicate tensor {name}")));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io_err(path))? != 0 {
        return Err(corrupt("trailing bytes after the last tensor"));
    }
    Ok(tensors)
}

/// Loads a blob into stores rebuilt from their architecture descriptions.
/// Every expected tensor must be present with the exact shape; nothing may
/// be left over.
pub fn load_weights(
    path: &Path,
    parts: &mut [(&str, &mut ParamStore<f32>)],
) -> Result<(), CheckpointError> {
    let mut tensors = read_blob(path)?;
    for (prefix, store) in parts.iter_mut() {
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}{}", store.name(id));
            let tensor = tensors
                .remove(&name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            let expected = store.value(id).shape().to_vec();
            if tensor.shape != expected {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected,
                    got: tensor.shape,
                });
            }
            store.values[id.0]
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&tensor.data);
        }
    }
    if let Some(name) = tensors.into_keys().next() {
        return Err(CheckpointError::UnexpectedTensor(name));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Descriptors

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CheckpointError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| CheckpointError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Reads a descriptor, checking its `kind` tag before full deserialization
/// so a mixed-up file reports "wrong kind" rather than a missing field.
fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, kind: &str) -> Result<T, CheckpointError> {
    let json_err = |source| CheckpointError::Json {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err(path))?;
    let value: serde_json::Value =
        serde_json::from_reader(BufReader::new(file)).map_err(json_err)?;
    let got = value.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if got != kind {
        return Err(CheckpointError::WrongKind {
            path: path.to_path_buf(),
            expected: kind.to_string(),
            got: got.to_string(),
        });
    }
    serde_json::from_value(value).map_err(json_err)
}

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleDescriptor {
    kind: String,
    role: EnsembleRole,
    member_seeds: Vec<u64>,
    train: EnsembleTrainConfig,
    weights: String,
}

/// Saves an ensemble as `{stem}.json` + `{stem}.weights` under `dir`.
/// Returns the descriptor path.
pub fn save_ensemble(
    dir: &Path,
    stem: &str,
    module: &EnsembleModule,
    train: &EnsembleTrainConfig,
) -> Result<PathBuf, CheckpointError> {
    let weights_name = format!("{stem}.weights");
    let parts: Vec<(String, &ParamStore<f32>)> = module
        .members()
        .iter()
        .enumerate()
        .map(|(j, m)| (format!("m{j}."), m.store()))
        .collect();
    let borrowed: Vec<(&str, &ParamStore<f32>)> =
        parts.iter().map(|(p, s)| (p.as_str(), *s)).collect();
    save_weights(&dir.join(&weights_name), &borrowed)?;

    let descriptor = EnsembleDescriptor {
        kind: "reconstruction_ensemble".to_string(),
        role: module.role(),
        member_seeds: module.member_seeds().to_vec(),
        train: train.clone(),
        weights: weights_name,
    };
    let json_path = dir.join(format!("{stem}.json"));
    write_json(&json_path, &descriptor)?;
    Ok(json_path)
}

/// Rebuilds an ensemble from its descriptor: members are constructed from
/// the stored architecture and seeds, then the blob overwrites the weights.
pub fn load_ensemble(
    json_path: &Path,
) -> Result<(EnsembleModule, EnsembleTrainConfig), CheckpointError> {
    let desc: EnsembleDescriptor = read_json(json_path, "reconstruction_ensemble")?;
    let mut members = Vec::with_capacity(desc.member_seeds.len());
    for &seed in &desc.member_seeds {
        members.push(Autoencoder::<f32>::build(&desc.train.ae, seed)?);
    }
    let blob_path = json_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&desc.weights);
    {
        let mut parts: Vec<(String, &mut ParamStore<f32>)> = members
            .iter_mut()
            .enumerate()
            .map(|(j, m)| (format!("m{j}."), m.store_mut()))
            .collect();
        let mut borrowed: Vec<(&str, &mut ParamStore<f32>)> = parts
            .iter_mut()
            .map(|(p, s)| (p.as_str(), &mut **s))
            .collect();
        load_weights(&blob_path, &mut borrowed)?;
    }
    let module = EnsembleModule::from_parts(desc.role, desc.member_seeds, members)?;
    Ok((module, desc.train))
}

#[derive(Debug, Serialize, Deserialize)]
struct DenoiserDescriptor {
    kind: String,
    config: DenoiserConfig,
    seed: u64,
    schedule: ScheduleSpec,
    weights: String,
}

/// Saves a trained noise predictor plus the schedule it was trained under.
pub fn save_denoiser(
    dir: &Path,
    stem: &str,
    net: &Denoiser<f32>,
    seed: u64,
    schedule: &ScheduleSpec,
) -> Result<PathBuf, CheckpointError> {
    let weights_name = format!("{stem}.weights");
    save_weights(&dir.join(&weights_name), &[("", net.store())])?;
    let descriptor = DenoiserDescriptor {
        kind: "noise_predictor".to_string(),
        config: net.config().clone(),
        seed,
        schedule: *schedule,
        weights: weights_name,
    };
    let json_path = dir.join(format!("{stem}.json"));
    write_json(&json_path, &descriptor)?;
    Ok(json_path)
}

/// Rebuilds the predictor and returns it with its schedule recipe and the
/// seed it was built from.
pub fn load_denoiser(json_path: &Path) -> Result<(Denoiser<f32>, ScheduleSpec, u64), CheckpointError> {
    let desc: DenoiserDescriptor = read_json(json_path, "noise_predictor")?;
    let mut net = Denoiser::<f32>::build(&desc.config, desc.seed)?;
    let blob_path = json_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&desc.weights);
    load_weights(&blob_path, &mut [("", net.store_mut())])?;
    Ok((net, desc.schedule, desc.seed))
}
