//! Model checkpoints.
//!
//! Layout (little-endian): `"LFSC"`, `u32` format version, `u32` header
//! length `n`, `n` bytes of JSON header, then every tensor listed in the
//! header as `f32` values in header order. The checkpoint hash is the
//! SHA-256 of the whole file.

use std::fs;
use std::io::Write;
use std::path::Path;

use lfs_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CheckpointError;
use crate::field::ConfigNormalizer;
use crate::lin::{Lin, LinSpec};
use crate::lvm::{Lvm, LvmFamily, LvmSpec, SvdLvm};
use crate::Scalar;

pub const MAGIC: [u8; 4] = *b"LFSC";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `"lvm"` or `"lin"`.
    pub kind: String,
    /// Element type the model was trained in.
    pub trained_in: String,
    pub initialization: String,
    pub k: Option<usize>,
    pub lvm: Option<LvmSpec>,
    pub lin: Option<LinSpec>,
    pub normalization: ConfigNormalizer,
    /// Hash of what the model was trained from: the dataset manifest for an
    /// LVM, the LVM checkpoint for a LIN.
    pub upstream: Option<String>,
    pub config_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn checkpoint_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode<S: Scalar>(header: &CheckpointHeader, tensors: &[&Tensor<S>]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let payload: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 4 * payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

fn decode<S: Scalar>(bytes: &[u8], kind: &str) -> Result<(CheckpointHeader, Vec<Tensor<S>>), CheckpointError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < PREFIX_LEN {
        return Err(CheckpointError::Truncated(format!(
            "{} bytes is shorter than the prefix",
            bytes.len()
        )));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(CheckpointError::Header(format!("unsupported format version {version}")));
    }
    let hlen = word(8) as usize;
    let body = &bytes[PREFIX_LEN..];
    if body.len() < hlen {
        return Err(CheckpointError::Truncated(format!(
            "header needs {hlen} bytes, {} present",
            body.len()
        )));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.kind != kind {
        return Err(CheckpointError::Kind {
            expected: kind.to_string(),
            found: header.kind.clone(),
        });
    }
    let payload = &body[hlen..];
    let needed: usize = header
        .tensors
        .iter()
        .map(|t| 4 * t.shape.iter().product::<usize>())
        .sum();
    if payload.len() < needed {
        return Err(CheckpointError::Truncated(format!(
            "payload needs {needed} bytes, {} present",
            payload.len()
        )));
    }
    if payload.len() > needed {
        return Err(CheckpointError::Header(format!(
            "{} bytes follow the declared tensors",
            payload.len() - needed
        )));
    }
    let mut at = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let data = payload[at..at + 4 * n]
            .chunks_exact(4)
            .map(|b| S::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        at += 4 * n;
        tensors.push(Tensor::from_vec(&entry.shape, data).map_err(|e| CheckpointError::Header(e.to_string()))?);
    }
    Ok((header, tensors))
}

fn store_entries<S: Scalar>(store: &ParamStore<S>) -> (Vec<TensorEntry>, Vec<&Tensor<S>>) {
    store
        .iter()
        .map(|(name, t)| {
            (
                TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                },
                t,
            )
        })
        .unzip()
}

fn load_store<S: Scalar>(
    store: &mut ParamStore<S>,
    header: &CheckpointHeader,
    tensors: Vec<Tensor<S>>,
) -> Result<(), CheckpointError> {
    if header.tensors.len() != store.len() {
        return Err(CheckpointError::Header(format!(
            "checkpoint holds {} tensors, the architecture has {}",
            header.tensors.len(),
            store.len()
        )));
    }
    for (entry, t) in header.tensors.iter().zip(tensors) {
        store
            .set(&entry.name, t)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
    }
    Ok(())
}

fn base_header<S: Scalar>(kind: &str, normalization: &ConfigNormalizer, config_hash: Option<&str>) -> CheckpointHeader {
    CheckpointHeader {
        kind: kind.to_string(),
        trained_in: S::NAME.to_string(),
        initialization: "fan_in_uniform".to_string(),
        k: None,
        lvm: None,
        lin: None,
        normalization: *normalization,
        upstream: None,
        config_hash: config_hash.map(str::to_string),
        tensors: Vec::new(),
    }
}

pub fn encode_lvm_checkpoint<S: Scalar>(
    lvm: &Lvm<S>,
    spec: &LvmSpec,
    normalization: &ConfigNormalizer,
    upstream: Option<&str>,
    config_hash: Option<&str>,
) -> Vec<u8> {
    let mut h = base_header::<S>("lvm", normalization, config_hash);
    h.k = Some(lvm.k());
    h.upstream = upstream.map(str::to_string);
    h.lvm = Some(LvmSpec {
        c: lvm.c(),
        family: lvm.family(),
        ..spec.clone()
    });
    match lvm {
        Lvm::Svd(m) => {
            let kk = m.k * m.k;
            let basis = Tensor::from_vec(&[m.c, kk], m.basis_t.clone()).unwrap();
            let sv = Tensor::from_vec(
                &[m.singular_values.len()],
                m.singular_values.iter().map(|&x| S::lit(x)).collect(),
            )
            .unwrap();
            let mean = m.mean.as_ref().map(|mu| Tensor::from_vec(&[kk], mu.clone()).unwrap());
            let mut list = vec![("basis_t", &basis), ("singular_values", &sv)];
            if let Some(mu) = &mean {
                list.push(("mean", mu));
            }
            h.tensors = list
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect();
            let ts: Vec<&Tensor<S>> = list.iter().map(|(_, t)| *t).collect();
            encode(&h, &ts)
        }
        _ => {
            let (entries, ts) = store_entries(lvm.store().expect("neural LVM"));
            h.tensors = entries;
            encode(&h, &ts)
        }
    }
}

pub fn decode_lvm_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<(Lvm<S>, CheckpointHeader), CheckpointError> {
    let (header, tensors) = decode::<S>(bytes, "lvm")?;
    let spec = header
        .lvm
        .clone()
        .ok_or_else(|| CheckpointError::Header("missing lvm spec".into()))?;
    let k = header.k.ok_or_else(|| CheckpointError::Header("missing k".into()))?;
    let lvm = match spec.family {
        LvmFamily::Svd => {
            let mut by_name = header.tensors.iter().map(|e| e.name.as_str()).zip(tensors);
            let mut take = |name: &str| by_name.find(|(n, _)| *n == name).map(|(_, t)| t);
            let basis = take("basis_t").ok_or_else(|| CheckpointError::Header("missing basis_t".into()))?;
            let sv =
                take("singular_values").ok_or_else(|| CheckpointError::Header("missing singular_values".into()))?;
            let mean = take("mean");
            if basis.shape() != [spec.c, k * k] {
                return Err(CheckpointError::Header(format!("basis shape {:?}", basis.shape())));
            }
            Lvm::Svd(SvdLvm {
                k,
                c: spec.c,
                basis_t: basis.into_data(),
                singular_values: sv.data().iter().map(|x| x.as_f64()).collect(),
                mean: mean.map(Tensor::into_data),
            })
        }
        _ => {
            let mut lvm = Lvm::build(&spec, k).map_err(|e| CheckpointError::Header(e.to_string()))?;
            load_store(lvm.store_mut().expect("neural LVM"), &header, tensors)?;
            lvm
        }
    };
    Ok((lvm, header))
}

pub fn encode_lin_checkpoint<S: Scalar>(
    lin: &Lin<S>,
    normalization: &ConfigNormalizer,
    upstream: &str,
    config_hash: Option<&str>,
) -> Vec<u8> {
    let mut h = base_header::<S>("lin", normalization, config_hash);
    h.lin = Some(lin.spec.clone());
    h.upstream = Some(upstream.to_string());
    let (entries, ts) = store_entries(&lin.store);
    h.tensors = entries;
    encode(&h, &ts)
}

pub fn decode_lin_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<(Lin<S>, CheckpointHeader), CheckpointError> {
    let (header, tensors) = decode::<S>(bytes, "lin")?;
    let spec = header
        .lin
        .clone()
        .ok_or_else(|| CheckpointError::Header("missing lin spec".into()))?;
    let mut lin = Lin::build(&spec).map_err(|e| CheckpointError::Header(e.to_string()))?;
    load_store(&mut lin.store, &header, tensors)?;
    Ok((lin, header))
}

/// Writes `bytes` and returns their hash.
pub fn write_checkpoint(path: &Path, bytes: &[u8]) -> Result<String, CheckpointError> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(checkpoint_hash(bytes))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    Ok(fs::read(path)?)
}
