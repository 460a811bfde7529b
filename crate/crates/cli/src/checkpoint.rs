//! Binary checkpoint format.
//!
//! ```text
//! "MPOGPTCK"              8 bytes
//! header_len              u64, little-endian
//! header                  header_len bytes of JSON
//! payload                 tensors, little-endian, in header order
//! ```

use std::fs;
use std::path::Path;

use mpogpt_core::data::CharVocab;
use mpogpt_core::model::{LinearMode, Transformer};
use mpogpt_core::{DType, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"MPOGPTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: LinearMode,
    pub config: RunConfig,
    pub vocab: String,
    pub tensors: Vec<TensorEntry>,
}

/// A model together with the run that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub vocab: CharVocab,
    pub model: Transformer<T>,
}

fn put<T: Scalar>(out: &mut Vec<u8>, data: &[T]) {
    match T::DTYPE {
        DType::F32 => data.iter().for_each(|v| out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes())),
        DType::F64 => data.iter().for_each(|v| out.extend_from_slice(&v.as_f64().to_le_bytes())),
    }
}

fn get<T: Scalar>(bytes: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
    }
}

pub fn encode<T: Scalar>(config: &RunConfig, vocab: &CharVocab, model: &Transformer<T>) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.named_tensors() {
        let offset = payload.len() as u64;
        put(&mut payload, t.data());
        tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            offset,
            length: payload.len() as u64 - offset,
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: model.config().mode,
        config: RunConfig { model: model.config().clone(), ..config.clone() },
        vocab: vocab.chars().iter().collect(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Splits a checkpoint into its header and payload, checking framing and
/// the tensor table.
pub fn decode_header(bytes: &[u8]) -> std::result::Result<(Header, &[u8]), String> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format!("header length {header_len} exceeds file size {}", bytes.len()))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| format!("invalid header: {e}"))?;
    if header.format_version != FORMAT_VERSION {
        return Err(format!("format version {} is not supported (expected {FORMAT_VERSION})", header.format_version));
    }
    let payload = &bytes[header_end..];
    let mut entries: Vec<&TensorEntry> = header.tensors.iter().collect();
    entries.sort_by_key(|e| e.offset);
    let mut cursor = 0u64;
    let mut total = 0u64;
    for e in &entries {
        if e.offset < cursor {
            return Err(format!("tensor `{}` at offset {} overlaps the previous tensor ending at {cursor}", e.name, e.offset));
        }
        let expected = e.shape.iter().product::<usize>() as u64 * e.dtype.size_of() as u64;
        if e.length != expected {
            return Err(format!("tensor `{}` has length {} but shape {:?} needs {expected}", e.name, e.length, e.shape));
        }
        cursor = e.offset.checked_add(e.length).ok_or_else(|| format!("tensor `{}` offset overflows", e.name))?;
        total += e.length;
    }
    if payload.len() as u64 != total || cursor != total {
        return Err(format!("payload is {} bytes but the tensor table describes {total}", payload.len()));
    }
    Ok((header, payload))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> std::result::Result<Checkpoint<T>, String> {
    let (header, payload) = decode_header(bytes)?;
    if header.kind != header.config.model.mode {
        return Err(format!("header kind {:?} disagrees with model mode {:?}", header.kind, header.config.model.mode));
    }
    let vocab = CharVocab::from_chars(header.vocab.chars().collect()).map_err(|e| e.to_string())?;
    if vocab.len() != header.config.model.vocab {
        return Err(format!("vocabulary has {} symbols but the model expects {}", vocab.len(), header.config.model.vocab));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let bytes = &payload[e.offset as usize..(e.offset + e.length) as usize];
        let t = Tensor::new(e.shape.clone(), get::<T>(bytes, e.dtype)).map_err(|err| format!("tensor `{}`: {err}", e.name))?;
        tensors.push((e.name.clone(), t));
    }
    let (model, _) = Transformer::from_tensors(header.config.model.clone(), tensors).map_err(|e| e.to_string())?;
    Ok(Checkpoint { config: header.config, vocab, model })
}

pub fn save<T: Scalar>(path: &Path, config: &RunConfig, vocab: &CharVocab, model: &Transformer<T>) -> Result<()> {
    crate::write_atomic(path, &encode(config, vocab, model))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    decode(&bytes).map_err(|message| CliError::Checkpoint { path: path.to_owned(), message })
}
