//! Adapter-set container.
//!
//! ```text
//! offset 0   magic        b"MLGO"
//! offset 4   version      u32 LE (= 1)
//! offset 8   header_len   u64 LE
//! offset 16  header       UTF-8 JSON, space-padded so the payload starts 8-byte aligned
//! 16 + header_len         payload: f64 LE, row-major, in directory order
//! ```
//!
//! Directory offsets are relative to the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterSet, Head, ModelSignature, SetMetadata, SvdLoraAdapter, TargetId};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"MLGO";
pub const FORMAT_VERSION: u32 = 1;
pub const PREAMBLE_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    B,
    E,
    A,
    #[serde(rename = "head_w")]
    HeadW,
    #[serde(rename = "head_b")]
    HeadB,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: Role,
    pub target: Option<TargetId>,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub model_signature: ModelSignature,
    pub metadata: SetMetadata,
    pub tensors: Vec<TensorEntry>,
}

struct Pending<'a> {
    entry: TensorEntry,
    values: &'a [f64],
}

fn directory(set: &AdapterSet) -> Vec<Pending<'_>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    let mut push = |name: String, role, target, shape: Vec<usize>, values: &[f64]| {
        let length = 8 * values.len() as u64;
        let entry = TensorEntry {
            name,
            role,
            target,
            shape,
            offset,
            length,
        };
        offset += length;
        entry
    };
    for (t, a) in set.adapters() {
        let e = a.e();
        for (name, role, shape, values) in [
            ("B", Role::B, vec![a.b().rows(), a.b().cols()], a.b().data()),
            ("E", Role::E, vec![e.len()], e),
            ("A", Role::A, vec![a.a().rows(), a.a().cols()], a.a().data()),
        ] {
            let entry = push(format!("{t}.{name}"), role, Some(*t), shape, values);
            out.push(Pending { entry, values });
        }
    }
    if let Some(h) = set.head() {
        let w = &h.weight;
        let entry = push("head.weight".into(), Role::HeadW, None, vec![w.rows(), w.cols()], w.data());
        out.push(Pending { entry, values: w.data() });
        let entry = push("head.bias".into(), Role::HeadB, None, vec![h.bias.len()], &h.bias);
        out.push(Pending { entry, values: &h.bias });
    }
    out
}

/// Serializes a set into the container layout.
pub fn to_bytes(set: &AdapterSet) -> Vec<u8> {
    let dir = directory(set);
    let header = FileHeader {
        model_signature: set.signature().clone(),
        metadata: set.metadata.clone(),
        tensors: dir.iter().map(|p| p.entry.clone()).collect(),
    };
    let mut json = serde_json::to_vec(&header).expect("header serializes");
    while !(PREAMBLE_LEN + json.len()).is_multiple_of(8) {
        json.push(b' ');
    }
    let payload: usize = dir.iter().map(|p| p.values.len() * 8).sum();
    let mut out = Vec::with_capacity(PREAMBLE_LEN + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &dir {
        for v in p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reads and validates the preamble and header; returns the header and the payload slice.
pub fn parse_header(bytes: &[u8]) -> Result<(FileHeader, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::Corruption(format!("file is {} bytes, too short for a preamble", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"MLGO\"", &bytes[..4])));
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(Error::Corruption(format!("file is {} bytes, too short for a preamble", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (supported: {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREAMBLE_LEN))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            Error::Corruption(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            ))
        })?;
    let header: FileHeader = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
        .map_err(|e| Error::Corruption(format!("unreadable header: {e}")))?;
    Ok((header, &bytes[header_end..]))
}

fn check_directory(entries: &[TensorEntry], payload_len: usize) -> Result<()> {
    let mut prev_end = 0u64;
    for (i, e) in entries.iter().enumerate() {
        let elems = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Corruption(format!("{}: shape overflows", e.name)))?;
        if elems != e.length {
            return Err(Error::Corruption(format!(
                "{}: shape {:?} needs {elems} bytes, directory says {}",
                e.name, e.shape, e.length
            )));
        }
        if e.offset % 8 != 0 {
            return Err(Error::Corruption(format!("{}: offset {} is not 8-byte aligned", e.name, e.offset)));
        }
        if i > 0 && e.offset < prev_end {
            return Err(Error::Corruption(format!(
                "{}: offset {} overlaps the previous tensor ending at {prev_end}",
                e.name, e.offset
            )));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= payload_len as u64)
            .ok_or_else(|| {
                Error::Corruption(format!(
                    "{}: bytes {}..+{} fall outside the {payload_len}-byte payload",
                    e.name, e.offset, e.length
                ))
            })?;
        prev_end = end;
    }
    Ok(())
}

fn read_values(entry: &TensorEntry, payload: &[u8]) -> Result<Vec<f64>> {
    let start = entry.offset as usize;
    let bytes = &payload[start..start + entry.length as usize];
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("tensor {}", entry.name)));
    }
    Ok(values)
}

fn matrix_of(entry: &TensorEntry, values: Vec<f64>) -> Result<Matrix> {
    match entry.shape.as_slice() {
        [r, c] => Matrix::from_vec(*r, *c, values),
        _ => Err(Error::Corruption(format!("{}: expected a 2-d shape, got {:?}", entry.name, entry.shape))),
    }
}

fn vector_of(entry: &TensorEntry, values: Vec<f64>) -> Result<Vec<f64>> {
    match entry.shape.as_slice() {
        [_] => Ok(values),
        _ => Err(Error::Corruption(format!("{}: expected a 1-d shape, got {:?}", entry.name, entry.shape))),
    }
}

#[derive(Default)]
struct Parts {
    b: Option<Matrix>,
    e: Option<Vec<f64>>,
    a: Option<Matrix>,
}

/// Parses a container image, validating every directory entry before use.
pub fn from_bytes(bytes: &[u8]) -> Result<AdapterSet> {
    let (header, payload) = parse_header(bytes)?;
    check_directory(&header.tensors, payload.len())?;

    let mut parts: BTreeMap<TargetId, Parts> = BTreeMap::new();
    let mut head_w = None;
    let mut head_b = None;
    for entry in &header.tensors {
        let values = read_values(entry, payload)?;
        let dup = || Error::Corruption(format!("duplicate tensor {}", entry.name));
        match (entry.role, entry.target) {
            (Role::HeadW, None) => {
                if head_w.replace(matrix_of(entry, values)?).is_some() {
                    return Err(dup());
                }
            }
            (Role::HeadB, None) => {
                if head_b.replace(vector_of(entry, values)?).is_some() {
                    return Err(dup());
                }
            }
            (role @ (Role::B | Role::E | Role::A), Some(t)) => {
                let p = parts.entry(t).or_default();
                let replaced = match role {
                    Role::B => p.b.replace(matrix_of(entry, values)?).is_some(),
                    Role::E => p.e.replace(vector_of(entry, values)?).is_some(),
                    _ => p.a.replace(matrix_of(entry, values)?).is_some(),
                };
                if replaced {
                    return Err(dup());
                }
            }
            (role, target) => {
                return Err(Error::Corruption(format!(
                    "{}: role {role:?} inconsistent with target {target:?}",
                    entry.name
                )))
            }
        }
    }

    let mut adapters = Vec::with_capacity(parts.len());
    for (t, p) in parts {
        let (Some(b), Some(e), Some(a)) = (p.b, p.e, p.a) else {
            return Err(Error::Corruption(format!("{t}: missing one of B, E, A")));
        };
        adapters.push(
            SvdLoraAdapter::new(t, b, e, a).map_err(|err| Error::Corruption(format!("{t}: {err}")))?,
        );
    }
    let head = match (head_w, head_b) {
        (Some(w), Some(b)) => Some(Head::new(w, b).map_err(|e| Error::Corruption(format!("head: {e}")))?),
        (None, None) => None,
        _ => return Err(Error::Corruption("head needs both weight and bias".into())),
    };
    AdapterSet::new(header.model_signature, adapters, head, header.metadata)
        .map_err(|e| Error::Corruption(e.to_string()))
}

pub fn save_adapter_set(set: &AdapterSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(set)).map_err(|e| Error::io(path, e))
}

pub fn load_adapter_set(path: impl AsRef<Path>) -> Result<AdapterSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Hex SHA-256 of the container image.
pub fn digest(set: &AdapterSet) -> String {
    hex::encode(Sha256::digest(to_bytes(set)))
}
