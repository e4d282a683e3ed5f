//! The `LPWT` weight file.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LPWT"
//! 4       4     version, u32 little-endian (currently 1)
//! 8       8     manifest length in bytes, u64 little-endian
//! 16      M     manifest, UTF-8 JSON
//! 16+M    B     blob: little-endian f32 parameters
//! ```
//!
//! The manifest is `{"network": <NetworkSpec>, "params": [{"name", "shape",
//! "offset"}...], "blob_bytes": B, "blob_sha256": "<hex>"}`. Offsets are in
//! bytes from the start of the blob. Parameters appear in layer order; see
//! [`param_layout`](crate::network::param_layout) for the names and shapes a
//! given network expects.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::netspec::NetworkSpec;

pub const MAGIC: [u8; 4] = *b"LPWT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl ParamRecord {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named parameter tensors packed into one float blob.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    records: Vec<ParamRecord>,
    data: Vec<f32>,
}

impl WeightStore {
    pub fn new() -> Self {
        WeightStore::default()
    }

    /// Appends a parameter at the end of the blob.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(format!("shape {shape:?} needs {expected} values, got {}", values.len())));
        }
        let offset = (self.data.len() * 4) as u64;
        self.records.push(ParamRecord { name: name.into(), shape, offset });
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn records(&self) -> &[ParamRecord] {
        &self.records
    }

    pub fn get(&self, name: &str) -> Option<(&ParamRecord, &[f32])> {
        let rec = self.records.iter().find(|r| r.name == name)?;
        let start = rec.offset as usize / 4;
        Some((rec, &self.data[start..start + rec.len()]))
    }

    pub fn values(&self, rec: &ParamRecord) -> &[f32] {
        let start = rec.offset as usize / 4;
        &self.data[start..start + rec.len()]
    }

    pub fn total_floats(&self) -> usize {
        self.data.len()
    }

    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Rebuilds a store from manifest records and a raw blob, checking that
    /// every record is aligned, in bounds and disjoint from the others.
    pub fn from_parts(records: Vec<ParamRecord>, blob: &[u8]) -> Result<Self> {
        if blob.len() % 4 != 0 {
            return Err(Error::Format(format!("blob length {} is not a multiple of 4", blob.len())));
        }
        let mut names = HashSet::new();
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(records.len());
        for r in &records {
            if !names.insert(r.name.as_str()) {
                return Err(Error::Format(format!("duplicate parameter {}", r.name)));
            }
            if r.offset % 4 != 0 {
                return Err(Error::Format(format!("{}: offset {} not 4-byte aligned", r.name, r.offset)));
            }
            let end = r.offset + 4 * r.len() as u64;
            if end > blob.len() as u64 {
                return Err(Error::Format(format!("{}: bytes {}..{end} past blob end {}", r.name, r.offset, blob.len())));
            }
            spans.push((r.offset, end, &r.name));
        }
        spans.sort();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::Format(format!("parameters {} and {} overlap", pair[0].2, pair[1].2)));
            }
        }
        let data = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Ok(WeightStore { records, data })
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    network: NetworkSpec,
    params: Vec<ParamRecord>,
    blob_bytes: u64,
    blob_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes to the canonical byte layout. Identical inputs give identical
/// bytes.
pub fn to_bytes(spec: &NetworkSpec, store: &WeightStore) -> Result<Vec<u8>> {
    spec.validate()?;
    let blob = store.blob();
    let manifest = Manifest {
        network: spec.clone(),
        params: store.records.clone(),
        blob_bytes: blob.len() as u64,
        blob_sha256: sha256_hex(&blob),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blob.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(NetworkSpec, WeightStore)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not an LPWT file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let mend = (HEADER_LEN as u64).checked_add(mlen).filter(|&e| e <= bytes.len() as u64).ok_or_else(|| {
        Error::Format(format!("manifest length {mlen} exceeds file size {}", bytes.len()))
    })? as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..mend])
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let blob = &bytes[mend..];
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Checksum(format!("blob is {} bytes, manifest says {}", blob.len(), manifest.blob_bytes)));
    }
    let digest = sha256_hex(blob);
    if digest != manifest.blob_sha256 {
        return Err(Error::Checksum(format!("sha256 {digest} != {}", manifest.blob_sha256)));
    }
    manifest.network.validate()?;
    let store = WeightStore::from_parts(manifest.params, blob)?;
    Ok((manifest.network, store))
}

pub fn save_weights(spec: &NetworkSpec, store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(spec, store)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(NetworkSpec, WeightStore)> {
    from_bytes(&fs::read(path)?)
}
