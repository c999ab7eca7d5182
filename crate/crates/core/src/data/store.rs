//! Precomputed embeddings: a JSON manifest next to a raw little-endian `f32`
//! payload (`<name>.json` + `<name>.bin`), row-major `count × dim`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Embedding;

pub const DTYPE_F32LE: &str = "f32le";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreKind {
    Person,
    Scene,
    /// OIM identity prototypes, ids are person ids.
    Prototype,
    /// OIM unknown-person queue, ids are queue slots.
    Queue,
    /// Model parameters, one row per parameter vector.
    Parameter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreManifest {
    pub dim: usize,
    pub count: usize,
    pub dtype: String,
    pub kind: StoreKind,
    pub ids: Vec<i64>,
}

#[derive(Clone, Debug)]
pub struct EmbeddingStore {
    manifest: StoreManifest,
    data: Vec<f32>,
    index: HashMap<i64, usize>,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.manifest == other.manifest
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingStore {
    pub fn new(kind: StoreKind, dim: usize, ids: Vec<i64>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("embedding store dim must be positive"));
        }
        let manifest = StoreManifest {
            dim,
            count: ids.len(),
            dtype: DTYPE_F32LE.to_owned(),
            kind,
            ids,
        };
        Self::from_parts(manifest, data)
    }

    pub fn from_rows(kind: StoreKind, ids: Vec<i64>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if ids.len() != rows.len() {
            return Err(Error::contract(format!("{} ids for {} rows", ids.len(), rows.len())));
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::contract("rows of unequal length"));
        }
        let data = rows.iter().flatten().map(|&v| v as f32).collect();
        Self::new(kind, dim.max(1), ids, data)
    }

    fn from_parts(manifest: StoreManifest, data: Vec<f32>) -> Result<Self> {
        if manifest.dtype != DTYPE_F32LE {
            return Err(Error::Corrupt(format!("unsupported dtype {:?}", manifest.dtype)));
        }
        if manifest.count != manifest.ids.len() {
            return Err(Error::Corrupt(format!(
                "manifest count {} but {} ids",
                manifest.count,
                manifest.ids.len()
            )));
        }
        if data.len() != manifest.count * manifest.dim {
            return Err(Error::Corrupt(format!(
                "payload holds {} values, manifest expects {} × {}",
                data.len(),
                manifest.count,
                manifest.dim
            )));
        }
        let mut index = HashMap::with_capacity(manifest.count);
        for (i, &id) in manifest.ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::Corrupt(format!("duplicate id {id}")));
            }
        }
        Ok(EmbeddingStore { manifest, data, index })
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn ids(&self) -> &[i64] {
        &self.manifest.ids
    }

    pub fn kind(&self) -> StoreKind {
        self.manifest.kind
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.manifest.dim;
        &self.data[i * d..(i + 1) * d]
    }

    pub fn get(&self, id: i64) -> Option<&[f32]> {
        self.index.get(&id).map(|&i| self.row(i))
    }

    /// Row for `id` widened to `f64`.
    pub fn embedding(&self, id: i64) -> Result<Embedding> {
        let row = self
            .get(id)
            .ok_or_else(|| Error::data(format!("no {:?} embedding for id {id}", self.manifest.kind)))?;
        Embedding::from_f32(row)
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| self.row(i).iter().map(|&v| f64::from(v)).collect())
            .collect()
    }

    /// Path of the payload file belonging to a manifest path.
    pub fn payload_path(manifest_path: &Path) -> PathBuf {
        manifest_path.with_extension("bin")
    }

    pub fn save(&self, manifest_path: impl AsRef<Path>) -> Result<()> {
        let path = manifest_path.as_ref();
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let payload = Self::payload_path(path);
        fs::write(&payload, bytes).map_err(|e| Error::io(payload, e))
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: StoreManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let payload = Self::payload_path(path);
        let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
        let expected = manifest.count * manifest.dim * 4;
        if bytes.len() != expected {
            return Err(Error::Corrupt(format!(
                "{}: {} bytes, manifest expects {expected}",
                payload.display(),
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_parts(manifest, data)
    }
}

pub fn save_embeddings(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    store.save(path)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    EmbeddingStore::load(path)
}
