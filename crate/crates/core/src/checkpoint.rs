//! On-disk checkpoint: a directory holding `manifest.json` and one raw
//! little-endian float file per named array.
//!
//! Arrays are grouped (`model`, `ema`, optimizer moments, ...). A group is a
//! [`ParamStore`]; the trainable flag of each entry is kept in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayRecord {
    pub group: String,
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub dtype: DType,
    pub step: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    /// True when an `ema` group is present.
    pub ema: bool,
    pub arrays: Vec<ArrayRecord>,
}

#[derive(Clone)]
pub struct Checkpoint<T: Element> {
    pub step: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub groups: BTreeMap<String, ParamStore<T>>,
}

/// SHA-256 of the compact JSON form. `serde_json` maps keep keys sorted, so
/// equal values hash equally regardless of source formatting.
pub fn config_hash(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn file_name(group: &str, name: &str) -> String {
    format!("{group}.{name}.bin")
}

fn encode<T: Element>(data: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * T::DTYPE.size_in_bytes());
    for &v in data {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_f64().to_le_bytes()),
        }
    }
    out
}

fn decode<T: Element>(bytes: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|b| T::from_f64(f64::from_le_bytes(b.try_into().unwrap())))
            .collect(),
    }
}

impl<T: Element> Checkpoint<T> {
    pub fn new(step: u64, config: serde_json::Value) -> Self {
        Self {
            step,
            config_hash: config_hash(&config),
            config,
            groups: BTreeMap::new(),
        }
    }

    pub fn with_group(mut self, group: &str, store: ParamStore<T>) -> Self {
        self.groups.insert(group.to_string(), store);
        self
    }

    pub fn group(&self, group: &str) -> Result<&ParamStore<T>> {
        self.groups
            .get(group)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no `{group}` arrays")))
    }

    /// Writes into `dir` via a sibling temporary directory and a rename, so a
    /// crash never leaves a half-written checkpoint under the final name.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let leaf = dir
            .file_name()
            .ok_or_else(|| ckpt_err(dir, "path has no final component"))?
            .to_string_lossy()
            .into_owned();
        let tmp = parent.join(format!(".{leaf}.partial"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        let mut arrays = Vec::new();
        for (group, store) in &self.groups {
            for (name, entry) in store.iter() {
                let file = file_name(group, name);
                fs::write(tmp.join(&file), encode(entry.tensor.data()))?;
                arrays.push(ArrayRecord {
                    group: group.clone(),
                    name: name.to_string(),
                    file,
                    shape: entry.tensor.shape().to_vec(),
                    trainable: entry.trainable,
                });
            }
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            dtype: T::DTYPE,
            step: self.step,
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            ema: self.groups.contains_key("ema"),
            arrays,
        };
        fs::write(tmp.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        let text = fs::read(&path).map_err(|e| ckpt_err(dir, format!("cannot read {MANIFEST}: {e}")))?;
        let manifest: Manifest =
            serde_json::from_slice(&text).map_err(|e| ckpt_err(dir, format!("bad {MANIFEST}: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(ckpt_err(dir, format!("unsupported format version {}", manifest.version)));
        }
        if config_hash(&manifest.config) != manifest.config_hash {
            return Err(ckpt_err(dir, "config does not match its recorded hash"));
        }
        Ok(manifest)
    }

    /// Loads every array, converting from the stored float width to `T`.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let mut groups: BTreeMap<String, ParamStore<T>> = BTreeMap::new();
        for rec in &manifest.arrays {
            let path: PathBuf = dir.join(&rec.file);
            let bytes = fs::read(&path).map_err(|e| ckpt_err(dir, format!("{}: {e}", rec.file)))?;
            let numel: usize = rec.shape.iter().product();
            if bytes.len() != numel * manifest.dtype.size_in_bytes() {
                return Err(ckpt_err(
                    dir,
                    format!("{}: {} bytes for shape {:?} of {}", rec.file, bytes.len(), rec.shape, manifest.dtype),
                ));
            }
            let tensor = Tensor::from_vec(decode::<T>(&bytes, manifest.dtype), &rec.shape)?;
            groups
                .entry(rec.group.clone())
                .or_default()
                .insert(rec.name.clone(), tensor, rec.trainable);
        }
        Ok(Self {
            step: manifest.step,
            config: manifest.config,
            config_hash: manifest.config_hash,
            groups,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_formatting() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b": 1, "a": [1, 2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str("{\"a\":[1,2],\n\"b\":1}").unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
