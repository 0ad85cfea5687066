//! Named tensor bundles on disk and content hashing.
//!
//! A bundle directory holds one `<name>.tnsr` per tensor and a
//! `manifest.json` naming them in order together with the model config and
//! the bundle hash.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{io, Element, Tape, Tensor, Var};

/// Ordered, named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.entries[slot].1
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter on `tape`, as leaves when `trainable`.
    pub fn bind<'t, E: Element>(&self, tape: &'t Tape<E>, trainable: bool) -> Vec<Var<'t, E>> {
        self.entries
            .iter()
            .map(|(_, t)| {
                let v = t.cast::<E>();
                if trainable {
                    tape.leaf(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect()
    }

    /// Errors unless `other` has the same names and shapes in the same order.
    pub fn check_layout(&self, other: &ParamStore, what: &str) -> Result<()> {
        let same = self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape());
        if same {
            Ok(())
        } else {
            Err(Error::Format(format!("{what} parameters do not match the configured layout")))
        }
    }

    /// SHA-256 over names, shapes and payloads, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path, config: &serde_json::Value) -> Result<String> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let file = format!("{name}.tnsr");
            io::write(&dir.join(&file), t)?;
            entries.push(BundleEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            });
        }
        let hash = self.hash();
        let manifest = BundleManifest {
            format: "TNSR".into(),
            hash: hash.clone(),
            config: config.clone(),
            tensors: entries,
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(hash)
    }

    /// Loads a bundle and verifies its recorded hash.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let manifest: BundleManifest = read_json(&dir.join("manifest.json"))?;
        let mut store = Self::new();
        for e in &manifest.tensors {
            let t = io::read(&dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("{}: shape {:?} != manifest {:?}", e.name, t.shape(), e.shape)));
            }
            store.add(e.name.clone(), t);
        }
        let found = store.hash();
        if found != manifest.hash {
            return Err(Error::HashMismatch {
                what: dir.display().to_string(),
                expected: manifest.hash,
                found,
            });
        }
        Ok((store, manifest.config))
    }

    /// Hash recorded in a bundle manifest, without loading the tensors.
    pub fn recorded_hash(dir: &Path) -> Result<String> {
        let manifest: BundleManifest = read_json(&dir.join("manifest.json"))?;
        Ok(manifest.hash)
    }
}

#[derive(Serialize, Deserialize)]
struct BundleEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    format: String,
    hash: String,
    config: serde_json::Value,
    tensors: Vec<BundleEntry>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of several byte chunks, each length-prefixed.
pub fn sha256_parts<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_roundtrip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::new();
        p.add("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        p.add("b", Tensor::vector(vec![0.5, -0.5]));
        let hash = p.save(dir.path(), &serde_json::json!({"hidden": 2})).unwrap();
        let (q, cfg) = ParamStore::load(dir.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(cfg["hidden"], 2);
        assert_eq!(hash, q.hash());

        io::write(&dir.path().join("b.tnsr"), &Tensor::vector(vec![0.5, 0.0])).unwrap();
        assert!(matches!(ParamStore::load(dir.path()), Err(Error::HashMismatch { .. })));
    }
}
