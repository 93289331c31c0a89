//! Flat tensor archive: one little-endian `f64` blob plus a JSON manifest
//! listing each tensor's name, shape and byte offset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "spt-tensor-archive/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: BTreeMap<String, String>,
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}.bin")),
        dir.join(format!("{stem}.manifest.json")),
    )
}

impl TensorArchive {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Archive(format!("missing tensor `{name}`")))
    }

    pub fn manifest(&self, blob: &str) -> Manifest {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let bytes = t.len() * 8;
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape(),
                    offset,
                    bytes,
                };
                offset += bytes;
                e
            })
            .collect();
        Manifest {
            format: FORMAT.into(),
            blob: blob.into(),
            entries,
            meta: self.meta.clone(),
        }
    }

    /// Writes `<stem>.bin` and `<stem>.manifest.json` under `dir`, creating it.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (bin, man) = paths(dir, stem);
        let mut blob = Vec::new();
        for (_, t) in &self.tensors {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
        let manifest = self.manifest(&format!("{stem}.bin"));
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&man, text + "\n").map_err(|e| Error::io(&man, e))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (bin, man) = paths(dir, stem);
        let text = fs::read_to_string(&man).map_err(|e| Error::io(&man, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::Archive(format!("unknown format `{}`", manifest.format)));
        }
        let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut tensors = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let [r, c] = e.shape;
            if e.bytes != r * c * 8 || e.offset + e.bytes > blob.len() {
                return Err(Error::Archive(format!("entry `{}` out of bounds", e.name)));
            }
            let data = blob[e.offset..e.offset + e.bytes]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(r, c, data)?));
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }
}
