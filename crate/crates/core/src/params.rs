//! Named parameter arrays and their on-disk form.
//!
//! A saved set is a directory holding `manifest.json` (name -> dtype, shape,
//! file) and one raw little-endian row-major blob per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, DType, Scalar, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S> {
    entries: BTreeMap<String, Tensor<S>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: BTreeMap<String, ManifestEntry>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bitwise_eq(b))
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = Manifest { params: BTreeMap::new() };
        for (name, t) in &self.entries {
            let file = format!("{}.bin", name.replace(['/', '\\'], "_"));
            let mut bytes = Vec::with_capacity(t.len() * S::DTYPE.size_of());
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
            fs::write(dir.join(&file), bytes)?;
            manifest.params.insert(
                name.clone(),
                ManifestEntry {
                    dtype: S::DTYPE,
                    shape: t.shape().to_vec(),
                    file,
                },
            );
        }
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        let mut out = ParamSet::new();
        for (name, e) in manifest.params {
            if e.dtype != S::DTYPE {
                return Err(Error::Dtype {
                    expected: S::DTYPE.name(),
                    found: e.dtype.name().to_string(),
                });
            }
            let path = dir.join(&e.file);
            let bytes = fs::read(&path)?;
            let n = numel(&e.shape);
            if bytes.len() != n * S::DTYPE.size_of() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    detail: format!("expected {} bytes for shape {:?}, found {}", n * S::DTYPE.size_of(), e.shape, bytes.len()),
                });
            }
            let data = bytes.chunks_exact(S::DTYPE.size_of()).map(S::read_le).collect();
            out.insert(name, Tensor::new(e.shape, data)?);
        }
        Ok(out)
    }
}

/// Reads only the dtype recorded in a saved set.
pub fn saved_dtype(dir: &Path) -> Result<Option<DType>> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    Ok(manifest.params.values().next().map(|e| e.dtype))
}
