//! Named parameter storage, initialization, and the checkpoint file format.
//!
//! A checkpoint is two files: `<stem>.bin`, the concatenation of every parameter as
//! little-endian `f32`, and `<stem>.json`, a manifest of names, shapes and byte offsets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn push(&mut self, name: String, value: Tensor<T>) -> ParamId {
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(T::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Same names and shapes in the same order.
    pub fn same_layout<U: Real>(&self, other: &ParamSet<U>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(3 · gain² / fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Constant(f64),
}

/// Registers parameters under a hierarchical prefix while drawing initial values.
pub struct ParamBuilder<'a, T: Real> {
    set: &'a mut ParamSet<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(set: &'a mut ParamSet<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            set,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scoped(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            set: self.set,
            rng: self.rng,
            prefix,
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let rng = &mut *self.rng;
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::from_fn(shape, |_| T::one()),
            Init::Constant(c) => Tensor::from_fn(shape, |_| T::of(c)),
            Init::FanIn { fan_in, gain } => {
                let bound = (3.0 * gain * gain / fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
            }
        };
        self.set.push(full, value)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    dtype: String,
    total_bytes: usize,
    params: Vec<ManifestEntry>,
}

fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save_checkpoint<T: Real>(params: &ParamSet<T>, stem: &Path) -> Result<()> {
    let (bin, json) = checkpoint_paths(stem);
    let mut bytes = Vec::with_capacity(params.num_scalars() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for &v in t.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        dtype: "f32le".into(),
        total_bytes: bytes.len(),
        params: entries,
    };
    if let Some(dir) = bin.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&json, e))?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

/// Loads a checkpoint into a parameter set whose names and shapes must match `template`.
pub fn load_checkpoint<T: Real>(template: &ParamSet<T>, stem: &Path) -> Result<ParamSet<T>> {
    let (bin, json) = checkpoint_paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&json, e))?;
    if manifest.dtype != "f32le" {
        return Err(Error::config(format!(
            "unsupported checkpoint dtype {}",
            manifest.dtype
        )));
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != manifest.total_bytes {
        return Err(Error::shape(
            "checkpoint byte length",
            &[manifest.total_bytes],
            &[bytes.len()],
        ));
    }
    let mut out = template.clone();
    if manifest.params.len() != template.len() {
        return Err(Error::shape(
            "checkpoint parameter count",
            &[template.len()],
            &[manifest.params.len()],
        ));
    }
    for (id, entry) in template.ids().zip(&manifest.params) {
        let expected = template.get(id);
        if entry.name != template.name(id) {
            return Err(Error::config(format!(
                "checkpoint parameter `{}` where `{}` was expected",
                entry.name,
                template.name(id)
            )));
        }
        if entry.shape != expected.shape() {
            return Err(Error::shape(&entry.name, expected.shape(), &entry.shape));
        }
        let end = entry.offset + expected.len() * 4;
        let raw = bytes.get(entry.offset..end).ok_or_else(|| {
            Error::config(format!("checkpoint parameter `{}` out of range", entry.name))
        })?;
        let dst = out.get_mut(id).data_mut();
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = T::of(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
    }
    Ok(out)
}
