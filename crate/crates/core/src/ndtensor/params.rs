use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named learnable tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<S>>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Registers every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<S>, requires_grad: bool) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.leaf_shared(Arc::clone(v), requires_grad)).collect() }
    }

    /// Largest absolute element-wise difference to another store of equal layout.
    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.values.iter().zip(&other.values).map(|(a, b)| a.max_abs_diff(b)).fold(S::zero(), S::max)
    }

    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::with_capacity(self.num_scalars() * 8);
        let mut entries = Vec::with_capacity(self.len());
        for (name, v) in self.names.iter().zip(&self.values) {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: v.shape().to_vec(),
                offset: blob.len() as u64,
                len: v.len() as u64,
            });
            for &x in v.data() {
                blob.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            dtype: "f64-le".into(),
            blob: PARAMS_BLOB.into(),
            tensors: entries,
            meta,
        };
        fs::File::create(dir.join(PARAMS_BLOB))?.write_all(&blob)?;
        fs::write(dir.join(PARAMS_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`ParamStore::save`]. Returns the store
    /// (in manifest order) and the free-form metadata.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(PARAMS_MANIFEST))?)?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "f64-le" {
            return Err(Error::Format(format!("unsupported checkpoint {} / {}", manifest.format, manifest.dtype)));
        }
        let blob = fs::read(dir.join(&manifest.blob))?;
        let mut store = Self::new();
        for e in manifest.tensors {
            let start = e.offset as usize;
            let end = start + e.len as usize * 8;
            if end > blob.len() || e.shape.iter().product::<usize>() != e.len as usize {
                return Err(Error::Format(format!("tensor {} out of range or inconsistent", e.name)));
            }
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
                .collect();
            store.add(e.name, Tensor::new(&e.shape, data)?)?;
        }
        Ok((store, manifest.meta))
    }

    /// Copies values from `other` for every name present in both stores with
    /// identical shape. Returns an error if any of our parameters is missing.
    pub fn load_values_from(&mut self, other: &Self) -> Result<()> {
        for i in 0..self.len() {
            let name = &self.names[i];
            let src = other
                .id(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            let src = other.get(src);
            if src.shape() != self.values[i].shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?} in checkpoint, expected {:?}",
                    src.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = Arc::new(src.clone());
        }
        Ok(())
    }
}

pub const PARAMS_MANIFEST: &str = "params.json";
pub const PARAMS_BLOB: &str = "params.bin";
const CHECKPOINT_FORMAT: &str = "madp-params-v1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    dtype: String,
    blob: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter after `tape.backward`, zero where unreachable.
    pub fn grads<S: Scalar>(&self, tape: &Tape<S>) -> Vec<Tensor<S>> {
        self.vars
            .iter()
            .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    }
}
