//! Named parameter storage, tape binding and checkpoints.
//!
//! A checkpoint is two files: the raw little-endian `f64` blob (`ck.bin`)
//! and a JSON manifest next to it (`ck.json`) with names, shapes, dtype,
//! byte offsets and free-form metadata.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::tape::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    /// Copy-on-write access; clones only if a tape still holds the tensor.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in &self.values {
            out.extend(v.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(DiffError::Argument(format!(
                "set_flat: expected {} scalars, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for v in &mut self.values {
            let v = Arc::make_mut(v);
            let n = v.len();
            for (dst, src) in v.iter_mut().zip(&flat[offset..offset + n]) {
                *dst = *src;
            }
            offset += n;
        }
        Ok(())
    }

    /// Zero tensors shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values.iter().map(|v| Array2::zeros(v.dim())).collect()
    }

    /// Puts every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf_shared(Arc::clone(v)))
                .collect(),
        }
    }

    /// Puts every parameter on `tape` as a constant (no gradient bookkeeping).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.constant_shared(Arc::clone(v)))
                .collect(),
        }
    }

    /// Writes the blob to `path` and the manifest to `path` with a `.json`
    /// extension.
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let mut blob = Vec::with_capacity(self.num_scalars() * 8);
        let mut tensors = Vec::with_capacity(self.len());
        for (name, value) in self.names.iter().zip(&self.values) {
            let offset = blob.len();
            for x in value.iter() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: [value.nrows(), value.ncols()],
                dtype: "f64".into(),
                offset,
            });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            tensors,
            meta,
        };
        fs::write(path, blob)?;
        let json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| DiffError::Manifest(e.to_string()))?;
        fs::write(manifest_path(path), json)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamStore::save`].
    pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let blob = fs::read(path)?;
        let json = fs::read(manifest_path(path))?;
        let manifest: Manifest =
            serde_json::from_slice(&json).map_err(|e| DiffError::Manifest(e.to_string()))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(DiffError::Manifest(format!(
                "unknown checkpoint format {:?}",
                manifest.format
            )));
        }
        let mut store = ParamStore::new();
        for t in manifest.tensors {
            if t.dtype != "f64" {
                return Err(DiffError::Manifest(format!(
                    "{}: unsupported dtype {}",
                    t.name, t.dtype
                )));
            }
            let n = t.shape[0] * t.shape[1];
            let end = t.offset + 8 * n;
            let bytes = blob.get(t.offset..end).ok_or_else(|| {
                DiffError::Manifest(format!("{}: blob too short", t.name))
            })?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let value = Array2::from_shape_vec((t.shape[0], t.shape[1]), data)
                .map_err(|e| DiffError::Manifest(e.to_string()))?;
            store.add(t.name, value);
        }
        Ok((store, manifest.meta))
    }
}

const MANIFEST_FORMAT: &str = "mfax-params-v1";

pub fn manifest_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Parameters placed on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Parameter gradients in store order, zeros where unreachable.
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| g.wrt(v)).collect()
    }
}

/// `sqrt(Σ ||g||²)` over a gradient set.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// `acc += other`, elementwise per tensor.
pub fn accumulate(acc: &mut [Tensor], other: &[Tensor]) {
    debug_assert_eq!(acc.len(), other.len());
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

pub fn scale_all(grads: &mut [Tensor], c: f64) {
    for g in grads {
        g.mapv_inplace(|x| x * c);
    }
}
