//! Named parameter tensors, their gradient accumulators, and the JSON
//! checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters in insertion order, each with a same-shaped gradient buffer.
///
/// Gradients only change through [`ParamStore::accumulate_grad`] and
/// [`ParamStore::zero_grad`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let dst = self.grads[id.0].data_mut();
        debug_assert_eq!(dst.len(), g.len());
        dst.iter_mut().zip(g).for_each(|(d, v)| *d += v);
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn param_norm(&self) -> f64 {
        self.values.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Appends every parameter to `ckpt` under `prefix`.
    pub fn export_into(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for (name, value) in self.names.iter().zip(&self.values) {
            let full = format!("{prefix}{name}");
            ckpt.manifest.push(ManifestEntry {
                name: full.clone(),
                shape: value.shape().to_vec(),
            });
            ckpt.data.insert(full, value.data().to_vec());
        }
    }

    /// Restores every parameter of `self` (by name, under `prefix`) from `ckpt`.
    /// Shapes must match the checkpoint manifest exactly.
    pub fn import_from(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let full = format!("{prefix}{name}");
            let entry = ckpt
                .manifest
                .iter()
                .find(|e| e.name == full)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {full:?}")))?;
            if entry.shape != value.shape() {
                return Err(Error::Config(format!(
                    "parameter {full:?}: checkpoint shape {:?}, expected {:?}",
                    entry.shape,
                    value.shape()
                )));
            }
            let data = ckpt
                .data
                .get(&full)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks data for {full:?}")))?;
            *value = Tensor::new(entry.shape.clone(), data.clone())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// `{"manifest": [{"name","shape"}...], "data": {name: [f64...]}, "meta": {...}}`
///
/// Values survive a write/read cycle bit-for-bit for all finite `f64`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub manifest: Vec<ManifestEntry>,
    pub data: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        if let Some((name, _)) = self.data.iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric(format!("parameter {name:?} holds a non-finite value")));
        }
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        for entry in &ckpt.manifest {
            let n: usize = entry.shape.iter().product();
            match ckpt.data.get(&entry.name) {
                Some(d) if d.len() == n => {}
                _ => {
                    return Err(Error::Config(format!(
                        "checkpoint data for {:?} missing or wrong length",
                        entry.name
                    )))
                }
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
