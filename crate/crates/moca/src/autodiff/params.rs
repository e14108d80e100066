//! Named parameter storage shared between training workers, plus versioned
//! checkpoint serialization.
//!
//! The store owns the master copy of every learnable tensor and an equally
//! shaped gradient accumulator. Workers never touch the store from the graph
//! side: they [`bind`](ParameterStore::bind) the current values into leaf (or
//! constant) [`Value`]s, build and differentiate their own graph, then hand
//! plain gradient tensors back for summation. That keeps the single-threaded
//! graph machinery out of the shared state.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Value;
use crate::tensor::Tensor;
use crate::{MocaError, Result};

/// Magic header identifying the checkpoint format version.
pub const CHECKPOINT_MAGIC: &str = "MOCA-CKPT-v1";

#[derive(Debug, Default, Clone)]
pub struct ParameterStore {
    values: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Panics on duplicate names: parameter layouts are
    /// static per model and a collision is a wiring bug.
    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.values.contains_key(name),
            "duplicate parameter name {:?}",
            name
        );
        self.grads.insert(name.to_string(), Tensor::zeros(value.shape()));
        self.values.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {:?}", name))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {:?}", name))
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        self.grads
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {:?}", name))
    }

    /// Parameter names in deterministic (lexicographic) order.
    pub fn names(&self) -> Vec<String> {
        self.values.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    /// Materialize every parameter as a graph node. With `trainable` the
    /// nodes are leaves that collect gradients; otherwise they are constants
    /// and downstream code records no graph at all.
    pub fn bind(&self, trainable: bool) -> Binding {
        let values = self
            .values
            .iter()
            .map(|(name, tensor)| {
                let v = if trainable {
                    Value::leaf(tensor.clone())
                } else {
                    Value::constant(tensor.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Binding { values, trainable }
    }

    /// Add `delta` into the gradient accumulator for `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) {
        let g = self
            .grads
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {:?}", name));
        assert_eq!(
            g.shape(),
            delta.shape(),
            "gradient shape mismatch for {:?}",
            name
        );
        for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
            *gi += di;
        }
    }

    /// Multiply every accumulated gradient by `k` (e.g. 1/batch for a mean).
    pub fn scale_grads(&mut self, k: f64) {
        for g in self.grads.values_mut() {
            for gi in g.data_mut() {
                *gi *= k;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
    }

    /// Iterate `(name, value, grad)` triples in deterministic order.
    pub(crate) fn entries_mut(
        &mut self,
    ) -> impl Iterator<Item = (&String, &mut Tensor, &mut Tensor)> {
        self.values
            .iter_mut()
            .zip(self.grads.values_mut())
            .map(|((name, value), grad)| (name, value, grad))
    }

    // -- checkpoint I/O ----------------------------------------------------

    /// Serialize all parameters to a versioned JSON checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        for (name, t) in &self.values {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(MocaError::Numerical(format!(
                    "refusing to checkpoint non-finite parameter {:?}",
                    name
                )));
            }
        }
        let file = CheckpointFile {
            magic: CHECKPOINT_MAGIC.to_string(),
            params: self.values.clone(),
        };
        let json = serde_json::to_string(&file)
            .map_err(|e| MocaError::Checkpoint(format!("serialize failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Load a checkpoint into a fresh store.
    pub fn load(path: &Path) -> Result<ParameterStore> {
        let text = std::fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&text)
            .map_err(|e| MocaError::Checkpoint(format!("parse failed: {e}")))?;
        if file.magic != CHECKPOINT_MAGIC {
            return Err(MocaError::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                file.magic, CHECKPOINT_MAGIC
            )));
        }
        let mut store = ParameterStore::new();
        for (name, tensor) in file.params {
            store.insert(&name, tensor);
        }
        Ok(store)
    }

    /// Load a checkpoint that must match this store's layout exactly
    /// (same names, same shapes). Values are replaced in place.
    pub fn load_matching(&mut self, path: &Path) -> Result<()> {
        let loaded = ParameterStore::load(path)?;
        if loaded.names() != self.names() {
            return Err(MocaError::Checkpoint(format!(
                "parameter names differ: checkpoint has {:?}, model wants {:?}",
                loaded.names(),
                self.names()
            )));
        }
        for (name, tensor) in &loaded.values {
            let current = self.get(name);
            if current.shape() != tensor.shape() {
                return Err(MocaError::Checkpoint(format!(
                    "shape mismatch for {:?}: checkpoint {:?}, model {:?}",
                    name,
                    tensor.shape(),
                    current.shape()
                )));
            }
        }
        self.values = loaded.values;
        self.zero_grads();
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    params: BTreeMap<String, Tensor>,
}

/// Graph-side view of a [`ParameterStore`]: one [`Value`] per parameter.
/// Confined to the worker thread that created it.
pub struct Binding {
    values: BTreeMap<String, Value>,
    trainable: bool,
}

impl Binding {
    /// Handle for a bound parameter. Panics on unknown names.
    pub fn value(&self, name: &str) -> Value {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown bound parameter {:?}", name))
            .clone()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Collect the gradients accumulated by a backward pass, as plain
    /// tensors that may cross threads. Parameters the loss never touched
    /// contribute zeros.
    pub fn take_grads(&self) -> Vec<(String, Tensor)> {
        self.values
            .iter()
            .map(|(name, v)| {
                let g = v
                    .take_grad()
                    .unwrap_or_else(|| Tensor::zeros(v.data().shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
