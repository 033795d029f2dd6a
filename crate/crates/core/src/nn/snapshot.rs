use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::classifier::{ClassifierConfig, ClassifierModel, ClassifierOutput};
use super::layers::ForwardMode;
use super::module::{load_state_dict, state_dict, StateDict};
use crate::archive::{self, bytes_to_f32s, f32s_to_bytes, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub classifier: ClassifierConfig,
    /// Task index (1-based) after which the snapshot was taken; 0 before training.
    pub task: usize,
    pub seed: u64,
}

/// Immutable, shareable copy of a classifier's full state.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    inner: Arc<SnapshotInner>,
}

#[derive(Debug)]
struct SnapshotInner {
    meta: SnapshotMeta,
    state: StateDict,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    meta: SnapshotMeta,
    tensors: Vec<BlobEntry>,
}

impl ModelSnapshot {
    pub fn capture(model: &ClassifierModel, task: usize, seed: u64) -> Result<Self> {
        Ok(Self::from_parts(
            SnapshotMeta {
                classifier: model.config().clone(),
                task,
                seed,
            },
            state_dict(model)?,
        ))
    }

    pub fn from_parts(meta: SnapshotMeta, state: StateDict) -> Self {
        Self {
            inner: Arc::new(SnapshotInner { meta, state }),
        }
    }

    pub fn meta(&self) -> &SnapshotMeta {
        &self.inner.meta
    }

    pub fn state(&self) -> &StateDict {
        &self.inner.state
    }

    pub fn num_classes(&self) -> usize {
        self.inner.meta.classifier.num_classes
    }

    /// Materializes a trainable copy.
    pub fn instantiate(&self, dtype: DType) -> Result<ClassifierModel> {
        let mut model = ClassifierModel::new(self.inner.meta.classifier.clone(), self.inner.meta.seed, dtype)?;
        load_state_dict(&mut model, &self.inner.state, dtype)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in &self.inner.state {
            let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            let bytes = f32s_to_bytes(&values);
            tensors.push(BlobEntry {
                name: name.clone(),
                shape: t.dims().to_vec(),
                offset: payload.len(),
                len: bytes.len(),
            });
            payload.extend(bytes);
        }
        let manifest = CheckpointManifest {
            meta: self.inner.meta.clone(),
            tensors,
        };
        archive::write(path, CHECKPOINT_MAGIC, &manifest, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, payload): (CheckpointManifest, Vec<u8>) = archive::read(path, CHECKPOINT_MAGIC)?;
        let corrupt = |reason: String| Error::Archive {
            path: path.to_path_buf(),
            reason,
        };
        let mut state = StateDict::new();
        for entry in manifest.tensors {
            let bytes = payload
                .get(entry.offset..entry.offset + entry.len)
                .ok_or_else(|| corrupt(format!("tensor `{}` out of bounds", entry.name)))?;
            let values = bytes_to_f32s(bytes)?;
            if values.len() != entry.shape.iter().product::<usize>() {
                return Err(corrupt(format!("tensor `{}` has wrong element count", entry.name)));
            }
            state.insert(entry.name, Tensor::from_vec(values, entry.shape, &Device::Cpu)?);
        }
        Ok(Self::from_parts(manifest.meta, state))
    }
}

/// Read-only classifier used as teacher and as the previous-task server
/// model. It holds plain tensors and exposes no mutation.
#[derive(Debug, Clone)]
pub struct FrozenClassifier {
    model: ClassifierModel,
}

impl FrozenClassifier {
    pub fn from_snapshot(snapshot: &ModelSnapshot, dtype: DType) -> Result<Self> {
        Ok(Self {
            model: snapshot.instantiate(dtype)?,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        self.model.config()
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    /// Running-statistics forward; `Inversion` additionally captures batch
    /// statistics at every normalization input. `Train` is treated as `Eval`.
    pub fn forward(&self, x: &Tensor, mode: ForwardMode) -> Result<ClassifierOutput> {
        let mode = if mode == ForwardMode::Train { ForwardMode::Eval } else { mode };
        self.model.forward(x, mode)
    }

    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        self.model.project(features)
    }

    pub fn running_stats(&self) -> Vec<(Tensor, Tensor)> {
        self.model.running_stats()
    }

    pub fn state(&self) -> Result<StateDict> {
        state_dict(&self.model)
    }
}
