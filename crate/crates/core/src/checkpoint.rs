//! JSON checkpoints.
//!
//! Layout (version 1):
//!
//! ```text
//! { "format_version": 1,
//!   "config": ModelConfig,
//!   "vocabulary": [{"surface": .., "kind": ..}, ...],
//!   "tasks": UnifiedTasks | null,
//!   "params": [{"name": .., "shape": [..], "data": [..]}, ...] }
//! ```
//!
//! Parameters are matched by name on load, so their order in the file does
//! not matter. Floats are written in shortest round-trip form.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use mathmoe_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{Model, ModelConfig};
use crate::text::Vocabulary;
use crate::training::UnifiedTasks;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    #[serde(default)]
    pub tasks: Option<UnifiedTasks>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(model: &Model, vocabulary: &Vocabulary, tasks: Option<&UnifiedTasks>) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: model.config.clone(),
            vocabulary: vocabulary.clone(),
            tasks: tasks.cloned(),
            params: model
                .store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model; every parameter must be present with its expected shape.
    pub fn restore(&self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(CoreError::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut model = Model::new(self.config.clone(), 0)?;
        if self.params.len() != model.store.len() {
            return Err(CoreError::Checkpoint(format!(
                "{} parameters stored, the configuration defines {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for p in &self.params {
            let id = model
                .store
                .id(&p.name)
                .ok_or_else(|| CoreError::Checkpoint(format!("unknown parameter {:?}", p.name)))?;
            if model.store.value(id).shape() != p.shape.as_slice() {
                return Err(CoreError::Checkpoint(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    p.name,
                    p.shape,
                    model.store.value(id).shape()
                )));
            }
            let t = Tensor::new(p.shape.clone(), p.data.clone()).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
            model.store.set(id, t);
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}
