use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IstftModel, ModelConfig, ModelError};
use crate::data::{NormStats, Split};

pub const FORMAT: &str = "istft-model";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk container: configuration, normalization statistics, the data
/// split used for training, free-form settings and every named weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub norm: NormStats,
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default)]
    pub settings: BTreeMap<String, String>,
    pub weights: Vec<WeightEntry>,
}

impl ModelFile {
    pub fn new(model: &IstftModel, norm: NormStats) -> Self {
        ModelFile {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config.clone(),
            norm,
            split: None,
            settings: BTreeMap::new(),
            weights: model
                .store
                .iter()
                .map(|(_, name, t)| WeightEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| ModelError::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<ModelFile, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let header: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ModelError::Format(e.to_string()))?;
        if header.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
            return Err(ModelError::Format(format!("missing `\"format\": \"{FORMAT}\"` tag")));
        }
        let found = header.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != VERSION {
            return Err(ModelError::Version {
                found,
                expected: VERSION,
            });
        }
        serde_json::from_value(header).map_err(|e| ModelError::Format(e.to_string()))
    }

    /// Rebuilds the network and installs the stored weights, checking that
    /// names and shapes match the configuration exactly.
    pub fn to_model(&self) -> Result<IstftModel, ModelError> {
        let mut model = IstftModel::new(self.config.clone(), 0)?;
        let mut stored: HashMap<&str, &WeightEntry> = HashMap::new();
        for w in &self.weights {
            if stored.insert(w.name.as_str(), w).is_some() {
                return Err(ModelError::Manifest(format!("weight `{}` appears twice", w.name)));
            }
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let entry = stored
                .remove(name.as_str())
                .ok_or_else(|| ModelError::Manifest(format!("weight `{name}` is missing")))?;
            let t = model.store.get_mut(id);
            if entry.shape != t.shape() || entry.data.len() != t.len() {
                return Err(ModelError::Manifest(format!(
                    "weight `{name}` has shape {:?} with {} values, expected {:?}",
                    entry.shape,
                    entry.data.len(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&entry.data);
        }
        if let Some(extra) = stored.keys().next() {
            return Err(ModelError::Manifest(format!("unexpected weight `{extra}`")));
        }
        Ok(model)
    }
}

pub fn save_model(model: &IstftModel, norm: &NormStats, path: impl AsRef<Path>) -> Result<(), ModelError> {
    ModelFile::new(model, norm.clone()).write(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(IstftModel, ModelFile), ModelError> {
    let file = ModelFile::read(path)?;
    Ok((file.to_model()?, file))
}
