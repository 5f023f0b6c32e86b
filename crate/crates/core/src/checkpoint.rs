//! JSON container for a trained model, its configuration and taxonomy.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::contrastive::MemoryBank;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::taxonomy::{Taxonomy, TaxonomyDocument};
use crate::trainer::{ExperimentConfig, TrainedModel};

pub const FORMAT: &str = "cocal-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    config: ExperimentConfig,
    taxonomy: TaxonomyDocument,
    tensors: Vec<StoredTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub taxonomy: Taxonomy,
    pub model: TrainedModel,
}

fn bank_tensors(bank: &MemoryBank, level: &str, out: &mut Vec<StoredTensor>) {
    for class in 0..bank.num_classes() {
        let m = bank.class_matrix(class).expect("class in range");
        out.push(StoredTensor {
            name: format!("bank.{level}.{class}"),
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        });
    }
}

fn take_bank(
    tensors: &mut BTreeMap<String, StoredTensor>,
    level: &'static str,
    classes: usize,
    capacity: usize,
    dim: usize,
) -> Result<MemoryBank> {
    let mut matrices = Vec::with_capacity(classes);
    for class in 0..classes {
        let name = format!("bank.{level}.{class}");
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        let m = match t.shape.as_slice() {
            &[rows, cols] if cols == dim && rows * cols == t.data.len() => Array2::from_shape_vec((rows, cols), t.data)
                .expect("shape checked"),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected [n, {dim}]",
                    t.shape
                )))
            }
        };
        matrices.push(m);
    }
    MemoryBank::from_matrices(level, capacity, dim, &matrices)
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, taxonomy: Taxonomy, model: TrainedModel) -> Self {
        Self {
            config,
            taxonomy,
            model,
        }
    }

    pub fn to_json(&self) -> String {
        let mut tensors: Vec<StoredTensor> = self
            .model
            .network
            .tensors()
            .into_iter()
            .map(|t| StoredTensor {
                name: t.name,
                shape: t.shape,
                data: t.data.iter().map(|&v| f64::from(v)).collect(),
            })
            .collect();
        bank_tensors(&self.model.part_bank, "part", &mut tensors);
        bank_tensors(&self.model.object_bank, "object", &mut tensors);
        let container = Container {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            taxonomy: self.taxonomy.to_document(),
            tensors,
        };
        serde_json::to_string(&container).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let container: Container = serde_json::from_str(text)?;
        if container.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", container.format)));
        }
        if container.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {VERSION})",
                container.version
            )));
        }
        let config = container.config;
        config.validate()?;
        let taxonomy = Taxonomy::from_document(&container.taxonomy)?;
        let mut tensors = BTreeMap::new();
        for t in container.tensors {
            if tensors.contains_key(&t.name) {
                return Err(Error::Checkpoint(format!("duplicate tensor `{}`", t.name)));
            }
            tensors.insert(t.name.clone(), t);
        }
        let dim = config.model.decoder.channels;
        let capacity = config.contrast.bank_size;
        let part_bank = take_bank(&mut tensors, "part", taxonomy.num_parts(), capacity, dim)?;
        let object_bank = take_bank(&mut tensors, "object", taxonomy.num_objects(), capacity, dim)?;
        let mut params = BTreeMap::new();
        for (name, t) in tensors {
            let data: Vec<f32> = t.data.iter().map(|&v| v as f32).collect();
            params.insert(name, (t.shape, data));
        }
        let network = Network::from_tensors(&config.model, taxonomy.num_parts(), taxonomy.num_objects(), &params)?;
        Ok(Self {
            config,
            taxonomy,
            model: TrainedModel {
                network,
                part_bank,
                object_bank,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(e) => Error::Checkpoint(format!("{}: {e}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let taxonomy = Taxonomy::synthetic_default();
        let config = ExperimentConfig::default();
        let mut model = TrainedModel::init(&config, &taxonomy).unwrap();
        let d = config.model.decoder.channels;
        for i in 0..5 {
            model.part_bank.push(i % 3, &vec![0.1 * i as f64; d]).unwrap();
        }
        model.object_bank.push(2, &vec![-0.7; d]).unwrap();
        Checkpoint::new(config, taxonomy, model)
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample_checkpoint();
        let text = ckpt.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn rejects_tampered_containers() {
        let text = sample_checkpoint().to_json();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["version"] = 99.into();
        assert!(matches!(Checkpoint::from_json(&v.to_string()), Err(Error::Checkpoint(_))));

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let tensors = v["tensors"].as_array_mut().unwrap();
        let i = tensors.iter().position(|t| t["name"] == "dict.part").unwrap();
        tensors.remove(i);
        assert!(matches!(Checkpoint::from_json(&v.to_string()), Err(Error::Checkpoint(_))));

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["tensors"].as_array_mut().unwrap().push(serde_json::json!({"name": "extra", "shape": [1], "data": [0.0]}));
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
    }
}
