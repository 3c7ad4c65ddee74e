//! Model checkpoints on top of the tensor container.

use super::{Model, ModelConfig};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use serde_json::json;
use std::path::Path;

/// A model plus the training-stage tag it was saved at.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub stage: String,
}

impl Checkpoint {
    pub fn new(model: Model, stage: &str) -> Self {
        Checkpoint {
            model,
            stage: stage.to_string(),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = json!({
            "kind": self.model.config.kind.to_string(),
            "config": serde_json::to_value(&self.model.config)?,
            "stage": self.stage,
        });
        let mut c = Container::new(meta);
        for p in self.model.params.iter() {
            c.push(&p.name, p.tensor.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            c.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint has no config".into()))?,
        )?;
        let stage = c.meta.get("stage").and_then(|s| s.as_str()).unwrap_or("").to_string();
        let reference = Model::new(config.clone(), 0)?;
        let mut params = ParamStore::new();
        for (name, t) in c.tensors {
            let expected = reference
                .params
                .get(&name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter '{name}'")))?;
            if expected.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter '{name}' has shape {:?}, config implies {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
            params.insert(&name, t);
        }
        if params.len() != reference.params.len() {
            return Err(Error::Format("checkpoint is missing parameters".into()));
        }
        Ok(Checkpoint {
            model: Model { config, params },
            stage,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FusionVariant, ModelKind};

    #[test]
    fn roundtrip_preserves_parameters() {
        let m = Model::new(ModelConfig::micro(ModelKind::AvAlignAu, FusionVariant::M3), 4).unwrap();
        let ck = Checkpoint::new(m, "snr10");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = Model::new(ModelConfig::micro(ModelKind::Audio, FusionVariant::Baseline), 4).unwrap();
        let mut c = Checkpoint::new(m, "clean").to_container().unwrap();
        c.tensors[0].1 = crate::tensor::Tensor::zeros(vec![1, 1]);
        assert!(Checkpoint::from_container(c).is_err());
    }
}
